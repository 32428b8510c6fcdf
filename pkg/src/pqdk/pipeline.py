"""Ordered compression stages (prune, QAT, KD) over a trained baseline.

A :class:`ModelState` carries the float weights plus the compression
state accumulated so far: the prune mask and, once quantized, the frozen
weight and activation qparams.  Quantized weights are kept as their
dequantized grid values so later stages can keep fine-tuning under
fake quantization and then snap back onto the grid.
"""
from __future__ import annotations

import copy
import itertools
import logging
import statistics
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from .checkpoint import Checkpoint, deserialize
from .data import LabeledImages, batches
from .distillation import KDConfig, kd_train_step
from .nn import Model
from .optim import SGD, TrainConfig
from .pruning import PruneMask, apply_mask, global_magnitude_mask, in_sparse_set, masked_train_step
from .quantization import (QuantHooks, QuantTensor, calibrate_minmax, convert_to_int8, fake_quant_array,
                           fake_quant_kept, tensor_qparams)

log = logging.getLogger(__name__)

KINDS = ("prune", "qat", "kd")
DEFAULT_ORDERS = [("prune", "qat", "kd"), ("prune", "kd", "qat"), ("qat", "prune", "kd"), ("qat", "kd", "prune")]
ALL_ORDERS = [tuple(p) for p in itertools.permutations(KINDS)]


class InvariantViolation(RuntimeError):
    pass


class StageError(ValueError):
    pass


def substream(seed: int, name: str) -> int:
    """Independent 63-bit seed for a named random stream."""
    ss = np.random.SeedSequence([seed, zlib.crc32(name.encode())])
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


@dataclass
class Stage:
    kind: str
    epochs: int
    rho: float = 0.5
    lr: float = 0.01
    kd: KDConfig = field(default_factory=KDConfig)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise StageError(f"unknown stage kind {self.kind!r}")
        if self.epochs < 0:
            raise StageError(f"stage epochs must be non-negative, got {self.epochs}")
        if self.kind == "prune" and not 0.0 <= self.rho < 1.0:
            raise StageError(f"prune rho must lie in [0, 1), got {self.rho}")

    def describe(self) -> dict:
        d = {"kind": self.kind, "epochs": self.epochs, "lr": self.lr}
        if self.kind == "prune":
            d["rho"] = self.rho
        if self.kind == "kd":
            d["alpha"] = self.kd.alpha
            d["temperature"] = self.kd.temperature
        return d

    def label(self) -> str:
        return f"prune{int(round(self.rho * 100))}" if self.kind == "prune" else self.kind


@dataclass
class StagePlan:
    stages: list
    seed: int = 0
    total_budget: int | None = None
    latency_budget_ms: float | None = None
    batch_size: int = 64
    momentum: float = 0.9

    def __post_init__(self):
        kinds = [s.kind for s in self.stages]
        dup = {k for k in kinds if kinds.count(k) > 1}
        if dup:
            raise StageError(f"stage kinds may appear at most once, repeated: {sorted(dup)}")
        if self.total_budget is None:
            self.total_budget = self.epochs()
        if self.epochs() > self.total_budget:
            raise StageError(f"stage epochs {self.epochs()} exceed total budget {self.total_budget}")

    def epochs(self) -> int:
        return sum(s.epochs for s in self.stages)

    def order_name(self) -> str:
        return "-".join(s.label() for s in self.stages) or "baseline"

    def reordered(self, order) -> "StagePlan":
        by_kind = {s.kind: s for s in self.stages}
        return StagePlan([by_kind[k] for k in order], self.seed, self.total_budget,
                         self.latency_budget_ms, self.batch_size, self.momentum)


def parse_order(text: str) -> list[Stage]:
    """Parse ``prune:0.5:20,qat:40,kd:40`` (``stage[:param...]:epochs``).

    ``kd`` optionally takes ``alpha:T`` before the epochs.
    """
    stages, seen, pos = [], set(), 0
    if not text.strip():
        return stages
    for item in text.split(","):
        parts = item.strip().split(":")
        kind = parts[0]
        try:
            if kind == "prune":
                if len(parts) != 3:
                    raise StageError("expected prune:<rho>:<epochs>")
                stage = Stage("prune", int(parts[2]), rho=float(parts[1]))
            elif kind == "qat":
                if len(parts) != 2:
                    raise StageError("expected qat:<epochs>")
                stage = Stage("qat", int(parts[1]))
            elif kind == "kd":
                if len(parts) == 2:
                    stage = Stage("kd", int(parts[1]))
                elif len(parts) == 4:
                    stage = Stage("kd", int(parts[3]), kd=KDConfig(float(parts[1]), float(parts[2])))
                else:
                    raise StageError("expected kd:<epochs> or kd:<alpha>:<T>:<epochs>")
            else:
                raise StageError(f"unknown stage {kind!r}")
            if kind in seen:
                raise StageError(f"duplicate stage {kind!r}")
        except (ValueError, StageError) as exc:
            raise StageError(f"order string position {pos} ({item!r}): {exc}") from None
        seen.add(kind)
        stages.append(stage)
        pos += len(item) + 1
    return stages


@dataclass
class ModelState:
    model: Model
    mask: PruneMask | None = None
    quantized: bool = False
    weight_qparams: dict = field(default_factory=dict)
    act_qparams: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def copy(self) -> "ModelState":
        return ModelState(self.model.clone(), copy.deepcopy(self.mask), self.quantized,
                          dict(self.weight_qparams), dict(self.act_qparams),
                          copy.deepcopy(self.history), copy.deepcopy(self.meta))

    def hooks(self, enabled: bool | None = None) -> QuantHooks:
        h = QuantHooks(self.model, enabled=self.quantized if enabled is None else enabled, masks=self.masks())
        if self.quantized:
            h.set_activation_qparams(self.act_qparams)
            h.freeze()
        return h

    def masks(self) -> dict:
        return self.mask.masks if self.mask is not None else {}

    def int_model(self):
        return convert_to_int8(self.model, {**self.weight_qparams, **self.act_qparams})

    def predictor(self):
        """Deployable forward: integer model once quantized, float otherwise."""
        return self.int_model() if self.quantized else self.model

    def snap_to_grid(self):
        """Requantize the current weights onto fresh per-tensor grids."""
        masks = self.masks()
        for name, p in self.model.maskable().items():
            qp = tensor_qparams(p.data)
            self.weight_qparams[name] = qp
            p.data = fake_quant_kept(p.data, qp, masks.get(name))

    def on_grid(self) -> bool:
        for name, p in self.model.maskable().items():
            qp = self.weight_qparams.get(name)
            if qp is None or not np.array_equal(fake_quant_array(p.data, qp), p.data):
                return False
        return True

    def nonzero(self) -> int:
        return sum(int(np.count_nonzero(p.data)) for p in self.model.maskable().values())

    def to_checkpoint(self, accuracy: float = 0.0) -> Checkpoint:
        params = {}
        for name, p in self.model.params.items():
            if self.quantized and name in self.weight_qparams:
                params[name] = QuantTensor.from_float(p.data, self.weight_qparams[name], self.masks().get(name))
            else:
                params[name] = p.data.copy()
        masks = {k: m.copy() for k, m in self.mask.masks.items()} if self.mask else {}
        meta = dict(self.meta)
        if self.mask:
            meta["rho"], meta["gamma"] = self.mask.rho, self.mask.gamma
        acts = dict(self.act_qparams) if self.quantized else {}
        return Checkpoint(self.model.topology(), params, masks, acts, copy.deepcopy(self.history), meta,
                          (float(accuracy), self.nonzero()))

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "ModelState":
        model = Model.from_topology(ckpt.topology)
        model.load_arrays(ckpt.dense_arrays())
        quantized = ckpt.quantized
        meta = dict(ckpt.meta)
        return cls(model, ckpt.prune_mask(), quantized, ckpt.weight_qparams(),
                   dict(ckpt.act_qparams), list(ckpt.history), meta)


def train_baseline(model: Model, data: LabeledImages, config: TrainConfig, log_every: bool = False) -> list[float]:
    """Plain FP32 training with cosine-decayed SGD; returns per-epoch mean loss."""
    opt = SGD(model.parameters(), config)
    losses = []
    bs = min(config.batch_size, len(data))
    data_seed = substream(config.seed, "data/baseline")
    for epoch in range(config.total_epochs):
        ls = [masked_train_step(model, None, x, y, opt, epoch) for x, y, _ in batches(data, bs, data_seed, epoch)]
        losses.append(float(np.mean(ls)))
        if log_every:
            log.info("baseline epoch %d loss %.4f", epoch, losses[-1])
    return losses


def check_invariants(state: ModelState, rho: float | None = None):
    if state.mask is not None:
        for name, m in state.mask.masks.items():
            if np.any(state.model.params[name].data[~m]):
                raise InvariantViolation(f"pruned coordinates of {name} are nonzero")
        if not in_sparse_set(state.model.maskable(), state.mask.rho if rho is None else rho):
            raise InvariantViolation("model left the sparse feasible set")
    if state.quantized and not state.on_grid():
        raise InvariantViolation("weights left the INT8 grid")


def _calibrate_observers(state: ModelState, hooks: QuantHooks, train: LabeledImages, bs: int, seed: int,
                         n_batches: int = 4):
    for i, (x, _, _) in enumerate(batches(train, bs, seed, 0)):
        if i >= n_batches:
            break
        state.model.predict_logits(x, hooks)


def run_stage(state: ModelState, stage: Stage, train: LabeledImages, plan: StagePlan,
              teacher: Model | None = None) -> tuple[ModelState, list[dict]]:
    """Run one stage on a copy of ``state``; returns the new state and per-epoch metrics."""
    if stage.kind == "kd" and teacher is None:
        raise StageError("KD stage needs a teacher checkpoint")
    if stage.kind == "qat" and state.quantized:
        raise StageError("QAT requested on a model that is already converted to INT8")
    if stage.kind == "kd" and teacher.num_classes != state.model.num_classes:
        raise StageError("teacher and student class counts differ")
    state = state.copy()
    model = state.model
    bs = min(plan.batch_size, len(train))
    cfg = TrainConfig(total_epochs=max(stage.epochs, 1), base_lr=stage.lr, momentum=plan.momentum,
                      batch_size=bs, seed=plan.seed)
    data_seed = substream(plan.seed, f"data/{stage.kind}")

    if stage.kind == "prune":
        state.mask = global_magnitude_mask(model.maskable(), stage.rho)
        apply_mask(model.params, state.mask)
        hooks = state.hooks()
    elif stage.kind == "qat":
        hooks = QuantHooks(model, masks=state.masks())
        _calibrate_observers(state, hooks, train, bs, substream(plan.seed, "quant/calib"))
    else:
        hooks = state.hooks()

    opt = SGD(model.parameters(), cfg)
    epochs = []
    for epoch in range(stage.epochs):
        losses = []
        for x, y, _ in batches(train, bs, data_seed, epoch):
            if stage.kind == "kd":
                losses.append(kd_train_step(model, teacher, state.mask, x, y, opt, epoch, stage.kd, hooks))
            else:
                losses.append(masked_train_step(model, state.mask, x, y, opt, epoch, hooks))
        epochs.append({"stage": stage.kind, "epoch": epoch, "loss": float(np.mean(losses))})

    if stage.kind == "qat":
        hooks.freeze()
        state.act_qparams = hooks.activation_qparams()
        state.quantized = True
    if state.quantized:
        state.snap_to_grid()
    state.history.append(stage.describe())
    check_invariants(state)
    return state, epochs


@dataclass
class BenchConfig:
    warmups: int = 10
    repeats: int = 100
    batch: int = 32
    threads: int | None = None


@dataclass
class PipelineResult:
    state: ModelState
    checkpoint: Checkpoint
    record: metrics.TradeoffRecord
    epochs: list


def evaluate_state(state: ModelState, test: LabeledImages, bench: BenchConfig, method: str,
                   baseline: tuple[int, float] | None = None,
                   latency_budget_ms: float | None = None) -> tuple[Checkpoint, metrics.TradeoffRecord]:
    """Accuracy, serialized size and measured latency of a state's deployable form."""
    predictor = state.predictor()
    acc = metrics.evaluate_accuracy(predictor, test)
    ckpt = state.to_checkpoint(acc)
    size = len(ckpt.to_bytes())
    x = test.images[:bench.batch].astype(np.float32) / np.float32(255.0)
    lat = metrics.measure_latency(predictor, x, bench.warmups, bench.repeats, bench.threads)
    base_size, base_lat = baseline if baseline is not None else (size, lat.mean)
    n = state.model.num_weights()
    bits = 8 if state.quantized else 32
    rec = metrics.make_record(method, acc, state.nonzero(), size, lat, base_size, base_lat,
                              bits, bits, 1.0 - state.nonzero() / n, latency_budget_ms)
    return ckpt, rec


def run_pipeline(plan: StagePlan, baseline: ModelState | Checkpoint, train: LabeledImages,
                 test: LabeledImages, bench: BenchConfig | None = None,
                 baseline_ref: tuple[int, float] | None = None) -> PipelineResult:
    """Execute ``plan`` in order starting from the dense baseline, which is also the KD teacher."""
    bench = bench or BenchConfig()
    state = ModelState.from_checkpoint(baseline) if isinstance(baseline, Checkpoint) else baseline.copy()
    teacher = state.model.clone()
    if not plan.stages:
        # Nothing to run: report the starting point untouched.
        ckpt, rec = evaluate_state(state, test, bench, "baseline", baseline_ref, plan.latency_budget_ms)
        rec.extra["epochs"] = 0
        return PipelineResult(state, ckpt, rec, [])
    if baseline_ref is None and state.history == [] and not state.quantized:
        _, base_rec = evaluate_state(state, test, bench, "baseline")
        baseline_ref = (base_rec.size_bytes, base_rec.latency.mean)
    epochs = []
    for stage in plan.stages:
        state, ep = run_stage(state, stage, train, plan, teacher)
        epochs.extend(ep)
    state.meta = {**state.meta, "seed": plan.seed, "order": plan.order_name()}
    ckpt, rec = evaluate_state(state, test, bench, plan.order_name(), baseline_ref, plan.latency_budget_ms)
    rec.extra["epochs"] = plan.epochs()
    return PipelineResult(state, ckpt, rec, epochs)


@dataclass
class OrderSummary:
    order: str
    accuracies: list
    sizes: list
    latencies: list

    @property
    def acc_mean(self) -> float:
        return statistics.fmean(self.accuracies)

    @property
    def acc_std(self) -> float:
        return statistics.stdev(self.accuracies) if len(self.accuracies) > 1 else 0.0

    @property
    def sizes_identical(self) -> bool:
        return len(set(self.sizes)) == 1

    @property
    def latency_spread(self) -> float:
        return max(self.latencies) - min(self.latencies)


@dataclass
class AblationResult:
    summaries: list
    results: dict  # (order name, seed) -> PipelineResult

    def sizes_identical_across_orders(self) -> bool:
        by_seed = {}
        for (order, seed), res in self.results.items():
            by_seed.setdefault(seed, set()).add(res.record.size_bytes)
        return all(len(s) == 1 for s in by_seed.values())

    def ranking(self) -> list[str]:
        return [s.order for s in sorted(self.summaries, key=lambda s: -s.acc_mean)]


def _ablation_job(args):
    plan, base_bytes, train, test, bench, ref = args
    return run_pipeline(plan, deserialize(base_bytes), train, test, bench, ref)


def ablate_orderings(orders, stages: list[Stage], seeds, baseline, train: LabeledImages,
                     test: LabeledImages, bench: BenchConfig | None = None, workers: int = 1,
                     plan_kwargs: dict | None = None) -> AblationResult:
    """Run every stage permutation in ``orders`` for every seed with shared stage configs.

    ``baseline`` is one state/checkpoint for all seeds or a mapping seed -> baseline.
    """
    bench = bench or BenchConfig()
    seeds = list(seeds)
    if not seeds:
        raise ValueError("need at least one seed")
    by_kind = {s.kind: s for s in stages}
    orders = [tuple(o) for o in orders]
    for o in orders:
        if len(set(o)) != len(o):
            raise StageError(f"order {o} repeats a stage kind")
        if set(o) - set(by_kind):
            raise StageError(f"order {o} uses stages without a config")
    jobs = []
    for seed in seeds:
        base = baseline[seed] if isinstance(baseline, dict) else baseline
        base_ckpt = base if isinstance(base, Checkpoint) else base.to_checkpoint()
        base_state = ModelState.from_checkpoint(base_ckpt)
        _, base_rec = evaluate_state(base_state, test, bench, "baseline")
        ref = (base_rec.size_bytes, base_rec.latency.mean)
        for o in orders:
            plan = StagePlan([by_kind[k] for k in o], seed=seed, **(plan_kwargs or {}))
            jobs.append((plan, base_ckpt.to_bytes(), train, test, bench, ref))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            outs = list(pool.map(_ablation_job, jobs))
    else:
        outs = [_ablation_job(j) for j in jobs]
    results = {(job[0].order_name(), job[0].seed): res for job, res in zip(jobs, outs)}
    summaries = []
    for o in orders:
        name = StagePlan([by_kind[k] for k in o]).order_name()
        rs = [results[(name, s)] for s in seeds]
        summaries.append(OrderSummary(name, [r.record.accuracy for r in rs],
                                      [r.record.size_bytes for r in rs],
                                      [r.record.latency.mean for r in rs]))
    return AblationResult(summaries, results)


def post_training_quantize(state: ModelState, calib: LabeledImages, batch_size: int = 64, seed: int = 0,
                           n_batches: int = 4) -> ModelState:
    """PTQ: min/max calibration and conversion without any training."""
    state = state.copy()
    xs = [x for i, (x, _, _) in zip(range(n_batches), batches(calib, min(batch_size, len(calib)), seed, 0))]
    qps = calibrate_minmax(state.model, xs)
    state.act_qparams = {site: qps[site] for site, _ in state.model.sites}
    state.quantized = True
    state.snap_to_grid()
    state.history.append({"kind": "ptq", "epochs": 0})
    return state
