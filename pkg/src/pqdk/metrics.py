"""Latency harness, size/accuracy accounting, ROC/PR, Pareto frontier and reports."""
from __future__ import annotations

import csv
import gc
import json
import os
import statistics
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

MB = 2**20
REPORT_COLUMNS = ["method", "acc_pct", "nonzeros", "size_mb", "compr_x",
                  "lat_ms_mean", "lat_ms_std", "speedup_x", "rel_bops_pct"]

_process_threads: int | None = None


def set_threads(n: int):
    """Pin the BLAS/OpenMP pool size for the whole process."""
    global _process_threads
    if n < 1:
        raise ValueError(f"thread count must be positive, got {n}")
    threadpool_limits(limits=n)
    _process_threads = n


def get_threads() -> int:
    if _process_threads is not None:
        return _process_threads
    return int(os.environ.get("PQD_THREADS", "1"))


@dataclass
class LatencyReport:
    samples_ms: list
    warmup_count: int
    repeat_count: int
    thread_count: int
    batch: str = ""

    @property
    def mean(self) -> float:
        return statistics.fmean(self.samples_ms)

    @property
    def std(self) -> float:
        return statistics.stdev(self.samples_ms)

    @property
    def cv(self) -> float:
        return self.std / self.mean

    def summary(self) -> dict:
        return {"mean_ms": self.mean, "std_ms": self.std, "cv": self.cv, "warmups": self.warmup_count,
                "repeats": self.repeat_count, "threads": self.thread_count, "batch": self.batch}


def measure_latency(model, batch, warmups: int = 10, repeats: int = 100, threads: int | None = None) -> LatencyReport:
    """Untimed warm-ups, then ``repeats`` timed calls of ``model(batch)`` on the same batch."""
    if repeats < 2:
        raise ValueError(f"repeats must be at least 2 to estimate variance, got {repeats}")
    threads = threads if threads is not None else get_threads()
    fn = model.predict_logits if hasattr(model, "predict_logits") else model
    samples = []
    clock = time.perf_counter_ns
    # As in timeit, keep the garbage collector out of the timed region.
    gc_was_enabled = gc.isenabled()
    gc.disable()
    try:
        with threadpool_limits(limits=threads):
            for _ in range(warmups):
                fn(batch)
            for _ in range(repeats):
                t0 = clock()
                fn(batch)
                t1 = clock()
                samples.append((t1 - t0) / 1e6)
    finally:
        if gc_was_enabled:
            gc.enable()
    desc = "x".join(str(d) for d in np.shape(batch)) if hasattr(batch, "shape") else type(batch).__name__
    return LatencyReport(samples, warmups, repeats, threads, desc)


def rel_bops(w_bits: int, a_bits: int, sparsity: float, baseline_bits: int = 32) -> float:
    """Bit-operations relative to a dense ``baseline_bits`` x ``baseline_bits`` model, in percent."""
    return 100.0 * (w_bits * a_bits) / (baseline_bits * baseline_bits) * (1.0 - sparsity)


def count_nonzero(ckpt) -> int:
    return ckpt.nonzero()


def _logits_fn(model):
    return model.predict_logits if hasattr(model, "predict_logits") else model


def predict_all(model, data, batch_size: int = 256) -> np.ndarray:
    fn = _logits_fn(model)
    out = []
    for start in range(0, len(data), batch_size):
        x = data.images[start:start + batch_size].astype(np.float32) / np.float32(255.0)
        out.append(np.asarray(fn(x)))
    return np.concatenate(out)


def evaluate_accuracy(model, data, batch_size: int = 256) -> float:
    """Top-1 accuracy in percent over the whole split, in stored order."""
    if data is None or len(data) == 0:
        raise ValueError("cannot evaluate accuracy on an empty dataset")
    pred = predict_all(model, data, batch_size).argmax(axis=1)
    return 100.0 * float(np.mean(pred == data.labels))


def confusion_matrix(pred: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (labels, pred), 1)
    return cm


@dataclass
class Curves:
    fpr: np.ndarray
    tpr: np.ndarray
    roc_auc: float
    recall: np.ndarray
    precision: np.ndarray
    pr_auc: float


@dataclass
class CurveSet:
    per_class: list  # Curves or None where the class has no positives or no negatives
    micro: Curves | None


def binary_curves(scores: np.ndarray, positive: np.ndarray) -> Curves | None:
    """Threshold sweep over unique scores (predict positive when score >= t).

    ROC starts at (0, 0); PR starts at (recall 0, precision 1).  Both areas
    are trapezoidal.
    """
    scores = np.asarray(scores, np.float64)
    positive = np.asarray(positive, bool)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], positive[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(y)[last]
    fp = np.cumsum(~y)[last]
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    recall = np.r_[0.0, tp / n_pos]
    precision = np.r_[1.0, tp / (tp + fp)]
    return Curves(fpr, tpr, float(np.trapezoid(tpr, fpr)), recall, precision,
                  float(np.trapezoid(precision, recall)))


def roc_pr_curves(scores: np.ndarray, labels: np.ndarray) -> CurveSet:
    """One-vs-rest ROC and PR curves per class plus a micro-averaged pair."""
    scores = np.asarray(scores, np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 2 or len(scores) != len(labels):
        raise ValueError(f"scores {scores.shape} do not match labels {labels.shape}")
    if not np.allclose(scores.sum(axis=1), 1.0, atol=1e-5, rtol=0):
        raise ValueError("score rows must be probabilities summing to 1")
    k = scores.shape[1]
    onehot = labels[:, None] == np.arange(k)[None, :]
    per_class = [binary_curves(scores[:, c], onehot[:, c]) for c in range(k)]
    return CurveSet(per_class, binary_curves(scores.ravel(), onehot.ravel()))


def write_curve_file(path, columns: dict):
    """Whitespace-separated columns with a ``#`` header, readable by gnuplot."""
    names = list(columns)
    rows = zip(*(np.asarray(columns[n]) for n in names))
    with open(path, "w") as fh:
        fh.write("# " + " ".join(names) + "\n")
        for row in rows:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


@dataclass
class TradeoffRecord:
    method: str
    accuracy: float
    nonzero_params: int
    size_bytes: int
    latency: LatencyReport
    compression_x: float = 1.0
    speedup_x: float = 1.0
    rel_bops: float = 100.0
    budget_violation: bool = False
    extra: dict = field(default_factory=dict)

    @property
    def size_mb(self) -> float:
        return self.size_bytes / MB

    @property
    def threads(self) -> int:
        return self.latency.thread_count

    def row(self) -> dict:
        return {"method": self.method, "acc_pct": self.accuracy, "nonzeros": self.nonzero_params,
                "size_mb": self.size_mb, "compr_x": self.compression_x,
                "lat_ms_mean": self.latency.mean, "lat_ms_std": self.latency.std,
                "speedup_x": self.speedup_x, "rel_bops_pct": self.rel_bops}

    def to_dict(self) -> dict:
        d = self.row()
        d.update({"size_bytes": self.size_bytes, "budget_violation": self.budget_violation,
                  "latency": asdict(self.latency), "extra": self.extra})
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TradeoffRecord":
        return cls(d["method"], d["acc_pct"], d["nonzeros"], d["size_bytes"], LatencyReport(**d["latency"]),
                   d["compr_x"], d["speedup_x"], d["rel_bops_pct"], d.get("budget_violation", False),
                   d.get("extra", {}))


def make_record(method: str, accuracy: float, nonzeros: int, size_bytes: int, latency: LatencyReport,
                baseline_size: int, baseline_latency_ms: float, w_bits: int, a_bits: int,
                sparsity: float, latency_budget_ms: float | None = None) -> TradeoffRecord:
    return TradeoffRecord(
        method, accuracy, nonzeros, size_bytes, latency,
        compression_x=baseline_size / size_bytes,
        speedup_x=baseline_latency_ms / latency.mean,
        rel_bops=rel_bops(w_bits, a_bits, sparsity),
        budget_violation=latency_budget_ms is not None and latency.mean > latency_budget_ms)


class MixedThreadCountError(ValueError):
    pass


def merge_records(groups) -> list[TradeoffRecord]:
    records = [r for g in groups for r in g]
    threads = {r.threads for r in records}
    if len(threads) > 1:
        raise MixedThreadCountError(f"records measured under different thread counts {sorted(threads)}")
    return records


def dominates(a: TradeoffRecord, b: TradeoffRecord) -> bool:
    ge = a.accuracy >= b.accuracy and a.size_bytes <= b.size_bytes and a.latency.mean <= b.latency.mean
    gt = a.accuracy > b.accuracy or a.size_bytes < b.size_bytes or a.latency.mean < b.latency.mean
    return ge and gt


def pareto_frontier(records: list) -> list:
    """Records not dominated on (accuracy up, size down, latency down), in input order."""
    keys = np.array([[-r.accuracy, r.size_bytes, r.latency.mean] for r in records], dtype=np.float64)
    if len(keys) == 0:
        return []
    le = (keys[:, None, :] <= keys[None, :, :]).all(axis=2)
    lt = (keys[:, None, :] < keys[None, :, :]).any(axis=2)
    dominated = (le & lt).any(axis=0)
    return [r for r, d in zip(records, dominated) if not d]


def emit_report(records: list, fmt: str, path) -> None:
    """Write records as csv (2-decimal floats) or json (full precision)."""
    if fmt not in ("csv", "json"):
        raise ValueError(f"unknown report format {fmt!r}")
    try:
        with open(path, "w", newline="") as fh:
            if fmt == "json":
                json.dump([r.to_dict() for r in records], fh, indent=2)
                fh.write("\n")
                return
            w = csv.writer(fh)
            w.writerow(REPORT_COLUMNS)
            for r in records:
                row = r.row()
                w.writerow([row["method"], *(_fmt(row[c]) for c in REPORT_COLUMNS[1:])])
    except OSError as exc:
        raise OSError(f"cannot write report {path}: {exc}") from exc


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return f"{v:.2f}"


def read_json_report(path) -> list[TradeoffRecord]:
    with open(path) as fh:
        return [TradeoffRecord.from_dict(d) for d in json.load(fh)]
