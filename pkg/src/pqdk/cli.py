"""``pqdk`` command line: train-baseline, pipeline, ablate, bench, report, rerun.

Exit codes: 0 success, 2 config/parse error, 3 I/O error, 4 invariant violation.
"""
from __future__ import annotations

import argparse
import csv
import glob
import json
import logging
import os
import sys

import numpy as np

from . import __version__, metrics
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint
from .data import load_dataset
from .nn import ARCHS, Model
from .optim import TrainConfig
from .pipeline import (ALL_ORDERS, DEFAULT_ORDERS, BenchConfig, InvariantViolation, ModelState, StageError,
                       StagePlan, ablate_orderings, evaluate_state, parse_order, run_pipeline, substream,
                       train_baseline)

log = logging.getLogger("pqdk")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_INVARIANT = 0, 2, 3, 4
DEFAULT_ORDER = "prune:0.5:20,qat:40,kd:40"


class ConfigError(Exception):
    pass


def write_manifest(out_dir: str, command: str, argv: list[str], config: dict, seed: int,
                   dataset_checksum: str, threads: int):
    lines = {
        "command": command,
        "argv": json.dumps(argv),
        "version": __version__,
        "seed": seed,
        "dataset_checksum": dataset_checksum,
        "threads": threads,
    }
    lines.update({f"config.{k}": v for k, v in sorted(config.items())})
    with open(os.path.join(out_dir, "manifest.txt"), "w") as fh:
        for k, v in lines.items():
            fh.write(f"{k} = {v}\n")


def read_manifest(path: str) -> dict:
    out = {}
    with open(path) as fh:
        for line in fh:
            if " = " in line:
                k, v = line.rstrip("\n").split(" = ", 1)
                out[k] = v
    return out


def _data_for(ckpt: Checkpoint, override: str | None):
    desc = override or ckpt.meta.get("data")
    if not desc:
        raise ConfigError("checkpoint records no dataset; pass --data")
    return desc, *load_dataset(desc)


def _write_epochs(path: str, rows: list[dict]):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["stage", "epoch", "loss"])
        w.writeheader()
        w.writerows(rows)


def _bench(args) -> BenchConfig:
    return BenchConfig(args.warmups, args.repeats, args.bench_batch, metrics.get_threads())


def _write_run(run_dir: str, res, argv, config, seed, checksum):
    os.makedirs(run_dir, exist_ok=True)
    res.checkpoint.save(os.path.join(run_dir, "ckpt.pqdk"))
    metrics.emit_report([res.record], "csv", os.path.join(run_dir, "metrics.csv"))
    metrics.emit_report([res.record], "json", os.path.join(run_dir, "record.json"))
    _write_epochs(os.path.join(run_dir, "epochs.csv"), res.epochs)
    write_manifest(run_dir, "pipeline", argv, config, seed, checksum, metrics.get_threads())


def cmd_train_baseline(args, argv) -> int:
    if args.arch not in ARCHS:
        raise ConfigError(f"unknown arch {args.arch!r}")
    train, test = load_dataset(args.data)
    cfg = TrainConfig(total_epochs=max(args.epochs, 1), base_lr=args.lr, momentum=args.momentum,
                      batch_size=args.batch_size, seed=args.seed)
    model = Model.create(args.arch, train.image_shape, train.num_classes,
                         np.random.default_rng(substream(args.seed, "init")))
    losses = train_baseline(model, train, cfg) if args.epochs > 0 else []
    state = ModelState(model, meta={"data": args.data, "seed": args.seed, "arch": args.arch})
    acc = metrics.evaluate_accuracy(model, test)
    os.makedirs(args.out, exist_ok=True)
    n = state.to_checkpoint(acc).save(os.path.join(args.out, "ckpt.pqdk"))
    _write_epochs(os.path.join(args.out, "epochs.csv"),
                  [{"stage": "baseline", "epoch": i, "loss": v} for i, v in enumerate(losses)])
    write_manifest(args.out, "train-baseline", argv,
                   {"arch": args.arch, "epochs": args.epochs, "lr": args.lr, "momentum": args.momentum,
                    "batch_size": args.batch_size, "data": args.data},
                   args.seed, train.checksum(), metrics.get_threads())
    print(f"baseline acc {acc:.2f}% size {n} bytes -> {args.out}")
    return EXIT_OK


def cmd_pipeline(args, argv) -> int:
    stages = parse_order(args.order)
    base = load_checkpoint(args.baseline)
    desc, train, test = _data_for(base, args.data)
    plan = StagePlan(stages, seed=args.seed, latency_budget_ms=args.latency_budget, batch_size=args.batch_size)
    res = run_pipeline(plan, base, train, test, _bench(args))
    run_dir = os.path.join(args.out, plan.order_name(), str(args.seed))
    _write_run(run_dir, res, argv, {"order": args.order, "baseline": args.baseline, "data": desc,
                                    "batch_size": args.batch_size}, args.seed, train.checksum())
    r = res.record
    print(f"{r.method}: acc {r.accuracy:.2f}% nonzeros {r.nonzero_params} size {r.size_bytes} B "
          f"compr {r.compression_x:.2f}x lat {r.latency.mean:.3f} ms speedup {r.speedup_x:.2f}x -> {run_dir}")
    return EXIT_OK


def cmd_ablate(args, argv) -> int:
    stages = parse_order(args.budgets)
    orders = DEFAULT_ORDERS if args.orders == "default4" else ALL_ORDERS
    base = load_checkpoint(args.baseline)
    desc, train, test = _data_for(base, args.data)
    seeds = list(range(args.seed, args.seed + args.seeds))
    res = ablate_orderings(orders, stages, seeds, base, train, test, _bench(args), workers=args.workers,
                           plan_kwargs={"batch_size": args.batch_size})
    for (order, seed), r in res.results.items():
        _write_run(os.path.join(args.out, order, str(seed)), r, argv,
                   {"order": order, "budgets": args.budgets, "baseline": args.baseline, "data": desc,
                    "batch_size": args.batch_size}, seed, train.checksum())
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "ablation.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["order", "acc_mean", "acc_std", "size_bytes", "sizes_identical", "lat_ms_mean",
                    "lat_ms_spread"])
        for s in res.summaries:
            w.writerow([s.order, f"{s.acc_mean:.2f}", f"{s.acc_std:.2f}", s.sizes[0], s.sizes_identical,
                        f"{float(np.mean(s.latencies)):.3f}", f"{s.latency_spread:.3f}"])
    write_manifest(args.out, "ablate", argv, {"orders": args.orders, "budgets": args.budgets, "seeds": args.seeds},
                   args.seed, train.checksum(), metrics.get_threads())
    for s in res.summaries:
        print(f"{s.order:>20}: acc {s.acc_mean:.2f} +- {s.acc_std:.2f}  size {s.sizes[0]} B")
    print("ranking:", " > ".join(res.ranking()))
    print("sizes identical across orders:", res.sizes_identical_across_orders())
    return EXIT_OK


def cmd_bench(args, argv) -> int:
    ckpt = load_checkpoint(args.ckpt)
    state = ModelState.from_checkpoint(ckpt)
    desc, _, test = _data_for(ckpt, args.data)
    bench = BenchConfig(args.warmups, args.repeats, args.batch, metrics.get_threads())
    ref = None
    if args.baseline_ckpt:
        _, base_rec = evaluate_state(ModelState.from_checkpoint(load_checkpoint(args.baseline_ckpt)), test, bench,
                                     "baseline")
        ref = (base_rec.size_bytes, base_rec.latency.mean)
    method = args.method or os.path.splitext(os.path.basename(args.ckpt))[0]
    _, rec = evaluate_state(state, test, bench, method, ref)
    os.makedirs(args.out, exist_ok=True)
    metrics.emit_report([rec], "csv", os.path.join(args.out, "metrics.csv"))
    metrics.emit_report([rec], "json", os.path.join(args.out, "record.json"))
    with open(os.path.join(args.out, "latency.json"), "w") as fh:
        json.dump({**rec.latency.summary(), "samples_ms": rec.latency.samples_ms}, fh, indent=2)
    write_manifest(args.out, "bench", argv, {"ckpt": args.ckpt, "batch": args.batch, "warmups": args.warmups,
                                             "repeats": args.repeats, "data": desc},
                   0, test.checksum(), metrics.get_threads())
    lat = rec.latency
    print(f"{method}: {lat.mean:.3f} +- {lat.std:.3f} ms (cv {lat.cv:.3f}, {lat.repeat_count} repeats, "
          f"{lat.thread_count} threads) speedup {rec.speedup_x:.2f}x")
    return EXIT_OK


def cmd_report(args, argv) -> int:
    groups = [metrics.read_json_report(p)
              for p in sorted(glob.glob(os.path.join(args.runs, "**", "record.json"), recursive=True))]
    records = metrics.merge_records(groups)
    if args.pareto:
        records = metrics.pareto_frontier(records)
    out = args.out or os.path.join(args.runs, f"report.{args.format}")
    metrics.emit_report(records, args.format, out)
    with open(out) as fh:
        sys.stdout.write(fh.read())
    return EXIT_OK


def cmd_rerun(args, argv) -> int:
    m = read_manifest(args.manifest)
    return main(json.loads(m["argv"]))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pqdk", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None, help="BLAS threads (fallback: $PQD_THREADS, else 1)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def bench_flags(sp):
        sp.add_argument("--warmups", type=int, default=10)
        sp.add_argument("--repeats", type=int, default=100)
        sp.add_argument("--bench-batch", type=int, default=32)

    sp = sub.add_parser("train-baseline", help="train the dense FP32 teacher")
    sp.add_argument("--data", default="synthetic")
    sp.add_argument("--arch", default="smallconv", choices=sorted(ARCHS))
    sp.add_argument("--epochs", type=int, default=30)
    sp.add_argument("--lr", type=float, default=0.02)
    sp.add_argument("--momentum", type=float, default=0.9)
    sp.add_argument("--batch-size", type=int, default=32)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train_baseline)

    sp = sub.add_parser("pipeline", help="run one ordered stage plan")
    sp.add_argument("--baseline", required=True)
    sp.add_argument("--order", default=DEFAULT_ORDER)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--data", default=None)
    sp.add_argument("--batch-size", type=int, default=32)
    sp.add_argument("--latency-budget", type=float, default=None, help="latency budget tau in ms")
    sp.add_argument("--out", required=True)
    bench_flags(sp)
    sp.set_defaults(func=cmd_pipeline)

    sp = sub.add_parser("ablate", help="stage-order ablation")
    sp.add_argument("--baseline", required=True)
    sp.add_argument("--orders", default="default4", choices=["default4", "all6"])
    sp.add_argument("--budgets", default=DEFAULT_ORDER, help="stage configs in order-string form")
    sp.add_argument("--seeds", type=int, default=5)
    sp.add_argument("--seed", type=int, default=0, help="first seed")
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--data", default=None)
    sp.add_argument("--batch-size", type=int, default=32)
    sp.add_argument("--out", required=True)
    bench_flags(sp)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("bench", help="measure latency of a checkpoint")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--baseline-ckpt", default=None)
    sp.add_argument("--batch", type=int, default=32)
    sp.add_argument("--warmups", type=int, default=10)
    sp.add_argument("--repeats", type=int, default=100)
    sp.add_argument("--method", default=None)
    sp.add_argument("--data", default=None)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("report", help="aggregate run records")
    sp.add_argument("--runs", required=True)
    sp.add_argument("--format", default="csv", choices=["csv", "json"])
    sp.add_argument("--pareto", action="store_true")
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("rerun", help="replay the command recorded in a manifest")
    sp.add_argument("manifest")
    sp.set_defaults(func=cmd_rerun)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        threads = args.threads if args.threads is not None else int(os.environ.get("PQD_THREADS", "1"))
        metrics.set_threads(threads)
        return args.func(args, argv)
    except InvariantViolation as exc:
        print(f"pqdk: invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (OSError, CheckpointError) as exc:
        print(f"pqdk: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, StageError, metrics.MixedThreadCountError, ValueError, KeyError) as exc:
        print(f"pqdk: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
