"""Command-line front end.

Commands: ``gen-data``, ``train``, ``eval``, ``simulate-bound``,
``bench-engine`` and ``report``. Every command takes ``--seed`` where
randomness is involved; errors print one line to stderr and exit non-zero.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from collections import Counter
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import engine
from .backbone import BackboneConfig, forward_to_depth
from .errors import AdaptiveDepthError, EvaluationError, InputError
from .system import AdaptiveSystem
from .theory import BoundParams, bound_report, simulate_expected_flops
from .trainer import TrainConfig, report_lines, run

CHECKPOINT_DIR = "checkpoint"
TRAIN_REPORT = "train_report.jsonl"
DEPTHS_FILE = "val_depths.jsonl"
RUN_META = "run.json"


def _emit(record: dict, out=None) -> None:
    for key, value in record.items():
        if isinstance(value, float) and not math.isfinite(value):
            raise EvaluationError(f"non-finite metric {key}={value}")
    print(json.dumps(record, sort_keys=True), file=out or sys.stdout)


def _require(path: Path) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"no such file or directory: {path}")
    return path


def cmd_gen_data(args) -> None:
    ds = data_mod.generate(args.n, args.seed, vocab=args.vocab, classes=args.classes, easy=args.easy)
    data_mod.save(ds, args.out)
    _emit({"out": str(args.out), "counts": ds.header["counts"], "probe_accuracy": ds.header["probe_accuracy"]})


def _train_config(args, ds) -> TrainConfig:
    raw = {}
    if args.config:
        raw = json.loads(_require(Path(args.config)).read_text(encoding="utf-8"))
    bb = dict(raw.pop("backbone", {}))
    bb.setdefault("vocab_size", ds.header.get("vocab", 32))
    bb.setdefault("num_classes", ds.header.get("classes", 4))
    bb.setdefault("max_len", ds.header.get("length", 12))
    raw["backbone"] = bb
    cfg = TrainConfig.from_dict(raw)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def cmd_train(args) -> None:
    ds = data_mod.load(_require(Path(args.data)))
    cfg = _train_config(args, ds)
    result = run(ds, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result.system.save(out / CHECKPOINT_DIR, {"train": cfg.to_dict()})
    (out / TRAIN_REPORT).write_text(report_lines(result.report), encoding="utf-8")
    ev = result.system.evaluate(result.val)
    rows = [{"difficulty": str(d), "chosen_depth": int(c), "correct": bool(k), "oracle_depth": int(o)}
            for d, c, k, o in zip(result.val.difficulties, ev.chosen_depth, ev.correct, ev.l_opt)]
    (out / DEPTHS_FILE).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows), encoding="utf-8")
    meta = {"data": str(args.data), "best_epoch": result.best_epoch, "stopped_early": result.stopped_early,
            "num_layers": cfg.backbone.num_layers, **ev.summary()}
    (out / RUN_META).write_text(json.dumps(meta, sort_keys=True) + "\n", encoding="utf-8")
    _emit(meta)


def format_ratio(ratio: float) -> str:
    return f"{ratio:.3f} of full depth"


def cmd_eval(args) -> None:
    system, _ = AdaptiveSystem.load(_require(Path(args.checkpoint)))
    ds = data_mod.load(_require(Path(args.data)))
    ev = system.evaluate(ds, np.random.default_rng(args.seed))
    plans = engine.compile_plans(system.backbone)
    peak = max(plans[d - 1].total_bytes for d in np.unique(ev.chosen_depth))
    rec = dict(ev.summary(), peak_bytes=int(peak))
    print(f"accuracy      {ev.accuracy:.4f}")
    print(f"mean depth    {ev.mean_depth:.3f} of {system.config.num_layers}")
    print(f"mean FLOPs    {ev.mean_flops:.0f}")
    print(f"FLOPs ratio   {format_ratio(ev.flops_ratio)}")
    print(f"peak memory   {peak} bytes")
    _emit(rec)


def cmd_simulate_bound(args) -> None:
    p = BoundParams.from_depths(args.alpha, args.epsilon, args.l_opt, args.num_layers, args.C, args.p_explore)
    res = simulate_expected_flops(p, args.trials, np.random.default_rng(args.seed))
    _emit(bound_report(p, res).to_record())


def cmd_bench_engine(args) -> None:
    system, _ = AdaptiveSystem.load(_require(Path(args.checkpoint)))
    bb = system.backbone
    L = bb.config.num_layers
    rng = np.random.default_rng(args.seed)
    plans = engine.compile_plans(bb)
    worst = 0.0
    n = bb.config.max_len
    for _ in range(args.equivalence_inputs):
        tokens = rng.integers(0, bb.config.vocab_size, size=int(rng.integers(1, n + 1)))
        for plan in plans:
            got = engine.execute(plan, tokens).logits
            ref = np.stack(forward_to_depth(tokens, bb, plan.depth)[0])
            worst = max(worst, float(np.max(np.abs(got - ref))))
    dist = engine.DepthDistribution.uniform(L)
    depths = rng.integers(1, L + 1, size=args.executions)
    tokens = rng.integers(0, bb.config.vocab_size, size=n)
    ratio = engine.switch_overhead_ratio(plans, depths[: min(args.executions, 2000)], tokens)
    capacity = int(1.5 * engine.expected_working_set(plans, dist, args.concurrency))
    pool = engine.rebalance_pool(engine.BufferPool.for_plans(plans, capacity), dist)
    hit = engine.simulate_pool(plans, pool, depths, tokens, args.concurrency)
    _emit({"equivalence_max_abs": worst, "switch_overhead_ratio": ratio, "pool_hit_rate": hit,
           "pool_capacity_bytes": capacity, "executions": int(args.executions)})


def histogram_table(counts: dict[str, Counter], num_layers: int) -> str:
    buckets = [b for b in data_mod.DIFFICULTIES if b in counts]
    width = max(6, max((len(b) for b in buckets), default=0))
    lines = ["depth " + " ".join(f"{b:>{width}}" for b in buckets)]
    for depth in range(1, num_layers + 1):
        lines.append(f"{depth:>5} " + " ".join(f"{counts[b].get(depth, 0):>{width}}" for b in buckets))
    lines.append("total " + " ".join(f"{sum(counts[b].values()):>{width}}" for b in buckets))
    return "\n".join(lines)


def modal_depth(counter: Counter) -> int:
    # ties resolve to the shallower depth
    return min(counter, key=lambda d: (-counter[d], d))


def depth_histograms(rows: list[dict]) -> dict[str, Counter]:
    counts: dict[str, Counter] = {}
    for r in rows:
        counts.setdefault(r["difficulty"], Counter())[int(r["chosen_depth"])] += 1
    return counts


def cmd_report(args) -> None:
    run_dir = Path(args.run_dir)
    meta = json.loads(_require(run_dir / RUN_META).read_text(encoding="utf-8"))
    rows = [json.loads(line) for line in _require(run_dir / DEPTHS_FILE).read_text(encoding="utf-8").splitlines()
            if line.strip()]
    if not rows:
        raise InputError(f"{run_dir / DEPTHS_FILE} has no records")
    counts = depth_histograms(rows)
    L = int(meta["num_layers"])
    print(histogram_table(counts, L))
    print(f"FLOPs ratio {format_ratio(meta['flops_ratio'])}")
    _emit({"histograms": {b: {str(d): c for d, c in sorted(cnt.items())} for b, cnt in counts.items()},
           "modal_depth": {b: modal_depth(cnt) for b, cnt in counts.items()},
           "accuracy": meta["accuracy"], "mean_depth": meta["mean_depth"], "flops_ratio": meta["flops_ratio"]})


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adaptive-depth", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic mixed-difficulty dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=5000)
    p.add_argument("--vocab", type=int, default=32)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--easy", type=float, default=0.6)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="collaborative training; writes checkpoint and reports")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None, help="JSON file of TrainConfig overrides")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy and cost of a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("simulate-bound", help="Monte Carlo check of the expected-FLOPs bounds")
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--p-explore", type=float, default=0.0)
    p.add_argument("--trials", type=int, default=100_000)
    p.add_argument("--l-opt", type=int, default=6)
    p.add_argument("--num-layers", type=int, default=12)
    p.add_argument("--C", type=float, default=1.0, help="per-layer cost")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_simulate_bound)

    p = sub.add_parser("bench-engine", help="plan/eager equivalence, switch overhead, pool hit rate")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--executions", type=int, default=10_000)
    p.add_argument("--equivalence-inputs", type=int, default=100)
    p.add_argument("--concurrency", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench_engine)

    p = sub.add_parser("report", help="per-difficulty depth histograms of a training run")
    p.add_argument("--run-dir", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except AdaptiveDepthError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
