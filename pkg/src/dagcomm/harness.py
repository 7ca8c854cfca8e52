"""Command-line runner: train one scenario, write metrics and (optionally) a trace.

Examples::

    dagcomm run --mode depcha --workers 4 --epochs 5 --seed 1 --metrics m.json
    dagcomm run --mode naive --workers 2 --engine-threads 4 --seed 3
    dagcomm compare depcha.json funnel.json
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass
from typing import Optional

from . import trace as tr
from .kvstore import MODES
from .model import TOPOLOGIES
from .trace import TraceSink
from .trainer import Hyperparams, TrainConfig, run_training

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RunConfig:
    mode: str = "depcha"
    workers: int = 2
    engine_threads: int = 4
    outstanding: int = 2
    epochs: int = 5
    global_batch_size: int = 128
    model: str = "diamond"
    hidden: int = 16
    seed: int = 0
    learning_rate: float = 0.5
    watchdog_ms: int = 5000
    inject_latency_us: int = 0
    n_samples: int = 1280
    trace_path: Optional[str] = None
    metrics_path: Optional[str] = None

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.model not in TOPOLOGIES:
            raise ValueError(f"model must be one of {TOPOLOGIES}")
        if self.workers < 1 or self.engine_threads < 1 or self.outstanding < 1 or self.epochs < 1:
            raise ValueError("workers, engine_threads, outstanding and epochs must be >= 1")
        if self.global_batch_size % self.workers:
            raise ValueError(f"batch size {self.global_batch_size} not divisible by {self.workers} workers")
        if self.watchdog_ms <= 0 or self.inject_latency_us < 0:
            raise ValueError("watchdog must be positive and latency non-negative")
        if self.mode in ("depcha", "concom") and self.engine_threads < 2:
            log.warning("%s with a single engine thread cannot overlap communication", self.mode)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            mode=self.mode, workers=self.workers, engine_threads=self.engine_threads,
            outstanding=self.outstanding, topology=self.model, n_samples=self.n_samples,
            hidden=self.hidden,
            hp=Hyperparams(self.learning_rate, self.global_batch_size, self.epochs, self.seed),
            watchdog=self.watchdog_ms / 1000.0, latency=self.inject_latency_us / 1e6,
        )


def run(config: RunConfig) -> dict:
    """Execute one scenario and return its metrics document."""
    config.validate()
    sink = TraceSink()
    result = run_training(config.train_config(), trace=sink)
    events = sink.events()
    if config.trace_path:
        sink.write_jsonl(config.trace_path)

    metrics: dict = {
        "config": asdict(config),
        "epoch_times": [],
        "train_loss": None,
        "test_accuracy": None,
        "rank_accuracies": [],
        "max_concurrent_collectives": tr.max_concurrent_collectives(events),
        "compute_comm_overlap": tr.compute_comm_overlaps(events),
        "error": None,
    }
    if result.error is not None:
        metrics["error"] = {"type": type(result.error).__name__, "message": str(result.error)}
    else:
        workers = result.workers
        metrics["epoch_times"] = [
            sum(w.epochs[e].epoch_time for w in workers) / len(workers)
            for e in range(config.epochs)
        ]
        metrics["train_loss"] = workers[0].epochs[-1].train_loss
        metrics["rank_accuracies"] = [w.accuracy for w in workers]
        metrics["test_accuracy"] = workers[0].accuracy
    if config.metrics_path:
        with open(config.metrics_path, "w") as fh:
            json.dump(metrics, fh, indent=2)
    return metrics


_REQUIRED = ("epoch_times", "max_concurrent_collectives", "compute_comm_overlap")


def compare(metrics_a: dict, metrics_b: dict) -> dict:
    """Ratios of ``a`` to ``b`` for epoch times plus both runs' concurrency gauges."""
    for m in (metrics_a, metrics_b):
        missing = [k for k in _REQUIRED if k not in m]
        if missing:
            raise ValueError(f"metrics missing fields {missing}")
    ta, tb = metrics_a["epoch_times"], metrics_b["epoch_times"]
    if len(ta) != len(tb) or not ta:
        raise ValueError(f"epoch counts differ or are empty: {len(ta)} vs {len(tb)}")
    mean_a, mean_b = sum(ta) / len(ta), sum(tb) / len(tb)
    return {
        "epoch_time_ratio": mean_a / mean_b,
        "per_epoch_ratio": [a / b for a, b in zip(ta, tb)],
        "mean_epoch_time": [mean_a, mean_b],
        "max_concurrent_collectives": [metrics_a["max_concurrent_collectives"],
                                       metrics_b["max_concurrent_collectives"]],
        "compute_comm_overlap": [metrics_a["compute_comm_overlap"], metrics_b["compute_comm_overlap"]],
    }


def format_report(report: dict, names: tuple[str, str] = ("a", "b")) -> str:
    a, b = names
    lines = [
        f"{'':28s}{a:>14s}{b:>14s}",
        f"{'mean epoch time (s)':28s}{report['mean_epoch_time'][0]:14.4f}{report['mean_epoch_time'][1]:14.4f}",
        f"{'max concurrent collectives':28s}{report['max_concurrent_collectives'][0]:14d}"
        f"{report['max_concurrent_collectives'][1]:14d}",
        f"{'compute/comm overlaps':28s}{report['compute_comm_overlap'][0]:14d}{report['compute_comm_overlap'][1]:14d}",
        f"epoch time ratio {a}/{b}: {report['epoch_time_ratio']:.4f}",
    ]
    return "\n".join(lines)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dagcomm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train one scenario")
    p.add_argument("--mode", choices=MODES, default="depcha")
    p.add_argument("--workers", type=int, default=2)
    p.add_argument("--engine-threads", type=int, default=4)
    p.add_argument("--outstanding", type=int, default=2)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--batch-size", type=int, default=128, help="global mini-batch size")
    p.add_argument("--model", choices=TOPOLOGIES, default="diamond")
    p.add_argument("--hidden", type=int, default=16,
                   help="hidden width; wider models make compute/communication overlap visible")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=0.5,
                   help="learning rate; not rescaled with --workers")
    p.add_argument("--watchdog-ms", type=int, default=5000)
    p.add_argument("--inject-latency-us", type=int, default=0, help="synthetic per-collective latency")
    p.add_argument("--samples", type=int, default=1280)
    p.add_argument("--trace", metavar="PATH", help="write line-delimited JSON trace")
    p.add_argument("--metrics", metavar="PATH", help="write metrics JSON (default: stdout)")
    p.add_argument("-v", "--verbose", action="store_true")

    c = sub.add_parser("compare", help="compare two metrics files")
    c.add_argument("metrics_a")
    c.add_argument("metrics_b")
    c.add_argument("--json", action="store_true", help="print the report as JSON")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "compare":
        with open(args.metrics_a) as fa, open(args.metrics_b) as fb:
            report = compare(json.load(fa), json.load(fb))
        print(json.dumps(report, indent=2) if args.json else format_report(report, ("A", "B")))
        return 0

    config = RunConfig(
        mode=args.mode, workers=args.workers, engine_threads=args.engine_threads,
        outstanding=args.outstanding, epochs=args.epochs, global_batch_size=args.batch_size,
        model=args.model, hidden=args.hidden, seed=args.seed, learning_rate=args.lr, watchdog_ms=args.watchdog_ms,
        inject_latency_us=args.inject_latency_us, n_samples=args.samples,
        trace_path=args.trace, metrics_path=args.metrics,
    )
    try:
        metrics = run(config)
    except ValueError as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return 2
    if not args.metrics:
        print(json.dumps(metrics, indent=2))
    if metrics["error"] is not None:
        print(f"{metrics['error']['type']}: {metrics['error']['message']}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
