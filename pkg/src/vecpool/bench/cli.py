"""Command line entry point.

    bench --mode sync --task Delay --num-envs 8 --threads 8 --dist const --param lo=1000
    bench sweep --workers 1,2,4,8 --mode async --task Delay --out sweep.csv
    bench compare --task CartPole --num-envs 1

``--config FILE`` reads ``key=value`` lines (BenchConfig fields, anything
else is an env parameter); explicit flags override the file.
"""

from __future__ import annotations

import argparse
import sys
from typing import Any, Optional, Sequence

from .. import _backend
from ..env_core import parse_kv
from ..errors import VecPoolError
from .harness import BenchConfig, bench_run, bench_sweep, emit_results

# flag dest -> BenchConfig field
_FIELDS = {
    "mode": "mode",
    "task": "task_id",
    "num_envs": "num_envs",
    "batch_size": "batch_size",
    "threads": "num_threads",
    "iterations": "iterations",
    "warmup": "warmup_iterations",
    "frameskip": "frameskip",
    "seed": "seed",
    "pin_cores": "pin_cores",
    "backend": "backend",
}


def _worker_list(text: str) -> list[int]:
    try:
        workers = [int(w) for w in text.split(",") if w.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not workers or min(workers) < 1:
        raise argparse.ArgumentTypeError("workers must be a non-empty list of positive integers")
    return workers


def _param(text: str) -> tuple[str, Any]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    return next(iter(parse_kv(text).items()))


def _add_run_args(p: argparse.ArgumentParser) -> None:
    # defaults are None so that a --config file can supply them
    p.add_argument("--config", metavar="FILE", help="key=value file with BenchConfig fields and env params")
    p.add_argument("--mode", choices=["forloop", "sync", "async"])
    p.add_argument("--task")
    p.add_argument("--num-envs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--frameskip", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--pin-cores", action="store_true", default=None)
    p.add_argument("--dist", choices=["const", "uniform", "lognormal"], help="Delay step-time distribution")
    p.add_argument("--param", type=_param, action="append", default=[], metavar="KEY=VALUE",
                   help="env parameter, repeatable (e.g. lo=1000, busy_wait=false)")
    p.add_argument("--backend", choices=_backend.available())
    p.add_argument("--out", metavar="FILE", help="write results here instead of stdout")
    p.add_argument("--format", choices=["csv", "json"], default="csv")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bench", description="Environment pool throughput benchmark.")
    _add_run_args(parser)
    sub = parser.add_subparsers(dest="command")
    sweep = sub.add_parser("sweep", help="one run per worker count, num_envs = 3 x workers")
    _add_run_args(sweep)
    sweep.add_argument("--workers", type=_worker_list, required=True, help="e.g. 1,2,4,8")
    compare = sub.add_parser("compare", help="the same run on every available backend")
    _add_run_args(compare)
    return parser


def config_from_args(args: argparse.Namespace) -> BenchConfig:
    values: dict[str, Any] = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            values = parse_kv(fh.read())
    for dest, name in _FIELDS.items():
        value = getattr(args, dest)
        if value is not None:
            values.pop(dest, None)  # a flag beats the file's alias spelling
            values[name] = value
    if args.dist is not None:
        values["dist"] = args.dist
    values.update(dict(args.param))
    return BenchConfig.from_mapping(values)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = config_from_args(args)
        if args.command == "sweep":
            results = bench_sweep(cfg, args.workers)
        elif args.command == "compare":
            results = [bench_run(cfg.replace(backend=b)) for b in _backend.available()]
            for r in results:
                print(f"# backend={r.config.backend}: {r.fps:.0f} fps", file=sys.stderr)
        else:
            results = [bench_run(cfg)]
        emit_results(results, args.format, args.out)
    except (VecPoolError, OSError) as exc:
        print(f"bench: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
