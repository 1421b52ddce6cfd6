"""Compiled core vs pure-Python fallback on the same workloads.

    python benchmarks/compare_backends.py [--iterations 2000] [--out results.csv]

Rows cover the per-step dispatch cost (CartPole, one env), a sync batch
(CartPole, 16 envs) and the async send/recv loop (CartPole, 16 envs,
batch 12). The last column is the native/pure speedup for that row.
"""

from __future__ import annotations

import argparse
import csv
import sys

from vecpool import available_backends
from vecpool.bench import BenchConfig, bench_run

WORKLOADS = [
    ("forloop N=1", dict(mode="forloop", num_envs=1)),
    ("sync N=1", dict(mode="sync", num_envs=1, num_threads=1)),
    ("sync N=16", dict(mode="sync", num_envs=16, num_threads=4)),
    ("async N=16 M=12", dict(mode="async", num_envs=16, batch_size=12, num_threads=4)),
]


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--task", default="CartPole")
    parser.add_argument("--iterations", type=int, default=2000)
    parser.add_argument("--warmup", type=int, default=200)
    parser.add_argument("--out", help="also write the table as CSV")
    args = parser.parse_args(argv)

    backends = available_backends()
    if "native" not in backends:
        print("compiled core not built; only the pure backend is available", file=sys.stderr)
    rows = []
    for label, kw in WORKLOADS:
        fps = {}
        for backend in backends:
            cfg = BenchConfig(task_id=args.task, iterations=args.iterations,
                              warmup_iterations=args.warmup, backend=backend, **kw)
            fps[backend] = bench_run(cfg).fps
        speedup = fps["native"] / fps["pure"] if len(fps) == 2 else float("nan")
        rows.append((label, fps.get("native", float("nan")), fps["pure"], speedup))

    print(f"{'workload':<18}{'native fps':>14}{'pure fps':>14}{'speedup':>10}")
    for label, nat, pure, speedup in rows:
        print(f"{label:<18}{nat:>14.0f}{pure:>14.0f}{speedup:>9.1f}x")
    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["workload", "native_fps", "pure_fps", "speedup"])
            w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
