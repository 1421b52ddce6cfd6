"""Throughput benchmark harness and its command-line interface."""

from .harness import (
    CSV_COLUMNS,
    ActionSampler,
    BenchConfig,
    BenchResult,
    bench_run,
    bench_sweep,
    emit_results,
    load_results,
    sweep_configs,
)

__all__ = [
    "CSV_COLUMNS",
    "ActionSampler",
    "BenchConfig",
    "BenchResult",
    "bench_run",
    "bench_sweep",
    "emit_results",
    "load_results",
    "sweep_configs",
]
