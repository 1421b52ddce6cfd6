"""Throughput measurement for the three executors.

* ``forloop`` steps N bare environment instances one after another in the
  measuring thread.
* ``sync`` drives a pool with ``batch_size == num_envs`` through ``step``.
* ``async`` drives a pool with ``batch_size < num_envs`` through
  ``recv``/``send``.

Each iteration samples fresh uniform actions from the action space. Warmup
iterations are run first and excluded from timing. ``wall_seconds`` is the
sum of the timed iterations (action sampling is outside the timed region) and
FPS is ``env_steps_total * frameskip / wall_seconds``.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import os
import sys
import time
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from .. import _backend
from ..env_core import Discrete, PoolConfig, make_envs, parse_kv, spec_new
from ..errors import InvalidConfig
from ..pool import Pool

MODES = ("forloop", "sync", "async")

CSV_COLUMNS = (
    "mode",
    "task",
    "num_envs",
    "batch_size",
    "threads",
    "iterations",
    "frameskip",
    "wall_seconds",
    "fps",
    "p50_us",
    "p95_us",
    "p99_us",
)


@dataclass(frozen=True)
class BenchConfig:
    mode: str = "sync"
    task_id: str = "CartPole"
    num_envs: int = 8
    batch_size: Optional[int] = None
    num_threads: int = 1
    iterations: int = 1000
    warmup_iterations: int = 100
    frameskip: int = 1
    seed: int = 0
    pin_cores: bool = False
    env_params: Mapping[str, Any] = field(default_factory=dict)
    backend: Optional[str] = None

    def __post_init__(self) -> None:
        mode = self.mode.lower().replace("-", "")
        if mode not in MODES:
            raise InvalidConfig(f"mode must be one of {MODES}, got {self.mode!r}")
        object.__setattr__(self, "mode", mode)
        if self.iterations < 1:
            raise InvalidConfig(f"iterations must be >= 1, got {self.iterations}")
        if self.warmup_iterations < 0:
            raise InvalidConfig(f"warmup_iterations must be >= 0, got {self.warmup_iterations}")
        if self.frameskip < 1:
            raise InvalidConfig(f"frameskip must be >= 1, got {self.frameskip}")
        if self.backend is not None and self.backend not in ("native", "pure"):
            raise InvalidConfig(f"backend must be 'native' or 'pure', got {self.backend!r}")
        if mode == "async":
            m = self.batch_size if self.batch_size is not None else max(1, (3 * self.num_envs) // 4)
            if not 1 <= m < self.num_envs:
                raise InvalidConfig(f"async mode needs 1 <= batch_size < num_envs, got {m} and {self.num_envs}")
        else:
            m = self.num_envs  # forloop ignores it, sync forces M = N
        object.__setattr__(self, "batch_size", m)
        object.__setattr__(self, "env_params", dict(self.env_params))
        spec_new(self.pool_config())  # surface config and task-name errors early

    @property
    def steps_per_iteration(self) -> int:
        return self.batch_size

    def pool_config(self) -> PoolConfig:
        return PoolConfig(
            task_id=self.task_id,
            num_envs=self.num_envs,
            batch_size=self.batch_size,
            num_threads=self.num_threads,
            seed=self.seed,
            pin_cores=self.pin_cores,
            env_params=self.env_params,
        )

    def replace(self, **changes: Any) -> "BenchConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> "BenchConfig":
        """Keys are field names (``task`` and ``threads`` are accepted as
        aliases); anything else becomes an env parameter."""
        aliases = {"task": "task_id", "threads": "num_threads", "warmup": "warmup_iterations"}
        names = {f.name for f in dataclasses.fields(cls)}
        kwargs: dict[str, Any] = {}
        params = dict(values.get("env_params", {}))
        for key, value in values.items():
            if key == "env_params":
                continue
            key = aliases.get(key, key)
            if key in names:
                kwargs[key] = value
            else:
                params[key] = value
        kwargs["env_params"] = params
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: Union[str, os.PathLike]) -> "BenchConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_mapping(parse_kv(fh.read()))


@dataclass
class BenchResult:
    config: BenchConfig
    wall_seconds: float
    env_steps_total: int
    fps: float
    p50_us: float
    p95_us: float
    p99_us: float
    records_received: int

    def row(self) -> dict[str, Any]:
        c = self.config
        return {
            "mode": c.mode,
            "task": c.task_id,
            "num_envs": c.num_envs,
            "batch_size": c.batch_size,
            "threads": 1 if c.mode == "forloop" else c.num_threads,
            "iterations": c.iterations,
            "frameskip": c.frameskip,
            "wall_seconds": self.wall_seconds,
            "fps": self.fps,
            "p50_us": self.p50_us,
            "p95_us": self.p95_us,
            "p99_us": self.p99_us,
        }


class ActionSampler:
    """Uniform random actions from an action space, seeded independently of
    the environments so two runs with the same seed draw the same actions."""

    def __init__(self, action_layout: Any, seed: int) -> None:
        self.layout = action_layout
        self.rng = np.random.default_rng([seed % 2**64, 0x5EED])

    def sample(self, count: int) -> np.ndarray:
        layout = self.layout
        if isinstance(layout, Discrete):
            return self.rng.integers(0, layout.n, size=count, dtype=np.int64)
        low = np.broadcast_to(np.asarray(layout.low, np.float64), layout.shape)
        high = np.broadcast_to(np.asarray(layout.high, np.float64), layout.shape)
        return self.rng.uniform(low, high, size=(count, *layout.shape))


def _percentiles(latencies_ns: np.ndarray) -> tuple[float, float, float]:
    p = np.percentile(latencies_ns / 1e3, [50, 95, 99])
    return float(p[0]), float(p[1]), float(p[2])


def _run_forloop(cfg: BenchConfig, sampler: ActionSampler) -> tuple[np.ndarray, int]:
    pool_cfg = cfg.pool_config()
    envs = make_envs(pool_cfg, native=(cfg.backend or _backend.DEFAULT) == "native")
    n = cfg.num_envs
    last_done = [False] * n
    for env in envs:
        env.reset()
    records = 0
    lat = np.empty(cfg.iterations, np.int64)
    for it in range(-cfg.warmup_iterations, cfg.iterations):
        actions = sampler.sample(n)
        t0 = time.perf_counter_ns()
        # same auto-reset rule as the pool: a step after done becomes a reset
        for i, env in enumerate(envs):
            rec = env.reset() if last_done[i] else env.step(actions[i])
            last_done[i] = rec.done
        if it >= 0:
            lat[it] = time.perf_counter_ns() - t0
            records += n
    return lat, records


def _run_sync(cfg: BenchConfig, sampler: ActionSampler) -> tuple[np.ndarray, int]:
    with Pool(cfg.pool_config(), backend=cfg.backend) as pool:
        batch = pool.reset()
        ids = batch.env_ids
        lat = np.empty(cfg.iterations, np.int64)
        start = 0
        for it in range(-cfg.warmup_iterations, cfg.iterations):
            actions = sampler.sample(cfg.num_envs)
            if it == 0:
                start = pool.received
            t0 = time.perf_counter_ns()
            batch = pool.step(actions, ids)
            if it >= 0:
                lat[it] = time.perf_counter_ns() - t0
            ids = batch.env_ids
        return lat, pool.received - start


def _run_async(cfg: BenchConfig, sampler: ActionSampler) -> tuple[np.ndarray, int]:
    with Pool(cfg.pool_config(), backend=cfg.backend) as pool:
        pool.async_reset()
        m = cfg.batch_size
        lat = np.empty(cfg.iterations, np.int64)
        start = 0
        batch = pool.recv()
        for it in range(-cfg.warmup_iterations, cfg.iterations):
            actions = sampler.sample(m)
            if it == 0:
                start = pool.received
            t0 = time.perf_counter_ns()
            pool.send(actions, batch.env_ids)
            batch = pool.recv()
            if it >= 0:
                lat[it] = time.perf_counter_ns() - t0
        return lat, pool.received - start


_RUNNERS = {"forloop": _run_forloop, "sync": _run_sync, "async": _run_async}


def bench_run(cfg: BenchConfig) -> BenchResult:
    spec = spec_new(cfg.pool_config())
    sampler = ActionSampler(spec.action_layout, cfg.seed)
    lat, records = _RUNNERS[cfg.mode](cfg, sampler)
    wall = float(lat.sum()) / 1e9
    steps = cfg.iterations * cfg.steps_per_iteration
    if records != steps:
        raise RuntimeError(f"accounting mismatch: expected {steps} records, received {records}")
    p50, p95, p99 = _percentiles(lat)
    return BenchResult(cfg, wall, steps, steps * cfg.frameskip / wall, p50, p95, p99, records)


def sweep_configs(base: BenchConfig, workers: Sequence[int], async_ratio: float = 0.75) -> list[BenchConfig]:
    """One config per worker count with ``num_envs = 3 * workers``.

    Async runs keep the base config's batch_size/num_envs ratio when the
    base is async, otherwise use ``async_ratio``.
    """
    if not workers:
        raise InvalidConfig("workers must be a non-empty list")
    if base.mode == "async":
        async_ratio = base.batch_size / base.num_envs
    out = []
    for w in workers:
        if w < 1:
            raise InvalidConfig(f"worker counts must be >= 1, got {w}")
        n = 3 * w
        m = None
        if base.mode == "async":
            m = min(n - 1, max(1, round(async_ratio * n)))
        out.append(base.replace(num_threads=w, num_envs=n, batch_size=m))
    return out


def bench_sweep(base: BenchConfig, workers: Sequence[int]) -> list[BenchResult]:
    return [bench_run(cfg) for cfg in sweep_configs(base, workers)]


def emit_results(
    results: Iterable[BenchResult],
    fmt: str = "csv",
    path: Union[str, os.PathLike, None] = None,
) -> str:
    """Write results as CSV (header + one row each) or a JSON array of the
    same records. Writes to ``path`` when given, else stdout. Returns the
    text."""
    rows = [r.row() for r in results]
    if not rows:
        raise ValueError("no results to emit")
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
        text = buf.getvalue()
    elif fmt == "json":
        text = json.dumps(rows, indent=2) + "\n"
    else:
        raise ValueError(f"format must be 'csv' or 'json', got {fmt!r}")
    if path is None:
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return text


def load_results(path: Union[str, os.PathLike]) -> list[dict[str, Any]]:
    """Read back a file written by :func:`emit_results` with typed values."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    if text.lstrip().startswith("["):
        return json.loads(text)
    ints = {"num_envs", "batch_size", "threads", "iterations", "frameskip"}
    floats = {"wall_seconds", "fps", "p50_us", "p95_us", "p99_us"}
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        out.append({k: int(v) if k in ints else float(v) if k in floats else v for k, v in row.items()})
    return out
