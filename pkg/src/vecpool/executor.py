"""Fixed-size worker thread pool.

Each worker runs ``WorkerContext.run()``: dequeue a routed action, reset or
step the addressed env, write the record into a state-queue slot and mark it.
With ``pin_cores`` worker ``i`` is pinned to the ``i``-th allowed CPU, wrapping
modulo the number of CPUs. Pinning is best effort: a failure leaves the
worker unpinned and emits a warning.
"""

from __future__ import annotations

import os
import threading
import warnings
from typing import Any, Optional, Sequence

from .errors import SpawnFailure


def available_cores() -> list[int]:
    try:
        return sorted(os.sched_getaffinity(0))
    except (AttributeError, OSError):
        return list(range(os.cpu_count() or 1))


def pin_core_for(index: int, cores: Sequence[int]) -> int:
    return cores[index % len(cores)]


def _pin_current_thread(core: int) -> bool:
    # pid 0 is the calling thread on Linux
    try:
        os.sched_setaffinity(0, {core})
    except (AttributeError, OSError) as exc:
        warnings.warn(f"could not pin worker to core {core}: {exc}", RuntimeWarning, stacklevel=2)
        return False
    return True


class Executor:
    """Owns the worker threads serving one :class:`WorkerContext`."""

    def __init__(self, ctx: Any, num_threads: int, pin_cores: bool = False, name: str = "vecpool-worker") -> None:
        if num_threads < 1:
            raise ValueError(f"num_threads must be >= 1, got {num_threads}")
        self.ctx = ctx
        self.num_threads = int(num_threads)
        self.pin_cores = bool(pin_cores)
        self.name = name
        self.threads: list[threading.Thread] = []
        self.pinned: list[Optional[int]] = [None] * self.num_threads
        self._started = threading.Barrier(self.num_threads + 1)
        self._lock = threading.Lock()
        self._running = False

    @classmethod
    def spawn(cls, ctx: Any, num_threads: int, pin_cores: bool = False) -> "Executor":
        ex = cls(ctx, num_threads, pin_cores)
        ex.start()
        return ex

    @property
    def running(self) -> bool:
        return self._running

    def _worker(self, index: int, core: Optional[int]) -> None:
        if core is not None and _pin_current_thread(core):
            self.pinned[index] = core
        try:
            self._started.wait()
        except threading.BrokenBarrierError:
            return  # start() failed part way and is tearing down
        self.ctx.run()

    def start(self) -> None:
        with self._lock:
            if self.threads:
                raise RuntimeError("executor already started")
            cores = available_cores() if self.pin_cores else None
            try:
                for i in range(self.num_threads):
                    core = pin_core_for(i, cores) if cores else None
                    t = threading.Thread(target=self._worker, args=(i, core), name=f"{self.name}-{i}", daemon=True)
                    t.start()
                    self.threads.append(t)
            except RuntimeError as exc:
                self._started.abort()
                self.ctx.action_queue.shutdown()
                for t in self.threads:
                    t.join()
                self.ctx.state_queue.shutdown()
                raise SpawnFailure(f"could not start worker {len(self.threads)}: {exc}") from exc
            self._running = True
        self._started.wait()

    def shutdown(self, timeout: Optional[float] = None) -> None:
        """Stop accepting work, let in-flight steps finish, join the workers,
        then close the state queue. Safe to call more than once."""
        with self._lock:
            if not self._running:
                return
            self._running = False
        self.ctx.action_queue.shutdown()
        for t in self.threads:
            t.join(timeout)
        self.ctx.state_queue.shutdown()


def exec_spawn(ctx: Any, num_threads: int, pin_cores: bool = False) -> Executor:
    return Executor.spawn(ctx, num_threads, pin_cores)


def exec_shutdown(executor: Executor, timeout: Optional[float] = None) -> None:
    executor.shutdown(timeout)
