"""User-facing pool: ``make``, ``async_reset``, ``send``, ``recv`` and the
synchronous ``step``/``reset`` built from them.

Typical asynchronous loop::

    pool = vecpool.make("CartPole", num_envs=10, batch_size=9, num_threads=4)
    pool.async_reset()
    while True:
        batch = pool.recv()
        actions = policy(batch.observations)
        pool.send(actions, batch.env_ids)

Each env has at most one action in flight. ``send`` only accepts ids that a
previous ``recv`` returned (or that were never sent since ``async_reset``
delivered them). An env whose last record had ``done=True`` is reset by its
worker on the next send, and the action is ignored.
"""

from __future__ import annotations

import threading
from typing import Any, Optional, Union

import numpy as np

from . import _backend
from ._types import StateBatch
from .env_core import Discrete, EnvSpec, PoolConfig, make_envs, spec_new
from .errors import AlreadyStarted, PoolClosed, SyncOnly
from .executor import Executor


class Pool:
    def __init__(self, config: PoolConfig, *, backend: Optional[str] = None) -> None:
        self.config = config
        self.spec: EnvSpec = spec_new(config)
        self.backend = _backend.DEFAULT if backend is None else backend
        impl = _backend.get(self.backend)
        n, m = config.num_envs, config.batch_size
        self.envs = make_envs(config, native=self.backend == "native")
        layout = self.spec.action_layout
        if isinstance(layout, Discrete):
            self._actions = np.zeros(n, np.int64)
        else:
            self._actions = np.zeros((n, layout.size), np.float64)
        obs = self.spec.observation_layout
        aq = impl.ActionQueue(n)
        sq = impl.StateQueue(m, n, obs.shape, obs.dtype)
        self._ctx = impl.WorkerContext(self.envs, aq, sq, self._actions, self.spec)
        self._dispatch = impl.Dispatcher(self._ctx, self._actions, self.spec, config.order_by_env_id)
        self._all_ids = np.arange(n, dtype=np.int64)
        self._started = False
        self._closed = False
        self._lock = threading.Lock()
        self.executor = Executor.spawn(self._ctx, config.num_threads, config.pin_cores)

    # -- introspection -----------------------------------------------------

    @property
    def num_envs(self) -> int:
        return self.config.num_envs

    @property
    def batch_size(self) -> int:
        return self.config.batch_size

    @property
    def is_sync(self) -> bool:
        return self.config.is_sync

    @property
    def started(self) -> bool:
        return self._started

    @property
    def closed(self) -> bool:
        return self._closed

    @property
    def sent(self) -> int:
        """Messages (actions and resets) published so far."""
        return self._dispatch.sent

    @property
    def received(self) -> int:
        """Records handed to the caller so far."""
        return self._dispatch.received

    @property
    def processed(self) -> int:
        """Messages the workers have finished executing."""
        return self._ctx.processed

    @property
    def in_flight(self) -> np.ndarray:
        return self._dispatch.in_flight_mask

    @property
    def action_queue(self):
        return self._ctx.action_queue

    @property
    def state_queue(self):
        return self._ctx.state_queue

    def specs(self):
        return self.spec.observation_layout, self.spec.action_layout

    def observation_spec(self):
        return self.spec.observation_layout

    def action_spec(self):
        return self.spec.action_layout

    # -- protocol ----------------------------------------------------------

    def async_reset(self) -> None:
        """Queue a reset for every env. Allowed once, before anything else."""
        if self._closed:
            raise PoolClosed("pool is closed")
        with self._lock:
            if self._started:
                raise AlreadyStarted("async_reset can only be called once")
            self._started = True
        self._dispatch.send_resets()

    def send(self, actions: Any, env_ids: Any) -> None:
        """Publish one action per env id and return without waiting."""
        self._dispatch.send(actions, env_ids)

    def recv(self, timeout: Optional[float] = None) -> StateBatch:
        """Block until ``batch_size`` records are ready and return them.

        ``timeout`` (seconds) raises ``TimeoutError`` instead of blocking
        forever; intended for tests.
        """
        return self._dispatch.recv(timeout)

    def step(self, actions: Any, env_ids: Any = None, timeout: Optional[float] = None) -> StateBatch:
        """``send`` followed by ``recv``. ``env_ids`` defaults to all envs."""
        if env_ids is None:
            env_ids = self._all_ids
        return self._dispatch.step(actions, env_ids, timeout)

    def reset(self, timeout: Optional[float] = None) -> StateBatch:
        """Synchronous reset: every env's initial record, ordered by env id."""
        if self._closed:
            raise PoolClosed("pool is closed")
        if not self.is_sync:
            raise SyncOnly("reset() needs batch_size == num_envs; use async_reset() and recv()")
        self.async_reset()
        batch = self._dispatch.recv(timeout)
        if not self.config.order_by_env_id:
            batch = batch.take(np.argsort(batch.env_ids, kind="stable"))
        return batch

    # -- lifecycle ---------------------------------------------------------

    def close(self) -> None:
        """Stop the workers after their current step. Idempotent."""
        with self._lock:
            if self._closed:
                return
            self._closed = True
        self._dispatch.closed = True
        self.executor.shutdown()

    shutdown = close

    def __enter__(self) -> "Pool":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def __del__(self) -> None:
        try:
            self.close()
        except Exception:
            pass

    def __repr__(self) -> str:
        c = self.config
        return (
            f"Pool(task_id={c.task_id!r}, num_envs={c.num_envs}, batch_size={c.batch_size}, "
            f"num_threads={c.num_threads}, backend={self.backend!r})"
        )


class GymPool:
    """Classic vectorized-env view of a pool.

    Batches come back as ``(obs, rew, done, info)`` with ``info["env_id"]``
    naming the env of each row. In sync mode ``reset()`` and ``step()`` put
    row ``i`` at env ``i``; in async mode rows are in completion order and
    the client loops over ``async_reset``/``recv``/``send``.
    """

    def __init__(self, pool: Pool) -> None:
        self.pool = pool

    @staticmethod
    def _unpack(batch: StateBatch):
        return batch.observations, batch.rewards, batch.dones, batch.info

    def _ordered(self, batch: StateBatch) -> StateBatch:
        if self.pool.is_sync and not self.pool.config.order_by_env_id:
            batch = batch.take(np.argsort(batch.env_ids, kind="stable"))
        return batch

    def reset(self) -> np.ndarray:
        return self.pool.reset().observations

    def step(self, actions: Any, env_id: Any = None):
        return self._unpack(self._ordered(self.pool.step(actions, env_id)))

    def async_reset(self) -> None:
        self.pool.async_reset()

    def send(self, actions: Any, env_id: Any) -> None:
        self.pool.send(actions, env_id)

    def recv(self, timeout: Optional[float] = None):
        return self._unpack(self._ordered(self.pool.recv(timeout)))

    def close(self) -> None:
        self.pool.close()

    def __enter__(self) -> "GymPool":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def make(
    task_id: Union[str, PoolConfig],
    *,
    backend: Optional[str] = None,
    env_type: str = "pool",
    **kwargs: Any,
) -> Union[Pool, GymPool]:
    """Build a pool from a task name plus config fields, or from a
    :class:`PoolConfig`. Unknown keyword arguments become ``env_params``.

    ``env_type="gym"`` returns a :class:`GymPool`; in sync mode its batches
    are ordered by env id.
    """
    if isinstance(task_id, PoolConfig):
        if kwargs:
            raise TypeError("pass either a PoolConfig or keyword fields, not both")
        config = task_id
    else:
        values = dict(kwargs)
        values["task_id"] = task_id
        if env_type == "gym" and values.get("batch_size") in (None, values.get("num_envs", 1)):
            values.setdefault("order_by_env_id", True)
        config = PoolConfig.from_mapping(values)
    if env_type not in ("pool", "gym"):
        raise ValueError(f"env_type must be 'pool' or 'gym', got {env_type!r}")
    pool = Pool(config, backend=backend)
    return GymPool(pool) if env_type == "gym" else pool
