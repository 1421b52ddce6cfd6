"""Pure-Python backend.

Same classes and algorithms as the compiled core. Python has no user-level
atomics, so each counter update that the core does with a single atomic
instruction happens here inside a very short ``threading.Lock`` section; the
semaphores are ``threading.Semaphore``.
"""

from __future__ import annotations

import threading
import time
from typing import Any, Optional, Sequence

import numpy as np

from ._types import SHUTDOWN, SlotHandle, StateBatch, new_block
from .env_core import Discrete, EnvSpec, batch_env_ids, validate_action_batch
from .errors import (
    ActionShapeMismatch,
    DoubleMark,
    PoolClosed,
    PoolFailed,
    ProtocolViolation,
    QueueOverflow,
    RingExhausted,
)


def _relax() -> None:
    time.sleep(0)


def _acquire(sem: threading.Semaphore, timeout: Optional[float]) -> bool:
    if timeout is None:
        return sem.acquire()
    return sem.acquire(timeout=max(0.0, float(timeout)))


class ActionQueue:
    def __init__(self, num_envs: int) -> None:
        if num_envs < 1:
            raise ValueError(f"num_envs must be >= 1, got {num_envs}")
        self._cap = 2 * int(num_envs)
        self._cells = [0] * self._cap
        self._seq = list(range(self._cap))
        self._head = 0
        self._tail = 0
        self._closed = False
        self._lock = threading.Lock()
        self._items = threading.Semaphore(0)

    capacity = property(lambda self: self._cap)
    head = property(lambda self: self._head)
    tail = property(lambda self: self._tail)
    closed = property(lambda self: self._closed)

    @property
    def outstanding(self) -> int:
        return self._head - self._tail

    @property
    def pending_tokens(self) -> int:
        return self._items._value

    def __len__(self) -> int:
        return self.outstanding

    def enqueue_batch(self, words: Sequence[int]) -> None:
        words = [int(w) for w in np.asarray(words, dtype=np.int64).reshape(-1)]
        k = len(words)
        if k == 0:
            return
        if min(words) < 0:
            raise ValueError("message words must be non-negative")
        if self._closed:
            raise PoolClosed("action queue is shut down")
        with self._lock:
            h = self._head
            if h + k - self._tail > self._cap:
                raise QueueOverflow(
                    f"enqueue of {k} would exceed capacity {self._cap} ({h - self._tail} outstanding)"
                )
            self._head = h + k
        cap = self._cap
        for i, w in enumerate(words):
            pos = h + i
            c = pos % cap
            while self._seq[c] != pos:
                _relax()
            self._cells[c] = w
            self._seq[c] = pos + 1
        self._items.release(k)

    def _take(self) -> int:
        while True:
            with self._lock:
                t = self._tail
                if t < self._head:
                    self._tail = t + 1
                    break
                closed = self._closed
            if closed:
                self._items.release()
                return SHUTDOWN
            _relax()
        c = t % self._cap
        while self._seq[c] != t + 1:
            _relax()
        v = self._cells[c]
        self._seq[c] = t + self._cap
        return v

    def dequeue(self, timeout: Optional[float] = None) -> int:
        if not _acquire(self._items, timeout):
            raise TimeoutError("action queue dequeue timed out")
        return self._take()

    def shutdown(self) -> None:
        with self._lock:
            if self._closed:
                return
            self._closed = True
        self._items.release()


class StateQueue:
    def __init__(self, batch_size: int, num_envs: int, obs_shape=(1,), obs_dtype="float32") -> None:
        if not 1 <= batch_size <= num_envs:
            raise ValueError(f"need 1 <= batch_size <= num_envs, got {batch_size}, {num_envs}")
        self.batch_size = int(batch_size)
        self.num_envs = int(num_envs)
        self.num_blocks = -(-self.num_envs // self.batch_size) + 1
        self.obs_shape = tuple(int(s) for s in obs_shape)
        self.obs_dtype = np.dtype(obs_dtype)
        B = self.num_blocks
        self._views = [new_block(self.batch_size, self.obs_shape, self.obs_dtype) for _ in range(B)]
        self._generation = list(range(B))
        self._written = [0] * B
        self._marks = [bytearray(self.batch_size) for _ in range(B)]
        self._alloc = 0
        self._next_out = 0
        self._closed = False
        self._lock = threading.Lock()
        self._ready = threading.Semaphore(0)

    allocated = property(lambda self: self._alloc)
    consumed = property(lambda self: self._next_out)
    closed = property(lambda self: self._closed)

    @property
    def ready_count(self) -> int:
        return self._ready._value

    def allocate(self) -> SlotHandle:
        with self._lock:
            c = self._alloc
            self._alloc = c + 1
        g, o = divmod(c, self.batch_size)
        d = g % self.num_blocks
        if self._generation[d] != g:
            raise RingExhausted("state queue descriptor reused before its previous generation was consumed")
        return SlotHandle(g, o, self._views[d])

    def mark_written(self, handle: SlotHandle) -> None:
        g, o = handle.generation, handle.offset
        d = g % self.num_blocks
        if not 0 <= o < self.batch_size or self._generation[d] != g:
            raise DoubleMark(f"stale or foreign slot handle (generation {g}, offset {o})")
        with self._lock:
            if self._marks[d][o]:
                raise DoubleMark(f"slot (generation {g}, offset {o}) marked twice")
            self._marks[d][o] = 1
            self._written[d] += 1
            full = self._written[d] == self.batch_size
        if full:
            self._ready.release()

    def _take_ready(self) -> int:
        while True:
            with self._lock:
                g = self._next_out
                d = g % self.num_blocks
                if self._generation[d] == g and self._written[d] == self.batch_size:
                    self._next_out = g + 1
                    return g
                closed = self._closed
            if closed:
                self._ready.release()
                return -1
            _relax()

    def wait_ready(self, timeout: Optional[float] = None) -> Optional[StateBatch]:
        if not _acquire(self._ready, timeout):
            raise TimeoutError("no ready block before timeout")
        g = self._take_ready()
        if g < 0:
            return None
        d = g % self.num_blocks
        view = self._views[d]
        self._views[d] = new_block(self.batch_size, self.obs_shape, self.obs_dtype)
        self._marks[d] = bytearray(self.batch_size)
        self._written[d] = 0
        self._generation[d] = g + self.num_blocks
        return StateBatch(*view, g)

    def shutdown(self) -> None:
        with self._lock:
            if self._closed:
                return
            self._closed = True
        self._ready.release()


class WorkerContext:
    def __init__(self, envs, aq: ActionQueue, sq: StateQueue, action_table: np.ndarray, spec: EnvSpec) -> None:
        self.envs = list(envs)
        if len(self.envs) != sq.num_envs:
            raise ValueError("env count does not match the state queue")
        self.aq = aq
        self.sq = sq
        self.action_table = action_table
        self.discrete = isinstance(spec.action_layout, Discrete)
        self.last_done = np.zeros(len(self.envs), np.bool_)
        self.failure: Optional[BaseException] = None
        self._processed = 0
        self._count_lock = threading.Lock()

    action_queue = property(lambda self: self.aq)
    state_queue = property(lambda self: self.sq)
    processed = property(lambda self: self._processed)

    @property
    def failed(self) -> bool:
        return self.failure is not None

    def run(self) -> None:
        while True:
            w = self.aq.dequeue()
            if w < 0 or not self.execute(w):
                return

    def execute(self, w: int) -> bool:
        """Run one dequeued message on the calling thread."""
        sq = self.sq
        obs_shape, obs_dtype = sq.obs_shape, sq.obs_dtype
        e = w >> 1
        env = self.envs[e]
        try:
            if (w & 1) or self.last_done[e]:
                rec = env.reset()
            else:
                rec = env.step(self._action_for(e))
            obs = np.asarray(rec.observation, dtype=obs_dtype)
            if obs.shape != obs_shape:
                raise ActionShapeMismatch(
                    f"env {e} returned observation shape {obs.shape}, expected {obs_shape}"
                )
            done = bool(rec.done) or bool(rec.truncated)
            self.last_done[e] = done
            h = sq.allocate()
            h.write(e, obs, rec.reward, done, rec.truncated, rec.elapsed_step)
            sq.mark_written(h)
        except BaseException as exc:
            self._fail(exc)
            return False
        with self._count_lock:
            self._processed += 1
        return True

    def _action_for(self, e: int) -> Any:
        if self.discrete:
            return int(self.action_table[e])
        return self.action_table[e].copy()

    def _fail(self, exc: BaseException) -> None:
        if self.failure is None:
            self.failure = exc
        self.sq.shutdown()


class Dispatcher:
    def __init__(self, ctx: WorkerContext, action_table: np.ndarray, spec: EnvSpec, ordered: bool = False) -> None:
        self.ctx = ctx
        self.aq = ctx.aq
        self.sq = ctx.sq
        self.spec = spec
        self.num_envs = ctx.sq.num_envs
        self.action_table = action_table
        self.ordered = ordered
        self._in_flight = np.zeros(self.num_envs, np.bool_)
        self._lock = threading.Lock()
        self.sent = 0
        self.received = 0
        self.inline_single = True
        self.started = False
        self.closed = False

    @property
    def in_flight_mask(self) -> np.ndarray:
        return self._in_flight.copy()

    def send(self, actions, env_ids) -> None:
        self._publish(actions, env_ids, False)

    def step(self, actions, env_ids, timeout: Optional[float] = None) -> StateBatch:
        """``send`` then ``recv``. In sync mode a single-message step runs
        on the calling thread: the caller would only block waiting for it."""
        self._publish(actions, env_ids, self.inline_single and self.sq.batch_size == self.num_envs)
        return self.recv(timeout)

    def _publish(self, actions, env_ids, inline: bool) -> None:
        if self.closed:
            raise PoolClosed("pool is closed")
        if not self.started:
            raise ProtocolViolation("call async_reset() or reset() before sending actions")
        ids = batch_env_ids(env_ids, self.num_envs)
        k = ids.size
        if self.ctx.discrete and k == 1 and np.ndim(actions) == 0:
            actions = np.reshape(actions, 1)
        acts = validate_action_batch(self.spec, actions, k)
        with self._lock:
            if k > self.num_envs or len(set(ids.tolist())) != k:
                raise ProtocolViolation("env_ids contain duplicates")
            busy = self._in_flight[ids]
            if busy.any():
                raise ProtocolViolation(f"env_id {int(ids[busy][0])} already has an action in flight")
            self.action_table[ids] = acts
            self._in_flight[ids] = True
            self.sent += k
            if not (inline and k == 1):
                self.aq.enqueue_batch(ids << 1)
                return
        self.ctx.execute(int(ids[0]) << 1)

    def send_resets(self) -> None:
        if self.closed:
            raise PoolClosed("pool is closed")
        with self._lock:
            if self._in_flight.any():
                raise ProtocolViolation(f"env_id {int(np.flatnonzero(self._in_flight)[0])} already has an action in flight")
            self._in_flight[:] = True
            self.started = True
            self.aq.enqueue_batch((np.arange(self.num_envs, dtype=np.int64) << 1) | 1)
            self.sent += self.num_envs

    def recv(self, timeout: Optional[float] = None) -> StateBatch:
        if self.closed:
            raise PoolClosed("pool is closed")
        ctx = self.ctx
        if ctx.failed:
            raise PoolFailed(f"a worker failed: {ctx.failure!r}") from ctx.failure
        batch = self.sq.wait_ready(timeout)
        if batch is None:
            if ctx.failed:
                raise PoolFailed(f"a worker failed: {ctx.failure!r}") from ctx.failure
            raise PoolClosed("pool is shut down")
        with self._lock:
            self._in_flight[batch.env_ids] = False
            self.received += len(batch)
        if self.ordered:
            batch = batch.take(np.argsort(batch.env_ids, kind="stable"))
        return batch
