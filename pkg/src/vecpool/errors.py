"""Exception hierarchy for vecpool.

Everything raised on purpose by the library derives from :class:`VecPoolError`
so callers can catch the whole family at once.
"""

from __future__ import annotations

__all__ = [
    "VecPoolError",
    "UnknownTask",
    "InvalidConfig",
    "ActionOutOfRange",
    "ActionShapeMismatch",
    "QueueOverflow",
    "RingExhausted",
    "DoubleMark",
    "ProtocolViolation",
    "AlreadyStarted",
    "SyncOnly",
    "PoolFailed",
    "PoolClosed",
    "SpawnFailure",
    "ShapeMismatch",
]


class VecPoolError(Exception):
    """Base class for all vecpool errors."""


class UnknownTask(VecPoolError, KeyError):
    """No environment is registered under the requested task name."""

    def __str__(self) -> str:  # KeyError quotes its argument otherwise
        return str(self.args[0]) if self.args else ""


class InvalidConfig(VecPoolError, ValueError):
    """A pool configuration violates a structural constraint (e.g. M > N)."""


class ActionOutOfRange(VecPoolError, ValueError):
    """An action lies outside the declared action space."""


class ActionShapeMismatch(VecPoolError, ValueError):
    """An action (or action batch) has the wrong shape."""


# Name used by the pool-level API for the same condition.
ShapeMismatch = ActionShapeMismatch


class QueueOverflow(VecPoolError, RuntimeError):
    """More than 2N messages outstanding in the action queue.

    This only happens when the one-in-flight-per-env protocol is broken, so it
    is treated as a fatal contract breach rather than back-pressure.
    """


class RingExhausted(VecPoolError, RuntimeError):
    """A state-queue block descriptor was needed before its previous
    generation had been consumed."""


class DoubleMark(VecPoolError, RuntimeError):
    """The same state-queue slot was marked written twice."""


class ProtocolViolation(VecPoolError, RuntimeError):
    """``send`` targeted an env that already has an action in flight."""


class AlreadyStarted(VecPoolError, RuntimeError):
    """``async_reset``/``reset`` called on a pool that was already started."""


class SyncOnly(VecPoolError, RuntimeError):
    """Operation is only defined for synchronous pools (batch_size == num_envs)."""


class PoolFailed(VecPoolError, RuntimeError):
    """An environment raised inside a worker; the pool is poisoned."""


class PoolClosed(VecPoolError, RuntimeError):
    """The pool has been shut down."""


class SpawnFailure(VecPoolError, RuntimeError):
    """Worker threads could not be created."""
