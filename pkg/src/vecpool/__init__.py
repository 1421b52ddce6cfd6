"""Parallel execution of batched reinforcement-learning environments.

A pool owns ``num_envs`` environment instances and a fixed set of worker
threads. ``send`` publishes actions without waiting; ``recv`` returns the
first ``batch_size`` results to complete. With ``batch_size == num_envs``
this is ordinary synchronous stepping.
"""

from ._backend import available as available_backends
from ._backend import DEFAULT as default_backend
from ._types import SHUTDOWN, ActionMsg, StateBatch
from .builtin_envs import register_builtins
from .env_core import (
    ArrayLayout,
    Continuous,
    Discrete,
    Env,
    EnvSpec,
    PoolConfig,
    StateRecord,
    register,
    registered_tasks,
    rng_for,
    spec_new,
    validate_action,
)
from .errors import *  # noqa: F401,F403
from .errors import __all__ as _error_names
from .pool import GymPool, Pool, make

register_builtins()

__version__ = "0.1.0"

__all__ = [
    "ActionMsg",
    "ArrayLayout",
    "Continuous",
    "Discrete",
    "Env",
    "EnvSpec",
    "GymPool",
    "Pool",
    "PoolConfig",
    "SHUTDOWN",
    "StateBatch",
    "StateRecord",
    "available_backends",
    "default_backend",
    "make",
    "register",
    "registered_tasks",
    "rng_for",
    "spec_new",
    "validate_action",
    *_error_names,
]
