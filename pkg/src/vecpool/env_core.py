"""Environment abstraction shared by every pool: layouts, config, records,
the per-instance random stream and the task registry.
"""

from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Any, Callable, Mapping, Optional, Sequence, Union

import numpy as np

from .errors import ActionOutOfRange, ActionShapeMismatch, InvalidConfig, ProtocolViolation, UnknownTask

OBS_DTYPES = ("float32", "int32")


@dataclass(frozen=True)
class ArrayLayout:
    """Shape and scalar kind of one observation."""

    shape: tuple[int, ...]
    dtype: str = "float32"

    def __post_init__(self) -> None:
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))
        if self.dtype not in OBS_DTYPES:
            raise InvalidConfig(f"observation dtype must be one of {OBS_DTYPES}, got {self.dtype!r}")
        if any(d < 1 for d in self.shape):
            raise InvalidConfig(f"observation dims must be positive, got {self.shape}")

    @property
    def size(self) -> int:
        return math.prod(self.shape)


@dataclass(frozen=True)
class Discrete:
    n: int

    def __post_init__(self) -> None:
        if int(self.n) < 1:
            raise InvalidConfig(f"discrete action space needs n >= 1, got {self.n}")
        object.__setattr__(self, "n", int(self.n))

    @property
    def num_values(self) -> int:
        return self.n


@dataclass(frozen=True)
class Continuous:
    shape: tuple[int, ...]
    low: tuple[float, ...]
    high: tuple[float, ...]

    def __post_init__(self) -> None:
        shape = tuple(int(d) for d in self.shape)
        size = math.prod(shape)
        low = np.broadcast_to(np.asarray(self.low, dtype=np.float64), shape).ravel()
        high = np.broadcast_to(np.asarray(self.high, dtype=np.float64), shape).ravel()
        if low.size != size or np.any(low > high):
            raise InvalidConfig("continuous bounds need low <= high element-wise")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "low", tuple(low.tolist()))
        object.__setattr__(self, "high", tuple(high.tolist()))

    @property
    def size(self) -> int:
        return math.prod(self.shape)


ActionLayout = Union[Discrete, Continuous]


@dataclass(frozen=True)
class EnvSpec:
    name: str
    observation_layout: ArrayLayout
    action_layout: ActionLayout
    reward_range: tuple[float, float] = (-math.inf, math.inf)
    default_max_episode_steps: int = 1000


@dataclass(frozen=True)
class PoolConfig:
    """Static description of a pool.

    ``batch_size`` defaults to ``num_envs`` (synchronous mode) and
    ``num_threads`` to ``min(num_envs, cpu_count)``. ``max_episode_steps=None``
    means "use the task's default".
    """

    task_id: str
    num_envs: int = 1
    batch_size: Optional[int] = None
    num_threads: Optional[int] = None
    seed: int = 0
    max_episode_steps: Optional[int] = None
    pin_cores: bool = False
    env_params: Mapping[str, Any] = field(default_factory=dict)
    order_by_env_id: bool = False

    def __post_init__(self) -> None:
        n = _as_count("num_envs", self.num_envs)
        m = n if self.batch_size is None else _as_count("batch_size", self.batch_size)
        if m > n:
            raise InvalidConfig(f"batch_size ({m}) cannot be greater than num_envs ({n})")
        threads = self.num_threads
        if threads is None:
            threads = max(1, min(n, os.cpu_count() or 1))
        threads = _as_count("num_threads", threads)
        if self.max_episode_steps is not None:
            _as_count("max_episode_steps", self.max_episode_steps)
        if self.order_by_env_id and m < n:
            raise InvalidConfig("order_by_env_id is only meaningful when batch_size == num_envs")
        object.__setattr__(self, "num_envs", n)
        object.__setattr__(self, "batch_size", m)
        object.__setattr__(self, "num_threads", threads)
        object.__setattr__(self, "seed", int(self.seed))
        object.__setattr__(self, "env_params", MappingProxyType(dict(self.env_params)))

    @property
    def is_sync(self) -> bool:
        return self.batch_size == self.num_envs

    def replace(self, **changes: Any) -> "PoolConfig":
        if "env_params" not in changes:
            changes["env_params"] = dict(self.env_params)
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> "PoolConfig":
        """Build a config; keys that are not config fields become env_params."""
        names = {f.name for f in dataclasses.fields(cls)}
        kwargs: dict[str, Any] = {}
        params = dict(values.get("env_params", {}))
        for key, value in values.items():
            if key == "env_params":
                continue
            if key in names:
                kwargs[key] = value
            else:
                params[key] = value
        kwargs["env_params"] = params
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: Union[str, os.PathLike]) -> "PoolConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_mapping(parse_kv(fh.read()))


def parse_kv(text: str) -> dict[str, Any]:
    """Parse ``key = value`` lines. ``#`` starts a comment.

    Values are converted to bool, int or float where they look like one and
    kept as strings otherwise.
    """
    out: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfig(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise InvalidConfig(f"line {lineno}: empty key")
        out[key] = _parse_scalar(value)
    return out


def _parse_scalar(value: str) -> Any:
    lowered = value.lower()
    if lowered in ("true", "yes", "on"):
        return True
    if lowered in ("false", "no", "off"):
        return False
    for conv in (int, float):
        try:
            return conv(value)
        except ValueError:
            pass
    return value


def _as_count(name: str, value: Any) -> int:
    try:
        as_int = int(value)
    except (TypeError, ValueError):
        raise InvalidConfig(f"{name} must be a positive integer, got {value!r}") from None
    if as_int != value or as_int < 1:
        raise InvalidConfig(f"{name} must be a positive integer, got {value!r}")
    return as_int


@dataclass(eq=False)
class StateRecord:
    """One environment's output for one reset or step."""

    env_id: int
    observation: np.ndarray
    reward: float
    done: bool
    truncated: bool
    elapsed_step: int

    def as_tuple(self) -> tuple:
        """Hashable, bitwise-exact view used for trajectory comparisons."""
        return (
            self.env_id,
            self.observation.tobytes(),
            float(self.reward),
            bool(self.done),
            bool(self.truncated),
            int(self.elapsed_step),
        )


def rng_for(seed: int, env_id: int) -> np.random.Generator:
    """Random stream for one environment instance.

    Philox-4x64 is counter based; its 128-bit key is ``(seed mod 2**64,
    env_id)`` and the counter starts at zero, so every (seed, env_id) pair has
    its own reproducible stream independent of thread scheduling.
    """
    if env_id < 0:
        raise ValueError(f"env_id must be non-negative, got {env_id}")
    key = np.array([int(seed) % (1 << 64), int(env_id)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def validate_action(spec: EnvSpec, action: Any) -> None:
    """Raise if ``action`` is not a member of ``spec``'s action space."""
    layout = spec.action_layout
    if isinstance(layout, Discrete):
        arr = np.asarray(action)
        if arr.ndim != 0:
            raise ActionShapeMismatch(f"discrete action must be a scalar, got shape {arr.shape}")
        if not (np.issubdtype(arr.dtype, np.integer) or arr.dtype == np.bool_):
            if not (np.issubdtype(arr.dtype, np.floating) and float(arr) == int(arr)):
                raise ActionOutOfRange(f"discrete action must be an integer, got {action!r}")
        value = int(arr)
        if not 0 <= value < layout.n:
            raise ActionOutOfRange(f"action {value} outside [0, {layout.n})")
        return
    arr = np.asarray(action, dtype=np.float64)
    if arr.shape != layout.shape:
        raise ActionShapeMismatch(f"expected action shape {layout.shape}, got {arr.shape}")
    flat = arr.ravel()
    if np.any(np.isnan(flat)) or np.any(flat < layout.low) or np.any(flat > layout.high):
        raise ActionOutOfRange(f"action {arr.tolist()} outside bounds [{layout.low}, {layout.high}]")


def validate_action_batch(spec: EnvSpec, actions: Any, count: int) -> np.ndarray:
    """Vectorized :func:`validate_action` for ``count`` actions.

    Returns the actions as int64 (discrete) or float64 ``(count, size)``
    (continuous).
    """
    layout = spec.action_layout
    arr = np.asarray(actions)
    if isinstance(layout, Discrete):
        if arr.shape != (count,):
            raise ActionShapeMismatch(f"expected {count} discrete actions, got shape {arr.shape}")
        if arr.dtype.kind == "f":
            if not np.all(np.floor(arr) == arr):
                raise ActionOutOfRange("discrete actions must be integers")
        elif arr.dtype.kind not in "iub":
            raise ActionOutOfRange(f"discrete actions must be integers, got dtype {arr.dtype}")
        out = arr.astype(np.int64)
        if count and (out.min() < 0 or out.max() >= layout.n):
            bad = out[(out < 0) | (out >= layout.n)][0]
            raise ActionOutOfRange(f"action {bad} outside [0, {layout.n})")
        return out
    arr = np.asarray(actions, dtype=np.float64)
    if arr.shape != (count, *layout.shape):
        raise ActionShapeMismatch(f"expected actions of shape {(count, *layout.shape)}, got {arr.shape}")
    flat = arr.reshape(count, -1)
    low = np.asarray(layout.low)
    high = np.asarray(layout.high)
    if np.any(np.isnan(flat)) or np.any(flat < low) or np.any(flat > high):
        raise ActionOutOfRange("continuous action outside bounds")
    return np.ascontiguousarray(flat)


class Env:
    """Base class for Python-implemented environments.

    Subclasses set ``spec`` (via the registry) and implement ``_reset()`` ->
    observation and ``_step(action)`` -> ``(observation, reward, terminated)``.
    Episode accounting (elapsed steps, truncation) lives here so every
    environment reports it the same way.
    """

    default_max_episode_steps = 1000

    def __init__(self, config: PoolConfig, env_id: int, spec: EnvSpec) -> None:
        self.env_id = env_id
        self.spec = spec
        self.rng = rng_for(config.seed, env_id)
        self.max_episode_steps = config.max_episode_steps or spec.default_max_episode_steps
        self.elapsed_step = 0
        self._obs_dtype = np.dtype(spec.observation_layout.dtype)

    def _reset(self) -> Any:
        raise NotImplementedError

    def _step(self, action: Any) -> tuple[Any, float, bool]:
        raise NotImplementedError

    def reset(self) -> StateRecord:
        obs = np.asarray(self._reset(), dtype=self._obs_dtype)
        self.elapsed_step = 0
        return StateRecord(self.env_id, obs, 0.0, False, False, 0)

    def step(self, action: Any) -> StateRecord:
        obs, reward, terminated = self._step(action)
        self.elapsed_step += 1
        truncated = self.elapsed_step >= self.max_episode_steps
        return StateRecord(
            self.env_id,
            np.asarray(obs, dtype=self._obs_dtype),
            float(reward),
            bool(terminated) or truncated,
            truncated,
            self.elapsed_step,
        )


SpecFactory = Callable[[PoolConfig], EnvSpec]
EnvFactory = Callable[[PoolConfig, int, EnvSpec], Any]


@dataclass(frozen=True)
class TaskEntry:
    spec_factory: SpecFactory
    env_factory: EnvFactory
    native_factory: Optional[EnvFactory] = None


_REGISTRY: dict[str, TaskEntry] = {}


def register(
    task_id: str,
    spec_factory: SpecFactory,
    env_factory: EnvFactory,
    *,
    native_factory: Optional[EnvFactory] = None,
    overwrite: bool = False,
) -> None:
    """Register a task.

    ``env_factory(config, env_id, spec)`` builds one instance exposing
    ``reset()`` and ``step(action)`` that return :class:`StateRecord`.
    ``native_factory``, when given, builds the compiled-kernel equivalent used
    by the native backend.
    """
    if task_id in _REGISTRY and not overwrite:
        raise ValueError(f"task {task_id!r} is already registered")
    _REGISTRY[task_id] = TaskEntry(spec_factory, env_factory, native_factory)


def unregister(task_id: str) -> None:
    _REGISTRY.pop(task_id, None)


def registered_tasks() -> list[str]:
    return sorted(_REGISTRY)


def _entry(task_id: str) -> TaskEntry:
    try:
        return _REGISTRY[task_id]
    except KeyError:
        known = ", ".join(sorted(_REGISTRY)) or "none"
        raise UnknownTask(f"unknown task {task_id!r} (registered: {known})") from None


def spec_new(config: PoolConfig) -> EnvSpec:
    """Look up the spec published by ``config.task_id``. Creates no instances."""
    if not isinstance(config, PoolConfig):
        raise InvalidConfig(f"expected a PoolConfig, got {type(config).__name__}")
    return _entry(config.task_id).spec_factory(config)


def make_env(config: PoolConfig, env_id: int, *, native: bool = False, spec: Optional[EnvSpec] = None) -> Any:
    """Construct instance ``env_id`` of ``config.task_id``."""
    entry = _entry(config.task_id)
    if spec is None:
        spec = entry.spec_factory(config)
    if native and entry.native_factory is not None:
        return entry.native_factory(config, env_id, spec)
    return entry.env_factory(config, env_id, spec)


def has_native(task_id: str) -> bool:
    return _entry(task_id).native_factory is not None


def make_envs(config: PoolConfig, *, native: bool = False) -> list[Any]:
    spec = spec_new(config)
    return [make_env(config, i, native=native, spec=spec) for i in range(config.num_envs)]


def check_record(spec: EnvSpec, record: StateRecord) -> None:
    """Assert-style conformance check used by tests and the Python worker path."""
    layout = spec.observation_layout
    obs = record.observation
    if obs.shape != layout.shape or obs.dtype != np.dtype(layout.dtype):
        raise ActionShapeMismatch(
            f"observation {obs.dtype}{obs.shape} does not match layout {layout.dtype}{layout.shape}"
        )


def batch_env_ids(env_ids: Sequence[int] | np.ndarray, num_envs: int) -> np.ndarray:
    ids = np.asarray(env_ids)
    if ids.ndim != 1:
        ids = ids.reshape(-1)
    if ids.dtype.kind not in "iu":
        raise ActionShapeMismatch(f"env_ids must be integers, got dtype {ids.dtype}")
    ids = ids.astype(np.int64, copy=False)
    if ids.size and (ids.min() < 0 or ids.max() >= num_envs):
        raise ProtocolViolation(f"env_id out of range [0, {num_envs})")
    return ids
