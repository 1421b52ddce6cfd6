"""CartPole, MountainCar and a synthetic Delay environment.

These are the pure-Python implementations. The compiled backend ships
kernels with the same arithmetic, operation for operation, so both produce
bitwise-identical trajectories for the same seed.

CartPole uses explicit Euler with the standard classic-control constants.
MountainCar follows the standard update with clamping. Delay waits for a
sampled duration and is meant for throughput and straggler experiments.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Any, Mapping

import numpy as np

from .env_core import ArrayLayout, Discrete, Env, EnvSpec, PoolConfig, register
from .errors import ActionOutOfRange, InvalidConfig

# CartPole constants
GRAVITY = 9.8
MASSCART = 1.0
MASSPOLE = 0.1
TOTAL_MASS = MASSCART + MASSPOLE
LENGTH = 0.5  # half the pole length
POLEMASS_LENGTH = MASSPOLE * LENGTH
FORCE_MAG = 10.0
TAU = 0.02
THETA_THRESHOLD = 12 * 2 * math.pi / 360
X_THRESHOLD = 2.4

# MountainCar constants
MC_MIN_POSITION = -1.2
MC_MAX_POSITION = 0.6
MC_MAX_SPEED = 0.07
MC_GOAL_POSITION = 0.5
MC_FORCE = 0.001
MC_GRAVITY = 0.0025

DIST_CONST, DIST_UNIFORM, DIST_LOGNORMAL = 0, 1, 2
_DIST_NAMES = {
    "const": DIST_CONST,
    "constant": DIST_CONST,
    "uniform": DIST_UNIFORM,
    "lognormal": DIST_LOGNORMAL,
}


def cartpole_spec(config: PoolConfig) -> EnvSpec:
    return EnvSpec("CartPole", ArrayLayout((4,), "float32"), Discrete(2), (0.0, 1.0), 500)


def mountaincar_spec(config: PoolConfig) -> EnvSpec:
    return EnvSpec("MountainCar", ArrayLayout((2,), "float32"), Discrete(3), (-1.0, 0.0), 200)


def delay_spec(config: PoolConfig) -> EnvSpec:
    return EnvSpec("Delay", ArrayLayout((1,), "float32"), Discrete(1), (0.0, 0.0), 1000)


def cartpole_dynamics(state: tuple[float, float, float, float], action: int) -> tuple[float, float, float, float]:
    """One explicit-Euler step of the cart-pole equations of motion."""
    x, x_dot, theta, theta_dot = state
    force = FORCE_MAG if action == 1 else -FORCE_MAG
    costheta = math.cos(theta)
    sintheta = math.sin(theta)
    temp = (force + POLEMASS_LENGTH * theta_dot * theta_dot * sintheta) / TOTAL_MASS
    thetaacc = (GRAVITY * sintheta - costheta * temp) / (
        LENGTH * (4.0 / 3.0 - MASSPOLE * costheta * costheta / TOTAL_MASS)
    )
    xacc = temp - POLEMASS_LENGTH * thetaacc * costheta / TOTAL_MASS
    return (
        x + TAU * x_dot,
        x_dot + TAU * xacc,
        theta + TAU * theta_dot,
        theta_dot + TAU * thetaacc,
    )


def cartpole_terminated(state: tuple[float, float, float, float]) -> bool:
    x, _, theta, _ = state
    return x < -X_THRESHOLD or x > X_THRESHOLD or theta < -THETA_THRESHOLD or theta > THETA_THRESHOLD


def mountaincar_dynamics(state: tuple[float, float], action: int) -> tuple[float, float]:
    position, velocity = state
    velocity += (action - 1) * MC_FORCE + math.cos(3 * position) * (-MC_GRAVITY)
    velocity = min(max(velocity, -MC_MAX_SPEED), MC_MAX_SPEED)
    position += velocity
    position = min(max(position, MC_MIN_POSITION), MC_MAX_POSITION)
    if position == MC_MIN_POSITION and velocity < 0:
        velocity = 0.0
    return position, velocity


def _check_discrete(action: Any, n: int) -> int:
    a = int(action)
    if a != action or not 0 <= a < n:
        raise ActionOutOfRange(f"action {action!r} outside [0, {n})")
    return a


class CartPoleEnv(Env):
    def __init__(self, config: PoolConfig, env_id: int, spec: EnvSpec) -> None:
        super().__init__(config, env_id, spec)
        self.state = (0.0, 0.0, 0.0, 0.0)

    def _reset(self):
        r = self.rng.random
        self.state = tuple(-0.05 + (0.05 - -0.05) * r() for _ in range(4))
        return self.state

    def _step(self, action):
        self.state = cartpole_dynamics(self.state, _check_discrete(action, 2))
        return self.state, 1.0, cartpole_terminated(self.state)


class MountainCarEnv(Env):
    def __init__(self, config: PoolConfig, env_id: int, spec: EnvSpec) -> None:
        super().__init__(config, env_id, spec)
        self.state = (-0.5, 0.0)

    def _reset(self):
        self.state = (-0.6 + (-0.4 - -0.6) * self.rng.random(), 0.0)
        return self.state

    def _step(self, action):
        self.state = mountaincar_dynamics(self.state, _check_discrete(action, 3))
        return self.state, -1.0, self.state[0] >= MC_GOAL_POSITION


@dataclass(frozen=True)
class DelayParams:
    """Step-duration distribution in microseconds.

    ``dist`` is one of ``DIST_CONST`` (duration ``lo``), ``DIST_UNIFORM``
    (``lo``..``hi``) or ``DIST_LOGNORMAL`` (``exp(mu + sigma*z)``).
    The first ``straggler_count`` env ids instead take a constant
    ``straggler_us``.
    """

    dist: int = DIST_CONST
    lo: float = 1000.0
    hi: float = 1000.0
    mu: float = math.log(500.0)
    sigma: float = 1.0
    busy_wait: bool = True
    straggler_count: int = 0
    straggler_us: float = 0.0

    @classmethod
    def from_env_params(cls, params: Mapping[str, Any]) -> "DelayParams":
        dist = params.get("dist", DIST_CONST)
        if isinstance(dist, str):
            try:
                dist = _DIST_NAMES[dist.lower()]
            except KeyError:
                raise InvalidConfig(f"unknown delay distribution {dist!r}") from None
        if dist not in (DIST_CONST, DIST_UNIFORM, DIST_LOGNORMAL):
            raise InvalidConfig(f"unknown delay distribution code {dist!r}")
        lo = float(params.get("lo", 1000.0))
        hi = float(params.get("hi", lo))
        out = cls(
            dist=int(dist),
            lo=lo,
            hi=hi,
            mu=float(params.get("mu", math.log(500.0))),
            sigma=float(params.get("sigma", 1.0)),
            busy_wait=bool(params.get("busy_wait", True)),
            straggler_count=int(params.get("straggler_count", 0)),
            straggler_us=float(params.get("straggler_us", 0.0)),
        )
        if out.lo < 0 or out.hi < out.lo or out.sigma < 0 or out.straggler_us < 0:
            raise InvalidConfig(f"invalid delay parameters {out}")
        return out

    def for_env(self, env_id: int) -> tuple[int, float, float]:
        """(dist, a, b) actually used by ``env_id``."""
        if env_id < self.straggler_count:
            return DIST_CONST, self.straggler_us, self.straggler_us
        if self.dist == DIST_LOGNORMAL:
            return DIST_LOGNORMAL, self.mu, self.sigma
        return self.dist, self.lo, self.hi


def sample_delay_us(dist: int, a: float, b: float, rng: np.random.Generator) -> float:
    if dist == DIST_CONST:
        return a
    if dist == DIST_UNIFORM:
        return a + (b - a) * rng.random()
    u1 = rng.random()
    u2 = rng.random()
    z = math.sqrt(-2.0 * math.log(1.0 - u1)) * math.cos(2.0 * math.pi * u2)
    return math.exp(a + b * z)


def wait_us(duration_us: float, busy_wait: bool) -> None:
    if duration_us <= 0:
        return
    if busy_wait:
        end = time.perf_counter_ns() + int(duration_us * 1000.0)
        while time.perf_counter_ns() < end:
            pass
    else:
        time.sleep(duration_us * 1e-6)


class DelayEnv(Env):
    def __init__(self, config: PoolConfig, env_id: int, spec: EnvSpec) -> None:
        super().__init__(config, env_id, spec)
        params = DelayParams.from_env_params(config.env_params)
        self.busy_wait = params.busy_wait
        self._dist, self._a, self._b = params.for_env(env_id)
        self.last_delay_us = 0.0
        self.total_delay_us = 0.0

    def _reset(self):
        return (0.0,)

    def _step(self, action):
        _check_discrete(action, 1)
        d = sample_delay_us(self._dist, self._a, self._b, self.rng)
        self.last_delay_us = d
        self.total_delay_us += d
        wait_us(d, self.busy_wait)
        return (float(self.elapsed_step + 1),), 0.0, False


def _native(name: str):
    def factory(config: PoolConfig, env_id: int, spec: EnvSpec):
        from . import _backend

        return getattr(_backend.native_module(), name)(config, env_id, spec)

    return factory


def register_builtins() -> None:
    from . import _backend

    native = _backend.native_available()
    register("CartPole", cartpole_spec, CartPoleEnv,
             native_factory=_native("CartPole") if native else None, overwrite=True)
    register("MountainCar", mountaincar_spec, MountainCarEnv,
             native_factory=_native("MountainCar") if native else None, overwrite=True)
    register("Delay", delay_spec, DelayEnv,
             native_factory=_native("Delay") if native else None, overwrite=True)
