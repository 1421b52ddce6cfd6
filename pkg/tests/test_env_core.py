import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import RNG_GOLDEN, philox_doubles

import vecpool
from vecpool.env_core import (
    ArrayLayout,
    Continuous,
    Discrete,
    Env,
    EnvSpec,
    PoolConfig,
    batch_env_ids,
    check_record,
    make_env,
    parse_kv,
    register,
    registered_tasks,
    rng_for,
    spec_new,
    unregister,
    validate_action,
    validate_action_batch,
)
from vecpool.errors import (
    ActionOutOfRange,
    ActionShapeMismatch,
    InvalidConfig,
    ProtocolViolation,
    UnknownTask,
)


def test_cartpole_spec():
    spec = spec_new(PoolConfig("CartPole", num_envs=100, batch_size=100))
    assert spec.observation_layout == ArrayLayout((4,), "float32")
    assert spec.action_layout == Discrete(2)


def test_async_config_accepted():
    cfg = PoolConfig("CartPole", num_envs=10, batch_size=9)
    assert not cfg.is_sync
    spec_new(cfg)


def test_batch_larger_than_envs_rejected():
    with pytest.raises(InvalidConfig):
        PoolConfig("CartPole", num_envs=4, batch_size=5)


@pytest.mark.parametrize("field", ["num_envs", "batch_size", "num_threads", "max_episode_steps"])
def test_zero_counts_rejected(field):
    with pytest.raises(InvalidConfig):
        PoolConfig("CartPole", **{"num_envs": 4, field: 0})


def test_config_defaults_and_immutability():
    cfg = PoolConfig("CartPole", num_envs=6, env_params={"a": 1})
    assert cfg.batch_size == 6 and cfg.is_sync
    assert cfg.num_threads >= 1
    with pytest.raises(Exception):
        cfg.num_envs = 3
    with pytest.raises(TypeError):
        cfg.env_params["a"] = 2


def test_order_flag_needs_sync():
    with pytest.raises(InvalidConfig):
        PoolConfig("CartPole", num_envs=4, batch_size=2, order_by_env_id=True)


def test_unknown_task():
    with pytest.raises(UnknownTask):
        spec_new(PoolConfig("NoSuchEnv"))
    assert {"CartPole", "MountainCar", "Delay"} <= set(registered_tasks())


def test_parse_kv_and_from_file(tmp_path):
    text = "task_id = Delay  # comment\nnum_envs=8\nbatch_size = 6\nlo = 250.5\nbusy_wait = false\n\n"
    assert parse_kv(text) == {"task_id": "Delay", "num_envs": 8, "batch_size": 6, "lo": 250.5, "busy_wait": False}
    path = tmp_path / "pool.cfg"
    path.write_text(text)
    cfg = PoolConfig.from_file(path)
    assert (cfg.task_id, cfg.num_envs, cfg.batch_size) == ("Delay", 8, 6)
    assert dict(cfg.env_params) == {"lo": 250.5, "busy_wait": False}


def test_parse_kv_rejects_garbage():
    with pytest.raises(InvalidConfig):
        parse_kv("just words")


def test_validate_discrete():
    spec = spec_new(PoolConfig("CartPole"))
    validate_action(spec, 1)
    with pytest.raises(ActionOutOfRange):
        validate_action(spec, 2)
    with pytest.raises(ActionOutOfRange):
        validate_action(spec, -1)
    with pytest.raises(ActionShapeMismatch):
        validate_action(spec, [0, 1])


def test_validate_continuous():
    spec = EnvSpec("c", ArrayLayout((3,), "float32"), Continuous((3,), -1.0, 1.0), (0.0, 1.0), 10)
    validate_action(spec, [0, 0, 0])
    with pytest.raises(ActionOutOfRange):
        validate_action(spec, [0, 2, 0])
    with pytest.raises(ActionShapeMismatch):
        validate_action(spec, [0, 0])
    out = validate_action_batch(spec, np.zeros((4, 3)), 4)
    assert out.shape == (4, 3) and out.dtype == np.float64


def test_layout_invariants():
    with pytest.raises(InvalidConfig):
        Discrete(0)
    with pytest.raises(InvalidConfig):
        Continuous((2,), [0.0, 1.0], [1.0, 0.0])
    with pytest.raises(InvalidConfig):
        ArrayLayout((2,), "float64")


def test_batch_env_ids():
    assert batch_env_ids([3, 1], 4).tolist() == [3, 1]
    with pytest.raises(ProtocolViolation):
        batch_env_ids([4], 4)
    with pytest.raises(ActionShapeMismatch):
        batch_env_ids([0.5], 4)


def test_rng_deterministic():
    a = rng_for(7, 0).random(10)
    b = rng_for(7, 0).random(10)
    assert a.tolist() == b.tolist()


@pytest.mark.parametrize("key", sorted(RNG_GOLDEN))
def test_rng_golden(key):
    assert rng_for(*key).random(3).tolist() == RNG_GOLDEN[key]
    # golden values are themselves the raw Philox words turned into doubles
    assert philox_doubles(*key, 3) == RNG_GOLDEN[key]


def test_rng_streams_differ():
    assert RNG_GOLDEN[(7, 0)][0] != RNG_GOLDEN[(7, 1)][0]
    assert RNG_GOLDEN[(7, 0)][0] != RNG_GOLDEN[(8, 0)][0]


def test_rng_large_seed():
    rng_for(2**64 - 1, 3).random()
    assert rng_for(-1, 0).random() == rng_for(2**64 - 1, 0).random()


class CountingEnv(Env):
    def _reset(self):
        return [0]

    def _step(self, action):
        return [self.elapsed_step + 1], 1.0, False


def counting_spec(config):
    return EnvSpec("Counting", ArrayLayout((1,), "int32"), Discrete(1), (0.0, 1.0), 5)


@pytest.fixture
def counting_task():
    register("Counting", counting_spec, CountingEnv, overwrite=True)
    yield "Counting"
    unregister("Counting")


def test_register_twice_needs_overwrite(counting_task):
    with pytest.raises(ValueError):
        register(counting_task, counting_spec, CountingEnv)


def test_env_episode_accounting(counting_task):
    env = make_env(PoolConfig(counting_task), 0)
    r = env.reset()
    assert (r.reward, r.done, r.truncated, r.elapsed_step) == (0.0, False, False, 0)
    assert r.observation.dtype == np.int32
    for k in range(1, 6):
        r = env.step(0)
        assert r.elapsed_step == k
    assert r.truncated and r.done
    assert env.reset().elapsed_step == 0


def test_max_episode_steps_override(counting_task):
    env = make_env(PoolConfig(counting_task, max_episode_steps=2), 0)
    env.reset()
    assert not env.step(0).done
    assert env.step(0).truncated


def test_check_record():
    spec = spec_new(PoolConfig("CartPole"))
    env = make_env(PoolConfig("CartPole"), 0)
    check_record(spec, env.reset())
    bad = env.reset()
    bad.observation = bad.observation.astype(np.float64)
    with pytest.raises(ActionShapeMismatch):
        check_record(spec, bad)


@pytest.mark.parametrize("task", ["CartPole", "MountainCar", "Delay"])
@pytest.mark.parametrize("native", [False, True])
@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32), actions=st.lists(st.integers(0, 2), max_size=60))
def test_records_conform_and_elapsed_counts(task, native, seed, actions):
    if native and "native" not in vecpool.available_backends():
        pytest.skip("compiled core not built")
    cfg = PoolConfig(task, seed=seed, env_params={"lo": 0})
    spec = spec_new(cfg)
    env = make_env(cfg, 0, native=native)
    r = env.reset()
    check_record(spec, r)
    expected = 0
    for a in actions:
        a %= spec.action_layout.n
        if r.done:
            r = env.reset()
            expected = 0
        else:
            r = env.step(a)
            expected += 1
        check_record(spec, r)
        assert r.elapsed_step == expected
        assert r.elapsed_step <= env.max_episode_steps


@pytest.mark.parametrize("task", ["CartPole", "MountainCar"])
@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**63), actions=st.lists(st.integers(0, 2), max_size=80))
def test_replay_reproduces_trajectory(task, seed, actions):
    cfg = PoolConfig(task, seed=seed)
    n = spec_new(cfg).action_layout.n

    def run():
        env = make_env(cfg, 3)
        out = [env.reset().as_tuple()]
        for a in actions:
            r = env.step(a % n)
            out.append(r.as_tuple())
            if r.done:
                out.append(env.reset().as_tuple())
        return out

    assert run() == run()
