import threading
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import action_schedule, forloop_trajectories, pool_trajectories, record_key

import vecpool
from vecpool import GymPool, Pool, make
from vecpool.env_core import ArrayLayout, Continuous, Env, EnvSpec, PoolConfig, make_envs
from vecpool.errors import (
    ActionOutOfRange,
    ActionShapeMismatch,
    AlreadyStarted,
    InvalidConfig,
    PoolClosed,
    ProtocolViolation,
    SyncOnly,
    UnknownTask,
)


def batch_key(batch):
    return [record_key(*r.as_tuple()) for r in batch.records()]


def test_make_sync_cartpole(backend):
    with make("CartPole", num_envs=100, batch_size=100, backend=backend) as pool:
        assert pool.observation_spec().shape == (4,)
        assert pool.action_spec().n == 2
        assert pool.is_sync and pool.num_envs == 100 and pool.batch_size == 100


def test_make_async_accepted(backend):
    with make("CartPole", num_envs=10, batch_size=9, backend=backend) as pool:
        assert not pool.is_sync


def test_make_errors():
    with pytest.raises(UnknownTask):
        make("NoSuchEnv")
    with pytest.raises(InvalidConfig):
        make("CartPole", num_envs=4, batch_size=5)
    with pytest.raises(TypeError):
        make(PoolConfig("CartPole"), num_envs=2)
    with pytest.raises(ValueError):
        make("CartPole", env_type="dm")


def test_make_from_config_and_extra_params(backend):
    with make("Delay", num_envs=2, lo=0, backend=backend) as pool:
        assert dict(pool.config.env_params) == {"lo": 0}
    with make(PoolConfig("CartPole", num_envs=3), backend=backend) as pool:
        assert pool.num_envs == 3


def test_async_reset_only_once(backend):
    with make("CartPole", num_envs=4, batch_size=2, backend=backend) as pool:
        pool.async_reset()
        with pytest.raises(AlreadyStarted):
            pool.async_reset()


def test_send_before_reset_rejected(backend):
    with make("CartPole", num_envs=4, batch_size=2, backend=backend) as pool:
        with pytest.raises(ProtocolViolation):
            pool.send([0], [0])


def test_send_validation_is_atomic(backend):
    with make("CartPole", num_envs=4, batch_size=4, backend=backend) as pool:
        pool.async_reset()
        pool.recv(timeout=5)
        for actions, ids, exc in [
            ([0, 1], [0, 0], ProtocolViolation),
            ([0, 5], [0, 1], ActionOutOfRange),
            ([0, 1, 1], [0, 1], ActionShapeMismatch),
            ([0], [4], ProtocolViolation),
        ]:
            with pytest.raises(exc):
                pool.send(actions, ids)
            assert not pool.in_flight.any()
        assert pool.sent == 4
        pool.send([1], [2])
        with pytest.raises(ProtocolViolation):
            pool.send([0, 1], [1, 2])  # 2 is in flight
        assert pool.in_flight.tolist() == [False, False, True, False]


def test_async_recv_returns_batch_size_distinct(backend):
    with make("CartPole", num_envs=10, batch_size=9, num_threads=3, backend=backend) as pool:
        pool.async_reset()
        batch = pool.recv(timeout=5)
        assert len(batch) == 9 and len(set(batch.env_ids.tolist())) == 9
        assert batch.observations.shape == (9, 4) and batch.observations.dtype == np.float32
        assert (batch.elapsed_steps == 0).all() and not batch.dones.any()


def test_sync_step_returns_permutation(backend):
    with make("CartPole", num_envs=8, num_threads=4, backend=backend) as pool:
        pool.reset(timeout=5)
        batch = pool.step(np.zeros(8, np.int64), timeout=5)
        assert sorted(batch.env_ids.tolist()) == list(range(8))
        assert (batch.elapsed_steps == 1).all()


def test_send_returns_while_workers_busy(backend):
    with make("Delay", num_envs=4, lo=100_000, busy_wait=False, num_threads=4, backend=backend) as pool:
        pool.reset(timeout=5)
        t = time.perf_counter()
        pool.send(np.zeros(4, np.int64), np.arange(4))
        assert time.perf_counter() - t < 0.05
        t = time.perf_counter()
        pool.recv(timeout=5)
        assert time.perf_counter() - t >= 0.05


def test_recv_returns_fast_envs_while_one_is_slow(backend):
    # env 0 takes 300 ms per step; with M = N - 1 the other three keep cycling
    with make("Delay", num_envs=4, batch_size=3, lo=0, straggler_count=1, straggler_us=300_000,
              busy_wait=False, num_threads=4, backend=backend) as pool:
        pool.async_reset()
        batch = pool.recv(timeout=5)
        while 0 not in batch.env_ids.tolist():  # resets are instant for every env
            pool.send(np.zeros(3, np.int64), batch.env_ids)
            batch = pool.recv(timeout=5)
        pool.send(np.zeros(3, np.int64), batch.env_ids)
        t = time.perf_counter()
        batch = pool.recv(timeout=5)
        assert time.perf_counter() - t < 0.2
        assert sorted(batch.env_ids.tolist()) == [1, 2, 3]
        assert pool.in_flight.tolist() == [True, False, False, False]


def test_recv_timeout(backend):
    with make("CartPole", num_envs=2, batch_size=1, backend=backend) as pool:
        pool.async_reset()
        pool.recv(timeout=5)
        pool.recv(timeout=5)
        with pytest.raises(TimeoutError):
            pool.recv(timeout=0.05)


@pytest.mark.parametrize("inline", [True, False])
def test_step_equals_send_recv(backend, inline):
    schedule = action_schedule(3, 60, 4, 2)

    def run(use_step):
        with make("CartPole", num_envs=4, seed=3, order_by_env_id=True, backend=backend) as pool:
            pool._dispatch.inline_single = inline
            out = [batch_key(pool.reset(timeout=5))]
            for actions in schedule:
                if use_step:
                    out.append(batch_key(pool.step(actions, timeout=5)))
                else:
                    pool.send(actions, np.arange(4))
                    out.append(batch_key(pool.recv(timeout=5)))
        return out

    assert run(True) == run(False)


def test_single_env_inline_matches_queued(backend):
    schedule = action_schedule(11, 300, 1, 2)
    results = []
    for inline in (True, False):
        with make("CartPole", num_envs=1, seed=11, backend=backend) as pool:
            pool._dispatch.inline_single = inline
            out = [batch_key(pool.reset(timeout=5))]
            out += [batch_key(pool.step(a, timeout=5)) for a in schedule]
            results.append(out)
    assert results[0] == results[1]


def test_reset_rules(backend):
    with make("CartPole", num_envs=4, batch_size=2, backend=backend) as pool:
        with pytest.raises(SyncOnly):
            pool.reset()
    with make("CartPole", num_envs=6, seed=1, backend=backend) as pool:
        batch = pool.reset(timeout=5)
        assert batch.env_ids.tolist() == list(range(6))
        assert np.all(np.abs(batch.observations) <= 0.05)
        with pytest.raises(AlreadyStarted):
            pool.reset()


def test_ordered_mode(backend):
    with make("Delay", num_envs=8, num_threads=4, order_by_env_id=True, dist="uniform", lo=0, hi=500,
              busy_wait=False, backend=backend) as pool:
        pool.reset(timeout=5)
        for _ in range(20):
            assert pool.step(np.zeros(8, np.int64), timeout=5).env_ids.tolist() == list(range(8))


def test_auto_reset_sequence(backend):
    with make("CartPole", num_envs=1, backend=backend) as pool:
        pool.reset(timeout=5)
        steps = 0
        while True:
            batch = pool.step([1], timeout=5)
            steps += 1
            if batch.dones[0]:
                break
            assert steps < 500
        assert batch.elapsed_steps[0] == steps and not batch.truncateds[0]
        batch = pool.step([0], timeout=5)  # action ignored, env reset
        assert batch.elapsed_steps[0] == 0 and not batch.dones[0] and batch.rewards[0] == 0.0
        assert np.all(np.abs(batch.observations) <= 0.05)
        assert pool.step([0], timeout=5).elapsed_steps[0] == 1


def test_truncation_then_reset(backend):
    with make("Delay", num_envs=2, max_episode_steps=3, lo=0, backend=backend, order_by_env_id=True) as pool:
        pool.reset(timeout=5)
        seen = [pool.step([0, 0], timeout=5) for _ in range(4)]
        assert [b.elapsed_steps.tolist() for b in seen] == [[1, 1], [2, 2], [3, 3], [0, 0]]
        assert seen[2].truncateds.all() and seen[2].dones.all()


def test_pool_matches_forloop(backend):
    cfg = PoolConfig("MountainCar", num_envs=6, num_threads=3, seed=5)
    schedule = action_schedule(5, 250, 6, 3)
    want = forloop_trajectories(make_envs(cfg), schedule)
    with Pool(cfg, backend=backend) as pool:
        assert pool_trajectories(pool, schedule) == want


def test_gym_view(backend):
    with make("CartPole", num_envs=5, num_threads=2, env_type="gym", backend=backend) as env:
        assert isinstance(env, GymPool)
        obs = env.reset()
        assert obs.shape == (5, 4)
        obs, rew, done, info = env.step(np.ones(5, np.int64))
        assert info["env_id"].tolist() == list(range(5))
        assert rew.tolist() == [1.0] * 5 and info["elapsed_step"].tolist() == [1] * 5
    with make("CartPole", num_envs=4, batch_size=2, env_type="gym", backend=backend) as env:
        with pytest.raises(SyncOnly):
            env.reset()


def test_gym_view_async_loop(backend):
    with make("CartPole", num_envs=10, batch_size=9, num_threads=4, env_type="gym", backend=backend) as env:
        env.async_reset()
        for _ in range(20):
            obs, rew, done, info = env.recv(timeout=5)
            env_id = info["env_id"]
            assert obs.shape == (9, 4) and len(set(env_id.tolist())) == 9
            env.send(np.ones(len(env_id), np.int64), env_id)


def test_closed_pool_rejects_calls(backend):
    pool = make("CartPole", num_envs=2, backend=backend)
    pool.reset(timeout=5)
    pool.close()
    for call in (lambda: pool.send([0, 0], [0, 1]), lambda: pool.recv(timeout=1), pool.reset, pool.async_reset):
        with pytest.raises(PoolClosed):
            call()


def test_close_wakes_blocked_recv(backend):
    pool = make("Delay", num_envs=2, batch_size=1, lo=200_000, busy_wait=False, backend=backend)
    pool.async_reset()
    pool.recv(timeout=5)
    pool.recv(timeout=5)
    errors = []  # nothing in flight, so only close() can end the wait

    def wait():
        try:
            pool.recv()
        except PoolClosed as exc:
            errors.append(exc)

    t = threading.Thread(target=wait)
    t.start()
    time.sleep(0.02)
    pool.close()
    t.join(5)
    assert not t.is_alive()
    assert len(errors) == 1


def test_repr_and_specs(backend):
    with make("MountainCar", num_envs=3, backend=backend) as pool:
        assert "MountainCar" in repr(pool) and repr(backend) in repr(pool)
        obs, act = pool.specs()
        assert obs.shape == (2,) and act.n == 3


class PointEnv(Env):
    """Continuous 2-d point that moves by the action each step."""

    def _reset(self):
        self.pos = np.zeros(2)
        return self.pos

    def _step(self, action):
        action = np.asarray(action, np.float64)
        assert action.shape == (2,)
        self.pos = self.pos + action
        return self.pos, -float(np.abs(self.pos).sum()), False


def point_spec(config):
    return EnvSpec("Point", ArrayLayout((2,), "float32"), Continuous((2,), -1.0, 1.0), (-np.inf, 0.0), 50)


def test_continuous_python_env(backend, register_task):
    task = register_task("Point", point_spec, PointEnv)
    with make(task, num_envs=3, num_threads=2, order_by_env_id=True, backend=backend) as pool:
        pool.reset(timeout=5)
        actions = np.array([[0.5, -0.5], [1.0, 1.0], [0.0, 0.25]])
        pool.step(actions, timeout=5)
        batch = pool.step(actions, timeout=5)
        np.testing.assert_allclose(batch.observations, 2 * actions)
        with pytest.raises(ActionOutOfRange):
            pool.step(actions * 3)
        with pytest.raises(ActionShapeMismatch):
            pool.step(actions[:, :1])


@settings(max_examples=15, deadline=None)
@given(
    n=st.integers(2, 8),
    data=st.data(),
)
def test_async_routing_property(n, data):
    """Each recv returns M distinct ids, none of them in flight afterwards,
    and every id comes back exactly as often as it was sent."""
    m = data.draw(st.integers(1, n - 1))
    threads = data.draw(st.integers(1, 4))
    backend = data.draw(st.sampled_from(vecpool.available_backends()))
    with make("Delay", num_envs=n, batch_size=m, num_threads=threads, dist="uniform", lo=0, hi=200,
              busy_wait=False, backend=backend) as pool:
        pool.async_reset()
        sent = np.ones(n, np.int64)
        got = np.zeros(n, np.int64)
        for _ in range(30):
            batch = pool.recv(timeout=5)
            ids = batch.env_ids
            assert len(set(ids.tolist())) == m
            assert not pool.in_flight[ids].any()
            got[ids] += 1
            pool.send(np.zeros(m, np.int64), ids)
            sent[ids] += 1
        assert (sent - got).sum() == pool.in_flight.sum() == n
        assert ((sent - got) == 1).all()


def test_slow_env_absent_from_first_step_batch(backend):
    # env 0 steps in 100 ms, envs 1..9 in 1 ms, M = 5
    with make("Delay", num_envs=10, batch_size=5, num_threads=10, lo=1000, straggler_count=1,
              straggler_us=100_000, busy_wait=False, backend=backend) as pool:
        pool.async_reset()
        pool.recv(timeout=5)
        pool.recv(timeout=5)
        pool.send(np.zeros(10, np.int64), np.arange(10))
        batch = pool.recv(timeout=5)
        assert 0 not in batch.env_ids.tolist() and len(set(batch.env_ids.tolist())) == 5


def test_async_step_returns_batch_size(backend):
    with make("CartPole", num_envs=10, batch_size=9, num_threads=4, backend=backend) as pool:
        pool.async_reset()
        batch = pool.recv(timeout=5)
        for _ in range(50):
            batch = pool.step(np.ones(9, np.int64), batch.env_ids, timeout=5)
            assert len(batch) == 9 and len(set(batch.env_ids.tolist())) == 9


def test_separate_sender_and_receiver_threads(backend):
    import queue

    n, m, cycles = 8, 4, 500
    handoff = queue.Queue()
    with make("CartPole", num_envs=n, batch_size=m, num_threads=4, backend=backend) as pool:
        pool.async_reset()
        counts = np.zeros(n, np.int64)

        def receiver():
            for _ in range(cycles):
                batch = pool.recv(timeout=5)
                counts[batch.env_ids] += 1
                handoff.put(batch.env_ids)
            handoff.put(None)

        def sender():
            while (ids := handoff.get()) is not None:
                pool.send(np.zeros(len(ids), np.int64), ids)

        threads = [threading.Thread(target=receiver), threading.Thread(target=sender)]
        for t in threads:
            t.start()
        for t in threads:
            t.join(30)
            assert not t.is_alive()
        assert counts.sum() == cycles * m


def test_concurrent_recv_callers_get_distinct_batches(backend):
    with make("CartPole", num_envs=8, batch_size=2, num_threads=2, backend=backend) as pool:
        pool.async_reset()
        got = []
        lock = threading.Lock()

        def take():
            b = pool.recv(timeout=5)
            with lock:
                got.append(b)

        threads = [threading.Thread(target=take) for _ in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join(10)
        assert sorted(e for b in got for e in b.env_ids.tolist()) == list(range(8))
        assert len({b.generation for b in got}) == 4


@pytest.mark.parametrize("task,n,shape", [("Delay", 1, (1,)), ("MountainCar", 3, (2,)), ("CartPole", 2, (4,))])
def test_builtin_specs(backend, task, n, shape):
    with make(task, num_envs=1, backend=backend) as pool:
        obs, act = pool.specs()
        assert act.n == n and obs.shape == shape and obs.dtype == "float32"
