import threading
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vecpool.errors import DoubleMark, RingExhausted
from vecpool.state_queue import num_blocks


def write(handle, env_id, value=0.0):
    handle.write(env_id, [value], float(value), False, False, env_id)


@pytest.mark.parametrize("n,m,b", [(10, 3, 5), (4, 4, 2), (1, 1, 2), (16, 12, 3), (32, 16, 3)])
def test_block_count(impl, n, m, b):
    assert num_blocks(n, m) == b
    assert impl.StateQueue(m, n).num_blocks == b


def test_bad_sizes_rejected(impl):
    with pytest.raises(ValueError):
        impl.StateQueue(5, 4)
    with pytest.raises(ValueError):
        impl.StateQueue(0, 4)


@settings(max_examples=100, deadline=None)
@given(m=st.integers(1, 8), extra=st.integers(0, 20), count=st.integers(1, 60))
def test_slot_arithmetic(m, extra, count):
    from vecpool import _backend

    for name in _backend.available():
        q = _backend.get(name).StateQueue(m, m + extra)
        b = q.num_blocks
        for c in range(count):
            if c // m >= b:
                break  # would wrap onto an unconsumed generation
            h = q.allocate()
            assert (h.generation, h.offset) == divmod(c, m)


def test_counter_seven_lands_in_generation_two(impl):
    q = impl.StateQueue(3, 10)
    handles = [q.allocate() for _ in range(8)]
    assert (handles[7].generation, handles[7].offset) == (2, 1)
    assert handles[7].block is not handles[0].block


def test_ready_only_after_all_slots_marked(impl):
    q = impl.StateQueue(3, 10)
    hs = [q.allocate() for _ in range(3)]
    for i in (2, 0):
        write(hs[i], i)
        q.mark_written(hs[i])
    with pytest.raises(TimeoutError):
        q.wait_ready(timeout=0.05)
    write(hs[1], 1)
    q.mark_written(hs[1])
    batch = q.wait_ready(timeout=1)
    assert batch.generation == 0 and batch.env_ids.tolist() == [0, 1, 2]
    assert batch.observations.shape == (3, 1)


def test_batch_size_one(impl):
    q = impl.StateQueue(1, 3)
    for i in range(10):
        h = q.allocate()
        write(h, i % 3, i)
        q.mark_written(h)
        b = q.wait_ready(timeout=1)
        assert b.generation == i and b.rewards.tolist() == [float(i)]


def test_oldest_block_first(impl):
    q = impl.StateQueue(2, 4)
    hs = [q.allocate() for _ in range(4)]
    for h in reversed(hs):  # finish generation 1 before generation 0
        write(h, h.generation * 2 + h.offset)
        q.mark_written(h)
    assert q.ready_count == 2
    assert q.wait_ready(timeout=1).env_ids.tolist() == [0, 1]
    assert q.wait_ready(timeout=1).env_ids.tolist() == [2, 3]


def test_double_mark_detected(impl):
    q = impl.StateQueue(2, 4)
    h = q.allocate()
    q.mark_written(h)
    with pytest.raises(DoubleMark):
        q.mark_written(h)


def test_stale_handle_rejected(impl):
    q = impl.StateQueue(1, 1)
    h = q.allocate()
    q.mark_written(h)
    q.wait_ready(timeout=1)
    with pytest.raises(DoubleMark):
        q.mark_written(h)


def test_ring_exhaustion_detected(impl):
    q = impl.StateQueue(1, 1)  # two descriptors
    q.allocate()
    q.allocate()
    with pytest.raises(RingExhausted):
        q.allocate()


def test_shutdown_wakes_waiter_and_discards_partial(impl):
    q = impl.StateQueue(3, 6)
    h = q.allocate()
    q.mark_written(h)
    got = []
    t = threading.Thread(target=lambda: got.append(q.wait_ready()))
    t.start()
    t.join(0.05)
    assert t.is_alive()
    q.shutdown()
    t.join(5)
    assert got == [None]
    assert q.wait_ready(timeout=1) is None


def test_shutdown_still_delivers_full_blocks(impl):
    q = impl.StateQueue(1, 2)
    h = q.allocate()
    write(h, 1)
    q.mark_written(h)
    q.shutdown()
    q.shutdown()
    assert q.wait_ready(timeout=1).env_ids.tolist() == [1]
    assert q.wait_ready(timeout=1) is None


def test_handoff_is_zero_copy(impl):
    q = impl.StateQueue(2, 4, obs_shape=(3,))
    hs = [q.allocate() for _ in range(2)]
    obs_buffer = hs[0].block.observations
    for h in hs:
        h.write(h.offset, [-1.0, 0.0, 1.0], 0.0, False, False, 0)
    # sentinel written straight into the buffer after the normal write
    obs_buffer[1, 2] = 12345.5
    for h in hs:
        q.mark_written(h)
    batch = q.wait_ready(timeout=1)
    assert batch.observations is obs_buffer
    assert batch.observations[1, 2] == 12345.5


def test_handed_over_arrays_never_reused(impl):
    q = impl.StateQueue(1, 1)
    seen = []
    for i in range(6):
        h = q.allocate()
        write(h, 0, i)
        q.mark_written(h)
        b = q.wait_ready(timeout=1)
        seen.append(b)
    assert [b.rewards[0] for b in seen] == [0.0, 1.0, 2.0, 3.0, 4.0, 5.0]
    ids = {id(b.observations) for b in seen}
    assert len(ids) == len(seen)


def test_obs_layout_follows_config(impl):
    q = impl.StateQueue(2, 2, obs_shape=(2, 3), obs_dtype="int32")
    h = q.allocate()
    assert h.block.observations.shape == (2, 2, 3)
    assert h.block.observations.dtype == np.int32


def test_concurrent_writers_get_unique_slots(impl):
    m, n, writers, per = 4, 16, 4, 500
    q = impl.StateQueue(m, n)
    total = writers * per
    batches = []

    # writers may run at most B-1 blocks ahead of the consumer
    room = threading.Semaphore(m * (q.num_blocks - 1))

    def produce_throttled(w):
        for i in range(per):
            room.acquire()
            h = q.allocate()
            write(h, w, w * per + i)
            q.mark_written(h)

    def consume_throttled():
        while len(batches) * m < total:
            batches.append(q.wait_ready(timeout=10))
            for _ in range(m):
                room.release()

    c = threading.Thread(target=consume_throttled)
    ps = [threading.Thread(target=produce_throttled, args=(w,)) for w in range(writers)]
    c.start()
    for t in ps:
        t.start()
    for t in ps + [c]:
        t.join(30)
        assert not t.is_alive()
    assert [b.generation for b in batches] == list(range(total // m))
    assert sorted(r for b in batches for r in b.rewards.tolist()) == list(map(float, range(total)))


def test_multiple_consumers_get_each_block_once(impl):
    m, n, blocks = 2, 8, 400
    q = impl.StateQueue(m, n)
    got = [[] for _ in range(3)]

    def consume(c):
        while (b := q.wait_ready()) is not None:
            got[c].append(b.generation)

    cs = [threading.Thread(target=consume, args=(c,)) for c in range(3)]
    for t in cs:
        t.start()
    produced = 0
    for _ in range(blocks * m):
        # stay within the ring, and only reuse descriptors whose hand-over finished
        while True:
            done = sum(len(c) for c in got)
            if q.consumed == done and q.allocated - done * m < m * (q.num_blocks - 1):
                break
            time.sleep(1e-4)
        h = q.allocate()
        write(h, 0, produced)
        q.mark_written(h)
        produced += 1
    while q.consumed < blocks:
        time.sleep(1e-3)
    q.shutdown()
    for t in cs:
        t.join(10)
        assert not t.is_alive()
    assert sorted(g for c in got for g in c) == list(range(blocks))
