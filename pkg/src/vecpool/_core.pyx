# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot paths: both queues, the worker loop, send/recv dispatch and
the builtin environment kernels.

Worker threads run native environments without holding the GIL; Python
environments are called with the GIL re-acquired per message.
"""

import numpy as np

cimport numpy as cnp
from cpython.exc cimport PyErr_CheckSignals
from cpython.pycapsule cimport PyCapsule_GetPointer
from libc.math cimport M_PI, cos, exp, log, sin, sqrt
from libc.stdint cimport int32_t, int64_t, uint8_t
from libc.stdlib cimport calloc, free, malloc
from libc.string cimport memcpy, memset
from numpy.random cimport bitgen_t

from ._types import BlockView, SlotHandle, StateBatch
from .builtin_envs import DelayParams
from .env_core import Discrete, StateRecord, rng_for, validate_action_batch
from .errors import (
    ActionOutOfRange,
    ActionShapeMismatch,
    DoubleMark,
    PoolClosed,
    PoolFailed,
    ProtocolViolation,
    QueueOverflow,
    RingExhausted,
)

cnp.import_array()


cdef extern from "<semaphore.h>" nogil:
    ctypedef struct sem_t:
        pass
    int sem_init(sem_t*, int, unsigned int)
    int sem_destroy(sem_t*)
    int sem_post(sem_t*)
    int sem_trywait(sem_t*)


cdef extern from "_vp_sync.h" nogil:
    int64_t vp_load(int64_t*)
    void vp_store(int64_t*, int64_t)
    int64_t vp_fetch_add(int64_t*, int64_t)
    bint vp_cas(int64_t*, int64_t, int64_t)
    uint8_t vp_exchange_u8(uint8_t*, uint8_t)
    void vp_relax()
    int64_t vp_now_ns()
    void vp_sem_wait(sem_t*)
    int vp_sem_wait_ns(sem_t*, int64_t)
    int vp_sem_value(sem_t*)
    void vp_spin_ns(int64_t)
    void vp_sleep_ns(int64_t)


cdef enum:
    SIGNAL_SLICE_NS = 50000000


cdef bint wait_token(sem_t* sem, object timeout) except -1:
    """Take one semaphore token with the GIL released.

    Blocks in slices so Ctrl-C still reaches the main thread. Returns False on
    timeout.
    """
    cdef int rc
    cdef int64_t deadline = 0, step
    if sem_trywait(sem) == 0:
        return True
    if timeout is not None:
        deadline = vp_now_ns() + <int64_t>(float(timeout) * 1e9)
    while True:
        step = SIGNAL_SLICE_NS
        if timeout is not None:
            step = deadline - vp_now_ns()
            if step <= 0:
                return sem_trywait(sem) == 0
            if step > SIGNAL_SLICE_NS:
                step = SIGNAL_SLICE_NS
        with nogil:
            rc = vp_sem_wait_ns(sem, step)
        if rc == 0:
            return True
        PyErr_CheckSignals()


# --------------------------------------------------------------------------
# ActionQueue: bounded MPMC ring of 2N cells with per-cell sequence stamps.

ctypedef struct Cell:
    int64_t seq
    int64_t value


cdef class ActionQueue:
    """Ring of ``2 * num_envs`` message words.

    ``head``/``tail`` are monotone counters claimed atomically; cell index is
    counter mod capacity. A cell's sequence stamp equals its position when it
    is free for that lap and position+1 once the producer has published, so
    a consumer never reads a half-written cell after wrap-around. A counting
    semaphore is the only blocking point (consumers waiting on empty).
    """

    cdef Cell* cells
    cdef int64_t cap
    cdef int64_t head_
    cdef int64_t tail_
    cdef int64_t closed_
    cdef sem_t items
    cdef bint sem_ready

    def __cinit__(self, Py_ssize_t num_envs):
        cdef Py_ssize_t i
        if num_envs < 1:
            raise ValueError(f"num_envs must be >= 1, got {num_envs}")
        self.cap = 2 * num_envs
        self.cells = <Cell*>malloc(self.cap * sizeof(Cell))
        if self.cells == NULL:
            raise MemoryError()
        for i in range(self.cap):
            self.cells[i].seq = i
            self.cells[i].value = 0
        if sem_init(&self.items, 0, 0) != 0:
            raise OSError("sem_init failed")
        self.sem_ready = True

    def __dealloc__(self):
        if self.sem_ready:
            sem_destroy(&self.items)
        free(self.cells)

    @property
    def capacity(self):
        return self.cap

    @property
    def head(self):
        return vp_load(&self.head_)

    @property
    def tail(self):
        return vp_load(&self.tail_)

    @property
    def outstanding(self):
        return vp_load(&self.head_) - vp_load(&self.tail_)

    @property
    def closed(self):
        return vp_load(&self.closed_) != 0

    @property
    def pending_tokens(self):
        return vp_sem_value(&self.items)

    def __len__(self):
        return self.outstanding

    cdef int push(self, const int64_t* words, int64_t k) noexcept nogil:
        cdef int64_t h, pos, i
        cdef Cell* c
        if k <= 0:
            return 0
        while True:
            h = vp_load(&self.head_)
            if h + k - vp_load(&self.tail_) > self.cap:
                return -1
            if vp_cas(&self.head_, h, h + k):
                break
        for i in range(k):
            pos = h + i
            c = &self.cells[pos % self.cap]
            while vp_load(&c.seq) != pos:
                vp_relax()
            c.value = words[i]
            vp_store(&c.seq, pos + 1)
        for i in range(k):
            sem_post(&self.items)
        return 0

    cdef int64_t take(self) noexcept nogil:
        """Claim the next cell; caller already holds a semaphore token."""
        cdef int64_t t, v
        cdef Cell* c
        while True:
            t = vp_load(&self.tail_)
            if t >= vp_load(&self.head_):
                if vp_load(&self.closed_):
                    sem_post(&self.items)  # hand the shutdown token on
                    return -1
                vp_relax()
                continue
            if vp_cas(&self.tail_, t, t + 1):
                break
        c = &self.cells[t % self.cap]
        while vp_load(&c.seq) != t + 1:
            vp_relax()
        v = c.value
        vp_store(&c.seq, t + self.cap)
        return v

    cdef int64_t pop_blocking(self) noexcept nogil:
        vp_sem_wait(&self.items)
        return self.take()

    def enqueue_batch(self, words):
        """Publish message words (see ``ActionMsg.encode``) in order."""
        cdef cnp.ndarray arr = np.ascontiguousarray(words, dtype=np.int64).reshape(-1)
        cdef int64_t n = arr.shape[0]
        cdef int rc
        if n == 0:
            return
        if arr.min() < 0:
            raise ValueError("message words must be non-negative")
        if vp_load(&self.closed_):
            raise PoolClosed("action queue is shut down")
        with nogil:
            rc = self.push(<int64_t*>cnp.PyArray_DATA(arr), n)
        if rc != 0:
            raise QueueOverflow(
                f"enqueue of {n} would exceed capacity {self.cap} "
                f"({self.outstanding} outstanding)"
            )

    def dequeue(self, timeout=None):
        """Next message word; ``SHUTDOWN`` (-1) once shut down and drained."""
        cdef int64_t v
        if not wait_token(&self.items, timeout):
            raise TimeoutError("action queue dequeue timed out")
        with nogil:
            v = self.take()
        return v

    def shutdown(self):
        if vp_cas(&self.closed_, 0, 1):
            sem_post(&self.items)


cdef object _new_object = object.__new__


cdef object make_batch(tuple view, int64_t g):
    # StateBatch(*view, g) without the Python-level __init__ frame
    batch = _new_object(StateBatch)
    batch.env_ids, batch.observations, batch.rewards, batch.dones, batch.truncateds, batch.elapsed_steps = view
    batch.generation = g
    return batch


# --------------------------------------------------------------------------
# StateQueue: ring of B block descriptors, each holding M slots.

ctypedef struct Block:
    int64_t generation
    int64_t written
    uint8_t* marks
    int32_t* env_ids
    char* obs
    double* rewards
    uint8_t* dones
    uint8_t* truncs
    int32_t* elapsed


cdef class StateQueue:
    """Blocks of ``batch_size`` slots filled first-come-first-serve.

    Slot for allocation counter ``c`` is offset ``c % M`` of generation
    ``c // M``, which lives in descriptor ``generation % B``. A block whose
    write count reaches M posts the ready semaphore once; the consumer takes
    the oldest generation and walks away with its arrays, and the descriptor
    gets fresh arrays for generation + B.
    """

    cdef Block* blocks
    cdef readonly int64_t num_blocks
    cdef readonly int64_t batch_size
    cdef readonly int64_t num_envs
    cdef readonly tuple obs_shape
    cdef readonly object obs_dtype
    cdef int64_t obs_bytes
    cdef int obs_nd
    cdef int obs_typenum
    cdef cnp.npy_intp obs_dims[8]
    cdef int64_t alloc_
    cdef int64_t next_out_
    cdef int64_t closed_
    cdef sem_t ready
    cdef bint sem_ready
    cdef list views

    def __cinit__(self, Py_ssize_t batch_size, Py_ssize_t num_envs, obs_shape=(1,), obs_dtype="float32"):
        cdef Py_ssize_t d
        if not 1 <= batch_size <= num_envs:
            raise ValueError(f"need 1 <= batch_size <= num_envs, got {batch_size}, {num_envs}")
        self.batch_size = batch_size
        self.num_envs = num_envs
        self.num_blocks = (num_envs + batch_size - 1) // batch_size + 1
        self.obs_shape = tuple(int(s) for s in obs_shape)
        self.obs_dtype = np.dtype(obs_dtype)
        self.obs_bytes = self.obs_dtype.itemsize
        if len(self.obs_shape) > 7:
            raise ValueError("observations may have at most 7 dimensions")
        if self.obs_dtype not in (np.float32, np.int32):
            raise ValueError(f"observation dtype must be float32 or int32, got {self.obs_dtype}")
        self.obs_typenum = self.obs_dtype.num
        self.obs_nd = 1 + len(self.obs_shape)
        self.obs_dims[0] = batch_size
        for i, s in enumerate(self.obs_shape):
            self.obs_bytes *= s
            self.obs_dims[i + 1] = s
        self.blocks = <Block*>calloc(self.num_blocks, sizeof(Block))
        if self.blocks == NULL:
            raise MemoryError()
        self.views = [None] * self.num_blocks
        for d in range(self.num_blocks):
            self.blocks[d].marks = <uint8_t*>malloc(batch_size)
            if self.blocks[d].marks == NULL:
                raise MemoryError()
            self.install(d)
            self.blocks[d].generation = d
        if sem_init(&self.ready, 0, 0) != 0:
            raise OSError("sem_init failed")
        self.sem_ready = True

    def __dealloc__(self):
        cdef Py_ssize_t d
        if self.sem_ready:
            sem_destroy(&self.ready)
        if self.blocks != NULL:
            for d in range(self.num_blocks):
                free(self.blocks[d].marks)
            free(self.blocks)

    cdef install(self, int64_t d):
        """Give descriptor ``d`` fresh backing arrays (GIL held)."""
        cdef Block* b = &self.blocks[d]
        cdef cnp.npy_intp m = self.batch_size
        cdef cnp.ndarray ids = cnp.PyArray_EMPTY(1, &m, cnp.NPY_INT32, 0)
        cdef cnp.ndarray obs = cnp.PyArray_EMPTY(self.obs_nd, self.obs_dims, self.obs_typenum, 0)
        cdef cnp.ndarray rew = cnp.PyArray_EMPTY(1, &m, cnp.NPY_FLOAT64, 0)
        cdef cnp.ndarray done = cnp.PyArray_EMPTY(1, &m, cnp.NPY_BOOL, 0)
        cdef cnp.ndarray trunc = cnp.PyArray_EMPTY(1, &m, cnp.NPY_BOOL, 0)
        cdef cnp.ndarray elapsed = cnp.PyArray_EMPTY(1, &m, cnp.NPY_INT32, 0)
        # plain tuple in BlockView field order; cheaper than the NamedTuple
        self.views[d] = (ids, obs, rew, done, trunc, elapsed)
        b.env_ids = <int32_t*>cnp.PyArray_DATA(ids)
        b.obs = <char*>cnp.PyArray_DATA(obs)
        b.rewards = <double*>cnp.PyArray_DATA(rew)
        b.dones = <uint8_t*>cnp.PyArray_DATA(done)
        b.truncs = <uint8_t*>cnp.PyArray_DATA(trunc)
        b.elapsed = <int32_t*>cnp.PyArray_DATA(elapsed)
        memset(b.marks, 0, self.batch_size)
        vp_store(&b.written, 0)

    cdef inline Block* block_of(self, int64_t generation) noexcept nogil:
        return &self.blocks[generation % self.num_blocks]

    cdef int claim(self, int64_t* generation, int64_t* offset) noexcept nogil:
        cdef int64_t c = vp_fetch_add(&self.alloc_, 1)
        cdef int64_t g = c // self.batch_size
        if vp_load(&self.block_of(g).generation) != g:
            return -1
        generation[0] = g
        offset[0] = c - g * self.batch_size
        return 0

    cdef int mark(self, int64_t generation, int64_t offset) noexcept nogil:
        cdef Block* b = self.block_of(generation)
        if vp_exchange_u8(&b.marks[offset], 1) != 0:
            return -2
        if vp_fetch_add(&b.written, 1) + 1 == self.batch_size:
            sem_post(&self.ready)
        return 0

    cdef int64_t take_ready(self) noexcept nogil:
        """Claim the oldest generation; caller holds a ready token."""
        cdef int64_t g
        cdef Block* b
        while True:
            g = vp_load(&self.next_out_)
            b = self.block_of(g)
            if vp_load(&b.generation) == g and vp_load(&b.written) == self.batch_size:
                if vp_cas(&self.next_out_, g, g + 1):
                    return g
                continue
            if vp_load(&self.closed_):
                sem_post(&self.ready)
                return -1
            vp_relax()  # a later block finished first; ours is mid-write

    cdef object hand_over(self, int64_t g):
        cdef int64_t d = g % self.num_blocks
        cdef tuple view = self.views[d]
        self.install(d)
        vp_store(&self.blocks[d].generation, g + self.num_blocks)
        return make_batch(view, g)

    @property
    def allocated(self):
        return vp_load(&self.alloc_)

    @property
    def consumed(self):
        return vp_load(&self.next_out_)

    @property
    def ready_count(self):
        return vp_sem_value(&self.ready)

    @property
    def closed(self):
        return vp_load(&self.closed_) != 0

    def allocate(self):
        cdef int64_t g, o
        cdef int rc
        with nogil:
            rc = self.claim(&g, &o)
        if rc != 0:
            raise RingExhausted("state queue descriptor reused before its previous generation was consumed")
        return SlotHandle(g, o, BlockView(*self.views[g % self.num_blocks]))

    def mark_written(self, handle):
        cdef int64_t g = handle.generation
        cdef int64_t o = handle.offset
        if not 0 <= o < self.batch_size or vp_load(&self.block_of(g).generation) != g:
            raise DoubleMark(f"stale or foreign slot handle (generation {g}, offset {o})")
        if self.mark(g, o) != 0:
            raise DoubleMark(f"slot (generation {g}, offset {o}) marked twice")

    def wait_ready(self, timeout=None):
        """Oldest full block as a StateBatch, or None after shutdown."""
        cdef int64_t g
        if not wait_token(&self.ready, timeout):
            raise TimeoutError("no ready block before timeout")
        with nogil:
            g = self.take_ready()
        if g < 0:
            return None
        return self.hand_over(g)

    def shutdown(self):
        if vp_cas(&self.closed_, 0, 1):
            sem_post(&self.ready)


# --------------------------------------------------------------------------
# Builtin environment kernels. Arithmetic mirrors builtin_envs.py exactly.

cdef enum:
    KIND_CARTPOLE = 0
    KIND_MOUNTAINCAR = 1
    KIND_DELAY = 2
    DIST_CONST = 0
    DIST_UNIFORM = 1

cdef double GRAVITY = 9.8
cdef double MASSCART = 1.0
cdef double MASSPOLE = 0.1
cdef double LENGTH = 0.5
cdef double FORCE_MAG = 10.0
cdef double TAU = 0.02
cdef double X_THRESHOLD = 2.4

cdef double MC_MIN_POSITION = -1.2
cdef double MC_MAX_POSITION = 0.6
cdef double MC_MAX_SPEED = 0.07
cdef double MC_GOAL_POSITION = 0.5
cdef double MC_FORCE = 0.001
cdef double MC_GRAVITY = 0.0025

cdef double TOTAL_MASS = MASSCART + MASSPOLE
cdef double POLEMASS_LENGTH = MASSPOLE * LENGTH
cdef double THETA_THRESHOLD = 12 * 2 * M_PI / 360


ctypedef struct EnvState:
    int kind
    int32_t env_id
    double s[4]
    int64_t elapsed
    int64_t max_steps
    bitgen_t* rng
    int dist
    double a
    double b
    bint busy_wait
    double last_delay_us
    double total_delay_us


cdef inline double uniform01(bitgen_t* rng) noexcept nogil:
    return rng.next_double(rng.state)


cdef void kernel_reset(EnvState* st) noexcept nogil:
    cdef int i
    if st.kind == KIND_CARTPOLE:
        for i in range(4):
            st.s[i] = -0.05 + (0.05 - -0.05) * uniform01(st.rng)
    elif st.kind == KIND_MOUNTAINCAR:
        st.s[0] = -0.6 + (-0.4 - -0.6) * uniform01(st.rng)
        st.s[1] = 0.0
    st.elapsed = 0


cdef double sample_delay_us(EnvState* st) noexcept nogil:
    cdef double u1, u2, z
    if st.dist == DIST_CONST:
        return st.a
    if st.dist == DIST_UNIFORM:
        return st.a + (st.b - st.a) * uniform01(st.rng)
    u1 = uniform01(st.rng)
    u2 = uniform01(st.rng)
    z = sqrt(-2.0 * log(1.0 - u1)) * cos(2.0 * M_PI * u2)
    return exp(st.a + st.b * z)


cdef void kernel_step(EnvState* st, int64_t action, double* reward, uint8_t* done, uint8_t* truncated) noexcept nogil:
    cdef double x, x_dot, theta, theta_dot, force, costheta, sintheta, temp, thetaacc, xacc
    cdef double position, velocity, d
    cdef bint terminated = False
    if st.kind == KIND_CARTPOLE:
        x = st.s[0]
        x_dot = st.s[1]
        theta = st.s[2]
        theta_dot = st.s[3]
        force = FORCE_MAG if action == 1 else -FORCE_MAG
        costheta = cos(theta)
        sintheta = sin(theta)
        temp = (force + POLEMASS_LENGTH * theta_dot * theta_dot * sintheta) / TOTAL_MASS
        thetaacc = (GRAVITY * sintheta - costheta * temp) / (
            LENGTH * (4.0 / 3.0 - MASSPOLE * costheta * costheta / TOTAL_MASS)
        )
        xacc = temp - POLEMASS_LENGTH * thetaacc * costheta / TOTAL_MASS
        st.s[0] = x + TAU * x_dot
        st.s[1] = x_dot + TAU * xacc
        st.s[2] = theta + TAU * theta_dot
        st.s[3] = theta_dot + TAU * thetaacc
        terminated = (st.s[0] < -X_THRESHOLD or st.s[0] > X_THRESHOLD
                      or st.s[2] < -THETA_THRESHOLD or st.s[2] > THETA_THRESHOLD)
        reward[0] = 1.0
    elif st.kind == KIND_MOUNTAINCAR:
        position = st.s[0]
        velocity = st.s[1]
        velocity += <double>(action - 1) * MC_FORCE + cos(3 * position) * (-MC_GRAVITY)
        if velocity < -MC_MAX_SPEED:
            velocity = -MC_MAX_SPEED
        if velocity > MC_MAX_SPEED:
            velocity = MC_MAX_SPEED
        position += velocity
        if position < MC_MIN_POSITION:
            position = MC_MIN_POSITION
        if position > MC_MAX_POSITION:
            position = MC_MAX_POSITION
        if position == MC_MIN_POSITION and velocity < 0:
            velocity = 0.0
        st.s[0] = position
        st.s[1] = velocity
        terminated = position >= MC_GOAL_POSITION
        reward[0] = -1.0
    else:
        d = sample_delay_us(st)
        st.last_delay_us = d
        st.total_delay_us += d
        if d > 0:
            if st.busy_wait:
                vp_spin_ns(<int64_t>(d * 1000.0))
            else:
                vp_sleep_ns(<int64_t>(d * 1000.0))
        reward[0] = 0.0
    st.elapsed += 1
    truncated[0] = st.elapsed >= st.max_steps
    done[0] = terminated or truncated[0]


cdef void kernel_observe(EnvState* st, float* out) noexcept nogil:
    if st.kind == KIND_CARTPOLE:
        out[0] = <float>st.s[0]
        out[1] = <float>st.s[1]
        out[2] = <float>st.s[2]
        out[3] = <float>st.s[3]
    elif st.kind == KIND_MOUNTAINCAR:
        out[0] = <float>st.s[0]
        out[1] = <float>st.s[1]
    else:
        out[0] = <float>st.elapsed


cdef class NativeEnv:
    """A builtin environment whose step runs as a C kernel.

    Same Python surface as the pure-Python classes: ``reset()`` and
    ``step(action)`` return :class:`StateRecord`.
    """

    cdef EnvState st
    cdef object bit_generator
    cdef readonly object spec
    cdef int num_actions
    cdef int obs_size

    def __init__(self, config, env_id, spec):
        self.spec = spec
        self.st.env_id = env_id
        self.bit_generator = rng_for(config.seed, env_id).bit_generator
        self.st.rng = <bitgen_t*>PyCapsule_GetPointer(self.bit_generator.capsule, "BitGenerator")
        self.st.max_steps = config.max_episode_steps or spec.default_max_episode_steps
        self.num_actions = spec.action_layout.n
        self.obs_size = spec.observation_layout.size

    @property
    def env_id(self):
        return self.st.env_id

    @property
    def elapsed_step(self):
        return self.st.elapsed

    @property
    def max_episode_steps(self):
        return self.st.max_steps

    cdef object record(self, double reward, bint done, bint truncated):
        cdef cnp.ndarray obs = np.empty(self.obs_size, np.float32)
        kernel_observe(&self.st, <float*>cnp.PyArray_DATA(obs))
        return StateRecord(self.st.env_id, obs, reward, done, truncated, self.st.elapsed)

    def reset(self):
        kernel_reset(&self.st)
        return self.record(0.0, False, False)

    def step(self, action):
        cdef int64_t a
        cdef double reward = 0.0
        cdef uint8_t done = 0, truncated = 0
        try:
            a = action
        except (TypeError, OverflowError):
            raise ActionOutOfRange(f"action {action!r} is not an integer") from None
        if a != action or not 0 <= a < self.num_actions:
            raise ActionOutOfRange(f"action {action!r} outside [0, {self.num_actions})")
        if self.st.kind == KIND_DELAY:
            with nogil:
                kernel_step(&self.st, a, &reward, &done, &truncated)
        else:
            kernel_step(&self.st, a, &reward, &done, &truncated)
        return self.record(reward, done, truncated)


cdef class CartPole(NativeEnv):
    def __init__(self, config, env_id, spec):
        NativeEnv.__init__(self, config, env_id, spec)
        self.st.kind = KIND_CARTPOLE

    @property
    def state(self):
        return (self.st.s[0], self.st.s[1], self.st.s[2], self.st.s[3])

    @state.setter
    def state(self, value):
        self.st.s[0], self.st.s[1], self.st.s[2], self.st.s[3] = value


cdef class MountainCar(NativeEnv):
    def __init__(self, config, env_id, spec):
        NativeEnv.__init__(self, config, env_id, spec)
        self.st.kind = KIND_MOUNTAINCAR

    @property
    def state(self):
        return (self.st.s[0], self.st.s[1])

    @state.setter
    def state(self, value):
        self.st.s[0], self.st.s[1] = value


cdef class Delay(NativeEnv):
    def __init__(self, config, env_id, spec):
        NativeEnv.__init__(self, config, env_id, spec)
        self.st.kind = KIND_DELAY
        params = DelayParams.from_env_params(config.env_params)
        self.st.dist, self.st.a, self.st.b = params.for_env(env_id)
        self.st.busy_wait = params.busy_wait

    @property
    def busy_wait(self):
        return self.st.busy_wait

    @property
    def last_delay_us(self):
        return self.st.last_delay_us

    @property
    def total_delay_us(self):
        return self.st.total_delay_us


# --------------------------------------------------------------------------
# Worker side.

cdef class WorkerContext:
    """State shared by all workers of one executor.

    ``run()`` is the body of one worker thread: dequeue a word, reset or step
    the addressed env, claim a slot, write the record, mark it written.
    """

    cdef ActionQueue aq
    cdef StateQueue sq
    cdef list env_list
    cdef EnvState** states
    cdef int64_t num_envs
    cdef object action_table
    cdef int64_t* act_i
    cdef double* act_f
    cdef bint discrete
    cdef cnp.ndarray last_done_arr
    cdef uint8_t* last_done
    cdef int64_t failed_
    cdef int64_t processed_
    cdef readonly object failure
    cdef object obs_shape
    cdef object obs_dtype

    def __init__(self, envs, ActionQueue aq, StateQueue sq, action_table, spec):
        cdef Py_ssize_t i
        self.aq = aq
        self.sq = sq
        self.env_list = list(envs)
        self.num_envs = len(self.env_list)
        if self.num_envs != sq.num_envs:
            raise ValueError("env count does not match the state queue")
        self.states = <EnvState**>calloc(self.num_envs, sizeof(EnvState*))
        if self.states == NULL:
            raise MemoryError()
        for i in range(self.num_envs):
            env = self.env_list[i]
            if isinstance(env, NativeEnv) and (<NativeEnv>env).obs_size * 4 == sq.obs_bytes \
                    and sq.obs_dtype == np.float32:
                self.states[i] = &(<NativeEnv>env).st
        self.discrete = isinstance(spec.action_layout, Discrete)
        self.action_table = action_table
        if self.discrete:
            if action_table.dtype != np.int64 or not action_table.flags.c_contiguous:
                raise ValueError("discrete action table must be C-contiguous int64")
            self.act_i = <int64_t*>cnp.PyArray_DATA(action_table)
        else:
            if action_table.dtype != np.float64 or not action_table.flags.c_contiguous:
                raise ValueError("continuous action table must be C-contiguous float64")
            self.act_f = <double*>cnp.PyArray_DATA(action_table)
        self.last_done_arr = np.zeros(self.num_envs, np.uint8)
        self.last_done = <uint8_t*>cnp.PyArray_DATA(self.last_done_arr)
        self.failure = None
        self.obs_shape = sq.obs_shape
        self.obs_dtype = sq.obs_dtype

    def __dealloc__(self):
        free(self.states)

    @property
    def processed(self):
        return vp_load(&self.processed_)

    @property
    def failed(self):
        return vp_load(&self.failed_) != 0

    @property
    def action_queue(self):
        return self.aq

    @property
    def state_queue(self):
        return self.sq

    @property
    def envs(self):
        return self.env_list

    cdef int run_native(self, EnvState* st, int64_t e, bint reset) noexcept nogil:
        cdef double reward = 0.0
        cdef uint8_t done = 0, truncated = 0
        cdef int64_t g, o
        cdef Block* b
        if reset or self.last_done[e]:
            kernel_reset(st)
        else:
            kernel_step(st, self.act_i[e], &reward, &done, &truncated)
        self.last_done[e] = done
        if self.sq.claim(&g, &o) != 0:
            return -1
        b = self.sq.block_of(g)
        b.env_ids[o] = <int32_t>e
        kernel_observe(st, <float*>(b.obs + o * self.sq.obs_bytes))
        b.rewards[o] = reward
        b.dones[o] = done
        b.truncs[o] = truncated
        b.elapsed[o] = <int32_t>st.elapsed
        return self.sq.mark(g, o)

    cdef int64_t native_loop(self) noexcept nogil:
        """Serve native envs until shutdown (-1), a fault (-2/-3), or a
        message for a Python env (returned so the caller can take the GIL)."""
        cdef int64_t w, e
        cdef EnvState* st
        cdef int rc
        while True:
            w = self.aq.pop_blocking()
            if w < 0:
                return -1
            e = w >> 1
            st = self.states[e]
            if st == NULL:
                return w
            rc = self.run_native(st, e, w & 1)
            if rc == -1:
                return -2
            if rc == -2:
                return -3
            vp_fetch_add(&self.processed_, 1)

    cdef bint execute(self, int64_t w):
        """Run one dequeued message on the calling thread (GIL held)."""
        cdef int64_t e = w >> 1
        cdef EnvState* st = self.states[e]
        cdef int rc
        if st == NULL:
            if not self.run_python(w):
                return False
        else:
            with nogil:
                rc = self.run_native(st, e, w & 1)
            if rc == -1:
                self.fail(RingExhausted("state queue descriptor reused before it was consumed"))
                return False
            if rc == -2:
                self.fail(DoubleMark("state queue slot marked twice"))
                return False
        vp_fetch_add(&self.processed_, 1)
        return True

    def run(self):
        cdef int64_t w
        while True:
            with nogil:
                w = self.native_loop()
            if w == -1:
                return
            if w == -2:
                self.fail(RingExhausted("state queue descriptor reused before it was consumed"))
                return
            if w == -3:
                self.fail(DoubleMark("state queue slot marked twice"))
                return
            if not self.run_python(w):
                return
            vp_fetch_add(&self.processed_, 1)

    cdef bint run_python(self, int64_t w):
        cdef int64_t e = w >> 1
        cdef int64_t g, o
        cdef Block* b
        env = self.env_list[e]
        try:
            if (w & 1) or self.last_done[e]:
                rec = env.reset()
            else:
                rec = env.step(self.action_for(e))
            obs = np.ascontiguousarray(rec.observation, dtype=self.obs_dtype)
            if obs.shape != self.obs_shape:
                raise ActionShapeMismatch(
                    f"env {e} returned observation shape {obs.shape}, expected {self.obs_shape}"
                )
            self.last_done[e] = bool(rec.done) or bool(rec.truncated)
            if self.sq.claim(&g, &o) != 0:
                raise RingExhausted("state queue descriptor reused before it was consumed")
            b = self.sq.block_of(g)
            b.env_ids[o] = <int32_t>e
            memcpy(b.obs + o * self.sq.obs_bytes, cnp.PyArray_DATA(<cnp.ndarray>obs), self.sq.obs_bytes)
            b.rewards[o] = float(rec.reward)
            b.dones[o] = self.last_done[e]
            b.truncs[o] = bool(rec.truncated)
            b.elapsed[o] = int(rec.elapsed_step)
            if self.sq.mark(g, o) != 0:
                raise DoubleMark("state queue slot marked twice")
        except BaseException as exc:
            self.fail(exc)
            return False
        return True

    cdef object action_for(self, int64_t e):
        if self.discrete:
            return self.act_i[e]
        return self.action_table[e].copy()

    cdef fail(self, exc):
        if self.failure is None:
            self.failure = exc
        vp_store(&self.failed_, 1)
        self.sq.shutdown()


# --------------------------------------------------------------------------
# Client side: send/recv bookkeeping.

cdef class Dispatcher:
    """Validates and routes ``send`` calls, hands out ``recv`` batches, and
    keeps the per-env in-flight table that enforces one action per env.

    Runs entirely with the GIL held, which makes each call atomic with
    respect to other Python threads.
    """

    cdef ActionQueue aq
    cdef StateQueue sq
    cdef WorkerContext ctx
    cdef int64_t num_envs
    cdef readonly object spec
    cdef cnp.ndarray in_flight_arr
    cdef uint8_t* in_flight
    cdef object action_table
    cdef int64_t* act_i
    cdef bint discrete
    cdef int64_t num_actions
    cdef bint ordered
    cdef cnp.ndarray words_arr
    cdef int64_t* words
    cdef readonly int64_t sent
    cdef readonly int64_t received
    cdef public bint inline_single
    cdef public bint started
    cdef public bint closed

    def __init__(self, WorkerContext ctx, action_table, spec, bint ordered=False):
        self.ctx = ctx
        self.aq = ctx.aq
        self.sq = ctx.sq
        self.spec = spec
        self.num_envs = ctx.num_envs
        self.in_flight_arr = np.zeros(self.num_envs, np.uint8)
        self.in_flight = <uint8_t*>cnp.PyArray_DATA(self.in_flight_arr)
        self.action_table = action_table
        self.discrete = isinstance(spec.action_layout, Discrete)
        if self.discrete:
            self.act_i = <int64_t*>cnp.PyArray_DATA(action_table)
            self.num_actions = spec.action_layout.n
        self.ordered = ordered
        self.inline_single = True
        self.words_arr = np.empty(self.num_envs, np.int64)
        self.words = <int64_t*>cnp.PyArray_DATA(self.words_arr)

    @property
    def in_flight_mask(self):
        return self.in_flight_arr.astype(bool)

    cdef cnp.ndarray as_ids(self, env_ids):
        cdef cnp.ndarray ids
        if cnp.PyArray_Check(env_ids):
            ids = <cnp.ndarray>env_ids
            if cnp.PyArray_NDIM(ids) == 1 and cnp.PyArray_ISCARRAY_RO(ids) and (
                cnp.PyArray_TYPE(ids) == cnp.NPY_INT64 or cnp.PyArray_TYPE(ids) == cnp.NPY_INT32
            ):
                return ids
        arr = np.asarray(env_ids)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.ndim != 1 or arr.dtype.kind not in "iu":
            raise ActionShapeMismatch(f"env_ids must be a 1-d integer array, got {arr.dtype}{arr.shape}")
        return np.ascontiguousarray(arr, dtype=np.int64)

    cdef cnp.ndarray as_discrete(self, actions, int64_t k):
        cdef cnp.ndarray acts
        if cnp.PyArray_Check(actions):
            acts = <cnp.ndarray>actions
            if cnp.PyArray_NDIM(acts) == 1 and cnp.PyArray_ISCARRAY_RO(acts) and (
                cnp.PyArray_TYPE(acts) == cnp.NPY_INT64 or cnp.PyArray_TYPE(acts) == cnp.NPY_INT32
            ) and acts.shape[0] == k:
                return acts
        arr = np.asarray(actions)
        if arr.ndim == 0 and k == 1:
            arr = arr.reshape(1)
        if arr.shape != (k,):
            raise ActionShapeMismatch(f"expected {k} discrete actions, got shape {arr.shape}")
        if arr.dtype.kind == "f":
            if not np.all(np.floor(arr) == arr):
                raise ActionOutOfRange("discrete actions must be integers")
        elif arr.dtype.kind not in "iub":
            raise ActionOutOfRange(f"discrete actions must be integers, got dtype {arr.dtype}")
        return np.ascontiguousarray(arr, dtype=np.int64)

    cdef int64_t id_at(self, cnp.ndarray ids, Py_ssize_t i):
        if cnp.PyArray_TYPE(ids) == cnp.NPY_INT64:
            return (<int64_t*>cnp.PyArray_DATA(ids))[i]
        return (<int32_t*>cnp.PyArray_DATA(ids))[i]

    def send(self, actions, env_ids):
        self.publish(actions, env_ids, False)

    def step(self, actions, env_ids, timeout=None):
        """``send`` then ``recv``. In sync mode a single-message step runs
        on the calling thread: the caller would only block waiting for it."""
        self.publish(actions, env_ids, self.inline_single and self.sq.batch_size == self.num_envs)
        return self.recv(timeout)

    cdef publish(self, actions, env_ids, bint inline):
        if self.closed:
            raise PoolClosed("pool is closed")
        if not self.started:
            raise ProtocolViolation("call async_reset() or reset() before sending actions")
        cdef cnp.ndarray ids = self.as_ids(env_ids)
        cdef Py_ssize_t k = ids.shape[0], i
        cdef int64_t e, a
        cdef cnp.ndarray acts
        cdef object cont = None
        cdef int rc
        if k > self.num_envs:
            raise ProtocolViolation(f"{k} env_ids sent to a pool of {self.num_envs}")
        if self.discrete:
            acts = self.as_discrete(actions, k)
        else:
            cont = validate_action_batch(self.spec, actions, k)
        # validate ids; 2 marks "seen in this call" so duplicates are caught
        for i in range(k):
            e = self.id_at(ids, i)
            if e < 0 or e >= self.num_envs:
                self.unmark(ids, i)
                raise ProtocolViolation(f"env_id {e} out of range [0, {self.num_envs})")
            if self.in_flight[e]:
                self.unmark(ids, i)
                raise ProtocolViolation(f"env_id {e} already has an action in flight")
            self.in_flight[e] = 2
        if self.discrete:
            for i in range(k):
                if cnp.PyArray_TYPE(acts) == cnp.NPY_INT64:
                    a = (<int64_t*>cnp.PyArray_DATA(acts))[i]
                else:
                    a = (<int32_t*>cnp.PyArray_DATA(acts))[i]
                if a < 0 or a >= self.num_actions:
                    self.unmark(ids, k)
                    raise ActionOutOfRange(f"action {a} outside [0, {self.num_actions})")
        for i in range(k):
            e = self.id_at(ids, i)
            if self.discrete:
                if cnp.PyArray_TYPE(acts) == cnp.NPY_INT64:
                    self.act_i[e] = (<int64_t*>cnp.PyArray_DATA(acts))[i]
                else:
                    self.act_i[e] = (<int32_t*>cnp.PyArray_DATA(acts))[i]
            else:
                self.action_table[e] = cont[i]
            self.in_flight[e] = 1
            self.words[i] = e << 1
        if inline and k == 1:
            self.sent += 1
            self.ctx.execute(self.words[0])
        else:
            self.push_words(k)

    cdef unmark(self, cnp.ndarray ids, Py_ssize_t upto):
        cdef Py_ssize_t j
        cdef int64_t e
        for j in range(upto):
            e = self.id_at(ids, j)
            if 0 <= e < self.num_envs and self.in_flight[e] == 2:
                self.in_flight[e] = 0

    cdef push_words(self, Py_ssize_t k):
        cdef int rc
        with nogil:
            rc = self.aq.push(self.words, k)
        if rc != 0:
            raise QueueOverflow(f"action queue overflow (capacity {self.aq.cap})")
        self.sent += k

    def send_resets(self):
        """Queue a reset for every env (all must be idle)."""
        cdef Py_ssize_t i
        if self.closed:
            raise PoolClosed("pool is closed")
        for i in range(self.num_envs):
            if self.in_flight[i]:
                raise ProtocolViolation(f"env_id {i} already has an action in flight")
        for i in range(self.num_envs):
            self.in_flight[i] = 1
            self.words[i] = (i << 1) | 1
        self.started = True
        self.push_words(self.num_envs)

    def recv(self, timeout=None):
        cdef Py_ssize_t i, m
        cdef int32_t* ids
        if self.closed:
            raise PoolClosed("pool is closed")
        if self.ctx.failed_:
            raise PoolFailed(f"a worker failed: {self.ctx.failure!r}") from self.ctx.failure
        batch = self.sq.wait_ready(timeout)
        if batch is None:
            if self.ctx.failed:
                raise PoolFailed(f"a worker failed: {self.ctx.failure!r}") from self.ctx.failure
            raise PoolClosed("pool is shut down")
        m = self.sq.batch_size
        ids = <int32_t*>cnp.PyArray_DATA(batch.env_ids)
        for i in range(m):
            self.in_flight[ids[i]] = 0
        self.received += m
        if self.ordered:
            batch = batch.take(np.argsort(batch.env_ids, kind="stable"))
        return batch
