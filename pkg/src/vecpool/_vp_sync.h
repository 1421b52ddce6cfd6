/* Atomics, semaphore and timing helpers for the compiled core. */
#ifndef VP_SYNC_H
#define VP_SYNC_H

#include <errno.h>
#include <sched.h>
#include <semaphore.h>
#include <stdint.h>
#include <time.h>

static inline int64_t vp_load(int64_t *p) { return __atomic_load_n(p, __ATOMIC_ACQUIRE); }
static inline void vp_store(int64_t *p, int64_t v) { __atomic_store_n(p, v, __ATOMIC_RELEASE); }
static inline int64_t vp_fetch_add(int64_t *p, int64_t v) { return __atomic_fetch_add(p, v, __ATOMIC_ACQ_REL); }
static inline int vp_cas(int64_t *p, int64_t expected, int64_t desired) {
    return __atomic_compare_exchange_n(p, &expected, desired, 0, __ATOMIC_ACQ_REL, __ATOMIC_ACQUIRE);
}
static inline uint8_t vp_exchange_u8(uint8_t *p, uint8_t v) { return __atomic_exchange_n(p, v, __ATOMIC_ACQ_REL); }

/* Waiting on another thread's half-finished write; yield rather than burn
   the core, the writer may be sharing it. */
static inline void vp_relax(void) { sched_yield(); }

static inline int64_t vp_now_ns(void) {
    struct timespec ts;
    clock_gettime(CLOCK_MONOTONIC, &ts);
    return (int64_t)ts.tv_sec * 1000000000LL + ts.tv_nsec;
}

static inline void vp_sem_wait(sem_t *s) {
    while (sem_wait(s) != 0 && errno == EINTR) {
    }
}

/* 0 when a token was taken, 1 on timeout. */
static inline int vp_sem_wait_ns(sem_t *s, int64_t ns) {
    struct timespec ts;
    int64_t deadline;
    if (ns < 0) ns = 0;
    deadline = vp_now_ns() + ns;
    ts.tv_sec = deadline / 1000000000LL;
    ts.tv_nsec = deadline % 1000000000LL;
    for (;;) {
        if (sem_clockwait(s, CLOCK_MONOTONIC, &ts) == 0) return 0;
        if (errno != EINTR) return 1;
    }
}

static inline int vp_sem_value(sem_t *s) {
    int v = 0;
    sem_getvalue(s, &v);
    return v;
}

static inline void vp_spin_ns(int64_t ns) {
    int64_t end = vp_now_ns() + ns;
    while (vp_now_ns() < end) {
    }
}

static inline void vp_sleep_ns(int64_t ns) {
    struct timespec ts;
    if (ns <= 0) return;
    ts.tv_sec = ns / 1000000000LL;
    ts.tv_nsec = ns % 1000000000LL;
    while (nanosleep(&ts, &ts) != 0 && errno == EINTR) {
    }
}

#endif
