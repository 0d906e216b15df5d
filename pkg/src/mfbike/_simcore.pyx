# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled event loop.  Mirrors ``_simcore_py.simulate`` operation for operation."""
import numpy as np
cimport numpy as cnp
from libc.math cimport log, INFINITY
from libc.stdint cimport uint64_t, int64_t

cnp.import_array()


cdef inline uint64_t _rotl(uint64_t x, int k) nogil:
    return (x << k) | (x >> (64 - k))


cdef struct Rng:
    uint64_t s0
    uint64_t s1
    uint64_t s2
    uint64_t s3


cdef inline uint64_t _splitmix(uint64_t* state) nogil:
    state[0] += <uint64_t>0x9E3779B97F4A7C15ULL
    cdef uint64_t z = state[0]
    z = (z ^ (z >> 30)) * <uint64_t>0xBF58476D1CE4E5B9ULL
    z = (z ^ (z >> 27)) * <uint64_t>0x94D049BB133111EBULL
    return z ^ (z >> 31)


cdef inline void _seed(Rng* r, uint64_t seed) nogil:
    cdef uint64_t s = seed
    r.s0 = _splitmix(&s)
    r.s1 = _splitmix(&s)
    r.s2 = _splitmix(&s)
    r.s3 = _splitmix(&s)


cdef inline double _uniform(Rng* r) nogil:
    cdef uint64_t result = _rotl(r.s1 * 5, 7) * 9
    cdef uint64_t t = r.s1 << 17
    r.s2 ^= r.s0
    r.s3 ^= r.s1
    r.s1 ^= r.s2
    r.s0 ^= r.s3
    r.s2 ^= t
    r.s3 = _rotl(r.s3, 45)
    return (result >> 11) * (1.0 / 9007199254740992.0)


def uniforms(uint64_t seed, Py_ssize_t count):
    """First ``count`` uniforms of the stream for ``seed`` (cross-backend check)."""
    cdef Rng r
    _seed(&r, seed)
    out = np.empty(count)
    cdef double[::1] o = out
    cdef Py_ssize_t i
    for i in range(count):
        o[i] = _uniform(&r)
    return out


cdef class _Acc:
    cdef public Py_ssize_t b, ncell, n_tup
    cdef double[:, ::1] occ
    cdef double[::1] last
    cdef double[:, ::1] joint
    cdef int64_t[::1] tup_of, tup_w, tup_code
    cdef double[::1] tup_last
    cdef object occ_arr, joint_arr

    def __init__(self, Py_ssize_t n_batches, Py_ssize_t ncell, int64_t[:, ::1] tuples, Py_ssize_t nl,
                 Py_ssize_t N, int64_t[::1] level_of):
        cdef Py_ssize_t t, r, i, k = tuples.shape[1], size = 1
        cdef int64_t w
        for r in range(k):
            size *= nl
        self.b = -1
        self.ncell = ncell
        self.n_tup = tuples.shape[0]
        self.occ_arr = np.zeros((n_batches, ncell))
        self.occ = self.occ_arr
        self.last = np.zeros(ncell)
        self.joint_arr = np.zeros((n_batches, size if self.n_tup else 1))
        self.joint = self.joint_arr
        self.tup_of = np.full(N, -1, dtype=np.int64)
        self.tup_w = np.zeros(N, dtype=np.int64)
        self.tup_code = np.zeros(self.n_tup, dtype=np.int64)
        self.tup_last = np.zeros(self.n_tup)
        for t in range(self.n_tup):
            w = 1
            for r in range(k):
                i = tuples[t, r]
                self.tup_of[i] = t
                self.tup_w[i] = w
                w *= nl
        for i in range(N):
            if self.tup_of[i] >= 0:
                self.tup_code[self.tup_of[i]] += self.tup_w[i] * level_of[i]

    cdef inline void touch(self, Py_ssize_t c, int64_t count, double t) noexcept:
        if self.b >= 0:
            self.occ[self.b, c] += count * (t - self.last[c])
        self.last[c] = t

    cdef inline void move(self, Py_ssize_t i, int64_t old_o, int64_t new_o, double t) noexcept:
        cdef int64_t tp = self.tup_of[i]
        if tp < 0:
            return
        if self.b >= 0:
            self.joint[self.b, self.tup_code[tp]] += t - self.tup_last[tp]
        self.tup_last[tp] = t
        self.tup_code[tp] += self.tup_w[i] * (new_o - old_o)

    cdef void flush_tuples(self, double t) noexcept:
        cdef Py_ssize_t tp
        for tp in range(self.n_tup):
            if self.b >= 0:
                self.joint[self.b, self.tup_code[tp]] += t - self.tup_last[tp]
            self.tup_last[tp] = t


cdef inline int64_t _count(int mode, Py_ssize_t c, Py_ssize_t m, int64_t env, int64_t[::1] lc,
                           int64_t[::1] n) noexcept:
    if mode == 0:
        return lc[c // m] if c % m == env else 0
    return n[c]


cdef void _flush(_Acc acc, int mode, Py_ssize_t m, int64_t env, int64_t[::1] lc, int64_t[::1] n,
                 double t) noexcept:
    cdef Py_ssize_t c
    for c in range(acc.ncell):
        acc.touch(c, _count(mode, c, m, env, lc, n), t)
    acc.flush_tuples(t)


def simulate(int mode, int64_t N, int64_t K, int64_t C, int64_t L, double beta, double alpha, W, lam, mu,
             eta, own, bounce, levels0, env0, double horizon, checkpoints, sample_times, int64_t max_events,
             bint check, uint64_t seed, tuples):
    cdef Py_ssize_t nl = K + 2 * L + 1
    cdef Py_ssize_t m = len(lam)
    cdef Py_ssize_t ncell = nl * m
    cdef double[:, ::1] Wv = np.ascontiguousarray(W, dtype=np.float64)
    cdef double[::1] lamv = np.ascontiguousarray(lam, dtype=np.float64)
    cdef double[::1] muv = np.ascontiguousarray(mu, dtype=np.float64)
    cdef double[:, ::1] etav = np.ascontiguousarray(eta, dtype=np.float64)
    cdef double[::1] ownv = np.ascontiguousarray(own, dtype=np.float64)
    cdef double[::1] bouncev = np.ascontiguousarray(bounce, dtype=np.float64)
    cdef double[::1] cps = np.ascontiguousarray(checkpoints, dtype=np.float64)
    cdef double[::1] samp = np.ascontiguousarray(sample_times, dtype=np.float64)
    cdef int64_t[:, ::1] tup = np.ascontiguousarray(tuples, dtype=np.int64)
    cdef Py_ssize_t n_batches = cps.shape[0] - 1
    cdef Py_ssize_t n_samp = samp.shape[0]
    cdef double[::1] q = np.empty(m)
    cdef Py_ssize_t j, k, o, c, c2, o2, i, r, sel, tp
    for j in range(m):
        q[j] = -Wv[j, j]

    cdef Rng rng
    _seed(&rng, seed)

    level_arr = np.ascontiguousarray(levels0, dtype=np.int64).copy()
    cdef int64_t[::1] level = level_arr
    cdef _Acc acc = _Acc(n_batches, ncell, tup, nl, N, level)
    samples_arr = np.full((n_samp, ncell), np.nan)
    cdef double[:, ::1] samples = samples_arr

    cdef int64_t env = 0
    cdef int64_t in_transit = 0
    lc_arr = np.zeros(nl, dtype=np.int64)
    cdef int64_t[::1] lc = lc_arr
    n_arr = np.zeros(ncell, dtype=np.int64)
    cdef int64_t[::1] n = n_arr
    env_arr = np.ascontiguousarray(env0, dtype=np.int64).copy()
    cdef int64_t[::1] env_of = env_arr
    cdef int64_t[::1] members = np.zeros(ncell * N if mode == 1 else 1, dtype=np.int64)
    cdef int64_t[::1] pos = np.zeros(N, dtype=np.int64)
    cdef double[::1] rate = np.zeros(ncell)
    cdef double[::1] up = np.zeros(ncell)
    cdef double[::1] zeta = np.zeros(m)

    if mode == 0:
        env = env_of[0]
        for i in range(N):
            lc[level[i]] += 1
        in_transit = N * C
        for i in range(N):
            if level[i] > L:
                in_transit -= level[i] - L
    else:
        for i in range(N):
            c = level[i] * m + env_of[i]
            pos[i] = n[c]
            members[c * N + n[c]] = i
            n[c] += 1

    cdef double t = 0.0, t_next, R, a_rate = 0.0, r_rate = 0.0, u1, target, target_env, z, x, top, u_, tot_c, w
    cdef Py_ssize_t icp = 0, isamp = 0
    cdef int64_t events = 0, clamps = 0, violations = 0, first_violation = -1, total_bikes = N * C
    cdef int64_t parked, new_o, tot, moved, dest

    while True:
        if events >= max_events:
            break
        if mode == 0:
            a_rate = N * lamv[env]
            r_rate = in_transit * muv[env]
            R = a_rate + r_rate + q[env]
        else:
            for j in range(m):
                parked = 0
                for o in range(L + 1, nl):
                    parked += (o - L) * n[o * m + j]
                z = C - (<double>parked) / (<double>N)
                for o in range(K + L, K + 2 * L):
                    x = (1.0 - beta) * n[o * m + j] / (<double>N)
                    if x < 1.0:
                        z += x / ((1.0 - x) * (1.0 - x))
                top = (<double>n[(nl - 1) * m + j]) / (<double>N)
                if top < 1.0:
                    z += top / ((1.0 - top) * (1.0 - top))
                zeta[j] = z
            R = 0.0
            for o in range(nl):
                for j in range(m):
                    c = o * m + j
                    u_ = muv[j] / N * (ownv[o] + (N - 1) * zeta[j]) * bouncev[o]
                    if u_ < 0.0:
                        u_ = 0.0
                        if n[c] > 0:
                            clamps += 1
                    up[c] = u_
                    rate[c] = etav[o, j] + u_ + q[j]
                    R += n[c] * rate[c]
        if R > 0.0:
            u1 = _uniform(&rng)
            t_next = t + (-log(1.0 - u1)) / R
        else:
            t_next = INFINITY

        while isamp < n_samp and samp[isamp] < t_next and samp[isamp] <= horizon:
            for c in range(ncell):
                samples[isamp, c] = (<double>_count(mode, c, m, env, lc, n)) / (<double>N)
            isamp += 1
        while icp <= n_batches and cps[icp] < t_next:
            _flush(acc, mode, m, env, lc, n, cps[icp])
            acc.b = icp
            icp += 1
        if t_next > horizon:
            t = horizon
            break
        t = t_next

        target = _uniform(&rng) * R
        if mode == 0:
            o = 0
            new_o = 0
            if target < a_rate:
                i = <Py_ssize_t>(_uniform(&rng) * N)
                if i >= N:
                    i = N - 1
                o = level[i]
                if o >= L + 1:
                    new_o = o - 1
                    in_transit += 1
                elif o >= 1:
                    new_o = o - 1 if _uniform(&rng) < alpha else o
                else:
                    new_o = o
            elif target < a_rate + r_rate:
                i = <Py_ssize_t>(_uniform(&rng) * N)
                if i >= N:
                    i = N - 1
                o = level[i]
                if o <= L - 1:
                    new_o = o + 1
                elif o <= L + K - 1:
                    new_o = o + 1
                    in_transit -= 1
                elif o <= K + 2 * L - 1:
                    if _uniform(&rng) < beta:
                        new_o = o + 1
                        in_transit -= 1
                    else:
                        new_o = o
                else:
                    new_o = o
            else:
                i = -1
                target_env = _uniform(&rng) * q[env]
                dest = -1
                for k in range(m):
                    if k != env and Wv[env, k] > 0.0:
                        dest = k
                        if target_env < Wv[env, k]:
                            break
                        target_env -= Wv[env, k]
                for c in range(ncell):
                    acc.touch(c, _count(mode, c, m, env, lc, n), t)
                env = dest
            if i >= 0 and new_o != o:
                acc.touch(o * m + env, lc[o], t)
                acc.touch(new_o * m + env, lc[new_o], t)
                lc[o] -= 1
                lc[new_o] += 1
                level[i] = new_o
                acc.move(i, o, new_o, t)
            if check:
                tot = in_transit
                for i in range(N):
                    if level[i] > L:
                        tot += level[i] - L
                if tot != total_bikes:
                    violations += 1
                    if first_violation < 0:
                        first_violation = events
        else:
            sel = -1
            for c in range(ncell):
                tot_c = n[c] * rate[c]
                if tot_c > 0.0:
                    sel = c
                    if target < tot_c:
                        break
                    target -= tot_c
            else:
                target = 0.0
            c = sel
            o = c // m
            j = c % m
            r = <Py_ssize_t>(target / rate[c])
            if r >= n[c]:
                r = n[c] - 1
            w = target - r * rate[c]
            i = members[c * N + r]
            if w < etav[o, j]:
                c2 = c - m
            elif w < etav[o, j] + up[c] or q[j] == 0.0:
                c2 = c + m if up[c] > 0.0 else c - m
            else:
                target_env = _uniform(&rng) * q[j]
                dest = -1
                for k in range(m):
                    if k != j and Wv[j, k] > 0.0:
                        dest = k
                        if target_env < Wv[j, k]:
                            break
                        target_env -= Wv[j, k]
                c2 = o * m + dest
            acc.touch(c, n[c], t)
            acc.touch(c2, n[c2], t)
            moved = members[c * N + n[c] - 1]
            members[c * N + pos[i]] = moved
            pos[moved] = pos[i]
            pos[i] = n[c2]
            members[c2 * N + n[c2]] = i
            n[c] -= 1
            n[c2] += 1
            o2 = c2 // m
            if o2 != o:
                level[i] = o2
                acc.move(i, o, o2, t)
            else:
                env_of[i] = c2 % m
        events += 1

    if icp <= n_batches:
        _flush(acc, mode, m, env, lc, n, t)

    if mode == 0:
        env_out = np.array([env], dtype=np.int64)
    else:
        env_out = env_arr
    return {
        "samples": samples_arr,
        "occ": acc.occ_arr,
        "joint": acc.joint_arr,
        "events": events,
        "t_end": t,
        "levels": level_arr,
        "env": env_out,
        "in_transit": in_transit,
        "clamps": clamps,
        "violations": violations,
        "first_violation": first_violation,
    }
