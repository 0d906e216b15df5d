"""Pure-Python event loop, used when the compiled ``_simcore`` is unavailable.

Every arithmetic step mirrors ``_simcore.pyx`` in the same order, so both
backends produce bit-identical output for the same inputs and seed.

Cells are indexed ``c = o * m + j`` with ``o`` the level offset ``k + L``.
"""
from __future__ import annotations

import math

import numpy as np

MASK = (1 << 64) - 1
_INV53 = 1.0 / 9007199254740992.0


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK


def splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step; returns ``(new_state, output)``."""
    state = (state + 0x9E3779B97F4A7C15) & MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
    return state, z ^ (z >> 31)


class Xoshiro256:
    """xoshiro256** seeded by four splitmix64 outputs."""

    def __init__(self, seed: int):
        s = seed & MASK
        st = []
        for _ in range(4):
            s, z = splitmix64(s)
            st.append(z)
        self.s = st

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self.s
        result = (_rotl((s1 * 5) & MASK, 7) * 9) & MASK
        t = (s1 << 17) & MASK
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self.s = [s0, s1, s2, s3]
        return result

    def uniform(self) -> float:
        return (self.next_u64() >> 11) * _INV53


class _Acc:
    """Lazy time-weighted accumulators for cell occupancy and tagged tuples."""

    def __init__(self, n_batches, ncell, tuples, nl, N):
        self.b = -1
        self.occ = [[0.0] * ncell for _ in range(n_batches)]
        self.last = [0.0] * ncell
        n_tup, k = tuples.shape if tuples.size else (0, 0)
        self.n_tup = n_tup
        self.joint = [[0.0] * (nl ** k if n_tup else 1) for _ in range(n_batches)]
        self.tup_of = [-1] * N
        self.tup_w = [0] * N
        self.tup_code = [0] * n_tup
        self.tup_last = [0.0] * n_tup
        for t in range(n_tup):
            w = 1
            for r in range(k):
                i = int(tuples[t, r])
                self.tup_of[i] = t
                self.tup_w[i] = w
                w *= nl

    def init_codes(self, level_of):
        for i, t in enumerate(self.tup_of):
            if t >= 0:
                self.tup_code[t] += self.tup_w[i] * level_of[i]

    def touch(self, c, count, t):
        if self.b >= 0:
            self.occ[self.b][c] += count * (t - self.last[c])
        self.last[c] = t

    def move(self, i, old_o, new_o, t):
        tp = self.tup_of[i]
        if tp < 0:
            return
        if self.b >= 0:
            self.joint[self.b][self.tup_code[tp]] += t - self.tup_last[tp]
        self.tup_last[tp] = t
        self.tup_code[tp] += self.tup_w[i] * (new_o - old_o)

    def flush(self, counts, t):
        for c in range(len(self.last)):
            self.touch(c, counts(c), t)
        for tp in range(self.n_tup):
            if self.b >= 0:
                self.joint[self.b][self.tup_code[tp]] += t - self.tup_last[tp]
            self.tup_last[tp] = t


def simulate(mode, N, K, C, L, beta, alpha, W, lam, mu, eta, own, bounce, levels0, env0, horizon,
             checkpoints, sample_times, max_events, check, seed, tuples):
    """Run one replication; see :func:`mfbike.simulator.run` for the meaning of the arguments.

    ``mode`` is 0 for physical dynamics and 1 for empirical-measure rates.
    """
    nl = K + 2 * L + 1
    m = len(lam)
    ncell = nl * m
    Wl = [[float(v) for v in row] for row in W]
    q = [-Wl[j][j] for j in range(m)]
    lam = [float(v) for v in lam]
    mu = [float(v) for v in mu]
    eta = [[float(v) for v in row] for row in eta]
    own = [float(v) for v in own]
    bounce = [float(v) for v in bounce]
    cps = [float(v) for v in checkpoints]
    samp = [float(v) for v in sample_times]
    n_batches = len(cps) - 1
    rng = Xoshiro256(seed)

    level = [int(v) for v in levels0]
    acc = _Acc(n_batches, ncell, tuples, nl, N)
    acc.init_codes(level)
    samples = np.full((len(samp), ncell), np.nan)

    if mode == 0:
        env = int(env0[0])
        lc = [0] * nl
        for o in level:
            lc[o] += 1
        in_transit = N * C
        for o in level:
            if o > L:
                in_transit -= o - L

        def counts(c):
            return lc[c // m] if c % m == env else 0
    else:
        env_of = [int(v) for v in env0]
        n = [0] * ncell
        members = [[] for _ in range(ncell)]
        pos = [0] * N
        for i in range(N):
            c = level[i] * m + env_of[i]
            pos[i] = len(members[c])
            members[c].append(i)
            n[c] += 1
        rate = [0.0] * ncell
        up = [0.0] * ncell
        zeta = [0.0] * m
        in_transit = 0

        def counts(c):
            return n[c]

    t = 0.0
    icp = 0
    isamp = 0
    events = 0
    clamps = 0
    violations = 0
    first_violation = -1
    total_bikes = N * C

    while True:
        if events >= max_events:
            break
        # total rate
        if mode == 0:
            a_rate = N * lam[env]
            r_rate = in_transit * mu[env]
            R = a_rate + r_rate + q[env]
        else:
            for j in range(m):
                parked = 0
                for o in range(L + 1, nl):
                    parked += (o - L) * n[o * m + j]
                z = C - parked / N
                for o in range(K + L, K + 2 * L):
                    x = (1.0 - beta) * n[o * m + j] / N
                    if x < 1.0:
                        # x = 1 only when this cell holds every station, and its bounce factor is 0
                        z += x / ((1.0 - x) * (1.0 - x))
                top = n[(nl - 1) * m + j] / N
                if top < 1.0:
                    z += top / ((1.0 - top) * (1.0 - top))
                zeta[j] = z
            R = 0.0
            for o in range(nl):
                for j in range(m):
                    c = o * m + j
                    u_ = mu[j] / N * (own[o] + (N - 1) * zeta[j]) * bounce[o]
                    if u_ < 0.0:
                        u_ = 0.0
                        if n[c] > 0:
                            clamps += 1
                    up[c] = u_
                    rate[c] = eta[o][j] + u_ + q[j]
                    R += n[c] * rate[c]
        if R > 0.0:
            u1 = rng.uniform()
            t_next = t + (-math.log(1.0 - u1)) / R
        else:
            t_next = math.inf

        while isamp < len(samp) and samp[isamp] < t_next and samp[isamp] <= horizon:
            for c in range(ncell):
                samples[isamp, c] = counts(c) / N
            isamp += 1
        while icp <= n_batches and cps[icp] < t_next:
            acc.flush(counts, cps[icp])
            acc.b = icp
            icp += 1
        if t_next > horizon:
            t = horizon
            break
        t = t_next

        target = rng.uniform() * R
        if mode == 0:
            if target < a_rate:
                i = int(rng.uniform() * N)
                if i >= N:
                    i = N - 1
                o = level[i]
                if o >= L + 1:
                    new_o = o - 1
                    in_transit += 1
                elif o >= 1:
                    new_o = o - 1 if rng.uniform() < alpha else o
                else:
                    new_o = o
            elif target < a_rate + r_rate:
                i = int(rng.uniform() * N)
                if i >= N:
                    i = N - 1
                o = level[i]
                if o <= L - 1:
                    new_o = o + 1
                elif o <= L + K - 1:
                    new_o = o + 1
                    in_transit -= 1
                elif o <= K + 2 * L - 1:
                    if rng.uniform() < beta:
                        new_o = o + 1
                        in_transit -= 1
                    else:
                        new_o = o
                else:
                    new_o = o
            else:
                i = -1
                new_o = 0
                o = 0
                target_env = rng.uniform() * q[env]
                dest = -1
                for k in range(m):
                    if k != env and Wl[env][k] > 0.0:
                        dest = k
                        if target_env < Wl[env][k]:
                            break
                        target_env -= Wl[env][k]
                for c in range(ncell):
                    acc.touch(c, counts(c), t)
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
                for o2 in level:
                    if o2 > L:
                        tot += o2 - L
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
            r = int(target / rate[c])
            if r >= n[c]:
                r = n[c] - 1
            w = target - r * rate[c]
            i = members[c][r]
            if w < eta[o][j]:
                c2 = c - m
            elif w < eta[o][j] + up[c] or q[j] == 0.0:
                c2 = c + m if up[c] > 0.0 else c - m
            else:
                target_env = rng.uniform() * q[j]
                dest = -1
                for k in range(m):
                    if k != j and Wl[j][k] > 0.0:
                        dest = k
                        if target_env < Wl[j][k]:
                            break
                        target_env -= Wl[j][k]
                c2 = o * m + dest
            acc.touch(c, n[c], t)
            acc.touch(c2, n[c2], t)
            # swap-remove from c, append to c2
            lst = members[c]
            moved = lst[-1]
            lst[pos[i]] = moved
            pos[moved] = pos[i]
            lst.pop()
            pos[i] = len(members[c2])
            members[c2].append(i)
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
        # stopped early by the event budget; close the running batch at t
        acc.flush(counts, t)

    occ = np.array(acc.occ, dtype=float).reshape(n_batches, ncell)
    joint = np.array(acc.joint, dtype=float)
    if mode == 0:
        env_out = np.array([env], dtype=np.int64)
    else:
        env_out = np.array(env_of, dtype=np.int64)
    return {
        "samples": samples,
        "occ": occ,
        "joint": joint,
        "events": events,
        "t_end": t,
        "levels": np.array(level, dtype=np.int64),
        "env": env_out,
        "in_transit": in_transit,
        "clamps": clamps,
        "violations": violations,
        "first_violation": first_violation,
    }
