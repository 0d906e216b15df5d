"""Event-driven Monte Carlo simulation of ``N`` interacting stations.

Two dynamics are available:

``physical``
    One shared environment, customers arriving at rate ``N lam_j`` and
    spread uniformly over stations, an explicit pool of riding bikes each
    finishing at rate ``mu_j`` at a uniformly chosen station, and retries by
    re-riding.  Bikes are conserved exactly.
``paper-rates``
    Every station carries its own environment chain and moves up at the
    finite-``N`` virtual arrival rate evaluated on the current empirical
    measure, so the empirical measure is itself a Markov chain whose drift
    is ``y V_y`` at that ``N``.

The event loop lives in the compiled ``_simcore`` extension; the
pure-Python ``_simcore_py`` twin is used when the extension is missing or
``MFBIKE_PURE_PYTHON`` is set, and gives bit-identical results.
"""
from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import _simcore_py
from .errors import ConservationError, InvalidParameterError
from .rates import ModelParams, _bounce_factor, _own_bikes, service_rates

log = logging.getLogger(__name__)

if os.environ.get("MFBIKE_PURE_PYTHON"):
    _core = _simcore_py
    BACKEND = "python"
else:
    try:
        from . import _simcore as _core
        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on the build
        _core = _simcore_py
        BACKEND = "python"


def get_backend(name: str | None = None):
    """Return the kernel module for ``"cython"``, ``"python"`` or the default (``None``)."""
    if name is None:
        return _core
    if name == "python":
        return _simcore_py
    if name == "cython":
        from . import _simcore
        return _simcore
    raise ValueError(f"unknown backend {name!r}")


class SimMode(str, Enum):
    PHYSICAL = "physical"
    PAPER_RATES = "paper-rates"

    @classmethod
    def parse(cls, value) -> "SimMode":
        return value if isinstance(value, cls) else cls(str(value))


def split_seeds(master: int, n: int) -> list[int]:
    """Derive ``n`` replication seeds from ``master``.

    The rule is the splitmix64 output stream started at ``master``: seed ``i``
    is the ``(i+1)``-th output.  Fixed forever so results stay reproducible.
    """
    state = int(master)
    out = []
    for _ in range(n):
        state, z = _simcore_py.splitmix64(state)
        out.append(z)
    return out


def tv_distance(a, b) -> float:
    return 0.5 * float(np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float)).sum())


@dataclass
class SimResult:
    """Output of one replication.

    ``batch_occ`` holds time-integrated cell counts per batch of the
    post-burn-in window; normalise with ``batch_len`` and ``N``.
    """

    mode: SimMode
    N: int
    seed: int
    horizon: float
    burn_in: float
    times: np.ndarray
    samples: np.ndarray      # (T, n_levels, m) empirical measure on the sampling grid
    batch_occ: np.ndarray    # (n_batches, n_levels, m)
    batch_len: np.ndarray    # (n_batches,)
    events: int
    t_end: float
    final_levels: np.ndarray
    final_env: np.ndarray
    in_transit: int
    clamp_events: int
    backend: str
    joint: np.ndarray = field(repr=False, default=None)  # (n_batches, n_levels**k) tagged-tuple occupancy
    tuple_size: int = 0

    @property
    def time_avg(self) -> np.ndarray:
        """Time-averaged empirical measure over ``[burn_in, t_end]``."""
        total = self.batch_len.sum()
        if total <= 0:
            raise ValueError("no time accumulated after burn-in")
        return self.batch_occ.sum(axis=0) / (total * self.N)

    @property
    def level_marginal(self) -> np.ndarray:
        return self.time_avg.sum(axis=1)

    def batch_means(self) -> np.ndarray:
        keep = self.batch_len > 0
        return self.batch_occ[keep] / (self.batch_len[keep, None, None] * self.N)

    def to_csv(self, path, p: ModelParams, header_lines=()) -> None:
        """Sampled trajectory: time column plus one column per ``(level, env)`` cell."""
        cols = [f"Y[{k},{j + 1}]" for k in p.levels for j in range(p.m)]
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            fh.write("t," + ",".join(cols) + "\n")
            for t, s in zip(self.times, self.samples):
                if np.isnan(s).any():
                    break
                fh.write(f"{float(t)!r}," + ",".join(repr(float(v)) for v in s.ravel()) + "\n")


def _initial_state(p: ModelParams, N: int, mode: SimMode, seed: int, levels, env):
    rng = np.random.default_rng(_simcore_py.splitmix64(int(seed) ^ 0x5DEECE66D)[1])
    if levels is None:
        lv = np.full(N, p.C + p.L, dtype=np.int64)
    else:
        lv = np.asarray(levels, dtype=np.int64) + p.L
        if lv.shape != (N,) or lv.min() < 0 or lv.max() >= p.n_levels:
            raise InvalidParameterError("initial levels must be N values in [-L, K+L]")
    n_env = 1 if mode is SimMode.PHYSICAL else N
    if env is None:
        ev = rng.choice(p.m, size=n_env, p=p.env.theta).astype(np.int64)
    else:
        ev = np.broadcast_to(np.asarray(env, dtype=np.int64), (n_env,)).copy()
        if ev.min() < 0 or ev.max() >= p.m:
            raise InvalidParameterError("initial environment state out of range")
    if mode is SimMode.PHYSICAL and np.maximum(lv - p.L, 0).sum() > N * p.C:
        raise InvalidParameterError("initial levels hold more than N*C bikes")
    return lv, ev


def run(p: ModelParams, N: int, horizon: float, seed: int = 0, mode=SimMode.PHYSICAL, sample_times=None,
        burn_in_frac: float = 0.2, n_batches: int = 20, max_events: int | None = None,
        check_conservation: bool = False, tuples=None, levels=None, env=None, backend: str | None = None) -> SimResult:
    """Simulate one replication up to ``horizon`` hours.

    Parameters
    ----------
    p : ModelParams
    N : int
        Number of stations.
    horizon : float
    seed : int
        Unsigned 64-bit seed; identical inputs give bit-identical output.
    mode : SimMode or str
    sample_times : array_like, optional
        Grid on which the empirical measure is recorded (default: 101 points).
    burn_in_frac : float
        Leading fraction of the horizon excluded from time averages.
    n_batches : int
        The post-burn-in window is cut into this many batches (for CIs).
    max_events : int, optional
        Stop after this many events; time averages then cover ``[burn_in, t_end]``.
    check_conservation : bool
        Physical mode only: recount all bikes after every event, raising
        :class:`ConservationError` on any mismatch.
    tuples : (n, k) int array, optional
        Station tuples whose joint level occupancy is recorded.
    levels, env : optional
        Initial levels (default: every station at ``C``) and environment
        state(s) (default: drawn from ``theta``).
    """
    mode = SimMode.parse(mode)
    if N < 1:
        raise InvalidParameterError("need at least one station")
    if horizon <= 0:
        raise InvalidParameterError("horizon must be positive")
    if not 0.0 <= burn_in_frac < 1.0:
        raise InvalidParameterError("burn_in_frac must lie in [0, 1)")
    core = get_backend(backend)
    burn_in = burn_in_frac * horizon
    cps = burn_in + np.arange(n_batches + 1) * ((horizon - burn_in) / n_batches)
    cps[-1] = horizon
    times = np.linspace(0.0, horizon, 101) if sample_times is None else np.asarray(sample_times, dtype=float)
    tup = np.zeros((0, 1), dtype=np.int64) if tuples is None else np.ascontiguousarray(tuples, dtype=np.int64)
    if tup.size and (tup.min() < 0 or tup.max() >= N or len(np.unique(tup)) != tup.size):
        raise InvalidParameterError("tuples must hold distinct station indices")
    lv, ev = _initial_state(p, N, mode, seed, levels, env)
    out = core.simulate(
        0 if mode is SimMode.PHYSICAL else 1, N, p.K, p.C, p.L, p.beta, p.alpha,
        np.array(p.env.W, dtype=float), np.array(p.env.lam, dtype=float), np.array(p.env.mu, dtype=float),
        service_rates(p), _own_bikes(p), _bounce_factor(p), lv, ev, float(horizon), cps, times,
        int(max_events if max_events is not None else 2 ** 62), bool(check_conservation),
        int(seed) & _simcore_py.MASK, tup)
    if out["violations"]:
        raise ConservationError(f"bike count changed at event {out['first_violation']}",
                                event=out["first_violation"])
    t_end = float(out["t_end"])
    batch_len = np.clip(np.minimum(t_end, cps[1:]) - cps[:-1], 0.0, None)
    shape = (p.n_levels, p.m)
    return SimResult(
        mode=mode, N=N, seed=int(seed), horizon=float(horizon), burn_in=burn_in, times=times,
        samples=out["samples"].reshape(len(times), *shape), batch_occ=out["occ"].reshape(n_batches, *shape),
        batch_len=batch_len, events=int(out["events"]), t_end=t_end, final_levels=out["levels"] - p.L,
        final_env=out["env"], in_transit=int(out["in_transit"]), clamp_events=int(out["clamps"]),
        backend="python" if core is _simcore_py else "cython", joint=out["joint"],
        tuple_size=int(tup.shape[1]) if tup.size else 0)


# --------------------------------------------------------------------------- propagation of chaos


@dataclass
class ChaosResult:
    k: int
    n_tuples: int
    joint: np.ndarray      # (n_levels,) * k
    product: np.ndarray    # same shape
    tv: float
    ci: tuple[float, float]


def _pooled_marginal(J: np.ndarray) -> np.ndarray:
    k = J.ndim
    return sum(J.sum(axis=tuple(a for a in range(k) if a != r)) for r in range(k)) / k


def _product(marg: np.ndarray, k: int) -> np.ndarray:
    out = marg
    for _ in range(k - 1):
        out = np.multiply.outer(out, marg)
    return out


def _chaos_tv(joint_flat: np.ndarray, nl: int, k: int):
    J = (joint_flat / joint_flat.sum()).reshape((nl,) * k)
    # codes are little-endian in tuple position; transpose so axis r is position r
    J = J.transpose(tuple(range(k - 1, -1, -1)))
    P = _product(_pooled_marginal(J), k)
    return J, P, tv_distance(J, P)


def chaos_check(p: ModelParams, N: int, horizon: float, seed: int = 0, k: int = 2, burn_in_frac: float = 0.2,
                mode=SimMode.PAPER_RATES, n_batches: int = 20, n_boot: int = 500, level: float = 0.95,
                backend: str | None = None) -> ChaosResult:
    """Distance between the joint level law of ``k`` stations and the product of marginals.

    Stations are grouped into ``N // k`` disjoint tuples whose time-averaged
    joint occupancy is pooled; the marginal is pooled over all tagged
    stations.  The confidence interval comes from resampling batches.
    """
    if not 1 <= k <= N:
        raise InvalidParameterError("need 1 <= k <= N")
    n_tup = N // k
    tuples = np.arange(n_tup * k, dtype=np.int64).reshape(n_tup, k)
    res = run(p, N, horizon, seed=seed, mode=mode, burn_in_frac=burn_in_frac, n_batches=n_batches,
              tuples=tuples, sample_times=[], backend=backend)
    nl = p.n_levels
    joint = res.joint[res.batch_len > 0]
    J, P, tv = _chaos_tv(joint.sum(axis=0), nl, k)
    rng = np.random.default_rng(_simcore_py.splitmix64(int(seed) ^ 0xC4A05)[1])
    boots = []
    for _ in range(n_boot):
        pick = rng.integers(0, len(joint), len(joint))
        boots.append(_chaos_tv(joint[pick].sum(axis=0), nl, k)[2])
    lo, hi = np.quantile(boots, [(1 - level) / 2, (1 + level) / 2]) if boots else (tv, tv)
    return ChaosResult(k=k, n_tuples=n_tup, joint=J, product=P, tv=tv, ci=(float(lo), float(hi)))


# --------------------------------------------------------------------------- convergence in N


@dataclass
class ConvergenceRow:
    N: int
    seeds: list[int]
    distances: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.distances))

    @property
    def stderr(self) -> float:
        d = np.asarray(self.distances)
        return float(d.std(ddof=1) / np.sqrt(len(d))) if len(d) > 1 else 0.0


@dataclass
class ConvergenceTable:
    rows: list[ConvergenceRow]
    mode: SimMode

    def decreasing(self, z: float = 2.0) -> bool:
        """True when each mean drops by more than ``z`` combined standard errors."""
        for a, b in zip(self.rows[:-1], self.rows[1:]):
            if a.mean - b.mean <= z * np.hypot(a.stderr, b.stderr):
                return False
        return True

    def to_csv(self, path, header_lines=()) -> None:
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            fh.write("N,replications,mean_tv,stderr,distances\n")
            for r in self.rows:
                fh.write(f"{r.N},{len(r.distances)},{r.mean!r},{r.stderr!r},"
                         + ";".join(repr(d) for d in r.distances) + "\n")


def _one(args):
    p, N, horizon, seed, mode, burn_in_frac, backend = args
    return run(p, N, horizon, seed=seed, mode=mode, burn_in_frac=burn_in_frac, sample_times=[],
               backend=backend).level_marginal


def convergence_sweep(p: ModelParams, N_list, horizon: float, seeds=5, pi=None, master_seed: int = 0,
                      mode=SimMode.PAPER_RATES, burn_in_frac: float = 0.2, workers: int = 1,
                      backend: str | None = None) -> ConvergenceTable:
    """TV distance between the time-averaged level marginal and ``pi`` for each ``N``.

    ``seeds`` is a replication count (seeds derived from ``master_seed``) or
    an explicit list used for every ``N``.  ``pi`` defaults to the
    standard-mode fixed point.
    """
    if pi is None:
        from .qbd import solve_fixed_point
        pi = solve_fixed_point(p).pi
    target = np.asarray(pi).reshape(p.n_levels, p.m).sum(axis=1)
    N_list = list(N_list)
    if isinstance(seeds, int):
        flat = split_seeds(master_seed, seeds * len(N_list))
        seed_sets = [flat[i * seeds:(i + 1) * seeds] for i in range(len(N_list))]
    else:
        seed_sets = [list(seeds)] * len(N_list)
    jobs = [(p, N, horizon, s, mode, burn_in_frac, backend) for N, ss in zip(N_list, seed_sets) for s in ss]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            marginals = list(ex.map(_one, jobs))
    else:
        marginals = [_one(j) for j in jobs]
    rows, i = [], 0
    for N, ss in zip(N_list, seed_sets):
        d = [tv_distance(mg, target) for mg in marginals[i:i + len(ss)]]
        rows.append(ConvergenceRow(N=N, seeds=list(ss), distances=d))
        i += len(ss)
    return ConvergenceTable(rows=rows, mode=SimMode.parse(mode))


def trajectory_gap(sim: SimResult, p: ModelParams, n: int | None = None) -> float:
    """Sup-distance between the sampled empirical trajectory and the ODE started from its initial measure."""
    from .meanfield import integrate
    ok = ~np.isnan(sim.samples.reshape(len(sim.times), -1)).any(axis=1)
    times = sim.times[ok]
    traj = integrate(sim.samples[0], p, n=n, t_end=float(times[-1]), t_eval=times)
    return float(np.abs(traj.states - sim.samples[ok]).max())
