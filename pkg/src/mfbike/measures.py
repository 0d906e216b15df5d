"""Stationary performance measures of a tagged station."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import InvalidParameterError, NotConvergedError
from .generator import AssemblyMode
from .qbd import FixedPoint, SolverOptions, solve_fixed_point
from .rates import ModelParams


@dataclass(frozen=True)
class PerformanceReport:
    mean_bikes: float        # E[Q]
    mean_wait_rent: float    # E[N1], renters waiting
    mean_wait_return: float  # E[N2], returners waiting
    mean_wait_max: float     # E[N] = max(E[N1], E[N2])
    prob_strong: float       # p_s, a waiting room is full
    prob_weak: float         # p_w, no bike or no free dock

    def to_dict(self) -> dict:
        return asdict(self)


def performance(pi, p: ModelParams) -> PerformanceReport:
    """Weighted sums of the level marginal ``pi_k e``.

    ``pi`` may be a :class:`FixedPoint` or a plain ``(n_levels, m)`` array.
    """
    arr = pi.pi if isinstance(pi, FixedPoint) else np.asarray(pi, dtype=float)
    marg = arr.reshape(p.n_levels, p.m).sum(axis=1)
    k = p.levels
    K = p.K
    eq = float(np.sum(np.where(k >= 1, k, 0) * marg))
    n1 = float(np.sum(np.where(k <= -1, -k, 0) * marg))
    n2 = float(np.sum(np.where(k >= K + 1, k - K, 0) * marg))
    ps = float(marg[0] + marg[-1])
    pw = float(marg[k <= 0].sum() + marg[k >= K].sum())
    return PerformanceReport(mean_bikes=eq, mean_wait_rent=n1, mean_wait_return=n2, mean_wait_max=max(n1, n2),
                             prob_strong=ps, prob_weak=pw)


def efficiency_ratio(p: ModelParams, opts: SolverOptions | None = None, mode=AssemblyMode.STANDARD) -> float:
    """``p_s`` with waiting rooms of size ``L`` divided by ``p_s`` without them.

    Both models are solved from scratch; a non-converged solve raises.
    """
    if p.L < 1:
        raise InvalidParameterError("efficiency ratio needs L >= 1")
    num = _strong(p, opts, mode)
    den = _strong(p.replace(L=0), opts, mode)
    if den == 0.0:
        raise InvalidParameterError("baseline strong probability is zero; ratio undefined")
    return num / den


def _strong(p, opts, mode) -> float:
    fp = solve_fixed_point(p, mode=mode, opts=opts)
    if not fp.converged:
        raise NotConvergedError(f"fixed point not converged at L={p.L}", residual=fp.residual)
    return performance(fp, p).prob_strong
