"""Virtual service and arrival rates of the tagged-station reference queue.

Levels run from ``-L`` (renter waiting room full) to ``K+L`` (returner waiting
room full).  Arrays indexed by level use offset ``k + L``; mean-field vectors
are stored as ``(K+2L+1, m)`` arrays (level-major, matching the flattened
``(level, env)`` ordering).

A "service" moves the level down by one (a bike is rented), an "arrival"
moves it up (a bike is returned).
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass

import numpy as np

from .env import EnvironmentSpec
from .errors import InvalidParameterError, RateDomainError, RetrySeriesDivergenceError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelParams:
    K: int
    C: int
    L: int
    alpha: float
    beta: float
    env: EnvironmentSpec

    def __post_init__(self):
        if not (1 <= self.C <= self.K):
            raise InvalidParameterError(f"need 1 <= C <= K, got C={self.C}, K={self.K}")
        if self.L < 0:
            raise InvalidParameterError("L must be nonnegative")
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvalidParameterError(f"{name} must lie in [0, 1], got {v}")

    @property
    def m(self) -> int:
        return self.env.m

    @property
    def n_levels(self) -> int:
        return self.K + 2 * self.L + 1

    @property
    def dim(self) -> int:
        return self.n_levels * self.m

    @property
    def levels(self) -> np.ndarray:
        return np.arange(-self.L, self.K + self.L + 1)

    def offset(self, k: int) -> int:
        if not -self.L <= k <= self.K + self.L:
            raise RateDomainError(f"level {k} outside [{-self.L}, {self.K + self.L}]")
        return k + self.L

    def replace(self, **changes) -> "ModelParams":
        return dataclasses.replace(self, **changes)

    def point_mass(self, level: int | None = None) -> np.ndarray:
        """Mass ``theta_j`` at ``(level, j)``; defaults to level ``C``."""
        y = np.zeros((self.n_levels, self.m))
        y[self.offset(self.C if level is None else level)] = self.env.theta
        return y

    def to_dict(self) -> dict:
        return {"K": self.K, "C": self.C, "L": self.L, "alpha": self.alpha, "beta": self.beta, **self.env.to_dict()}


class ClampCounter:
    """Tally of arrival rates clamped at zero because the interaction scalar went negative."""

    def __init__(self):
        self.count = 0

    def add(self, n: int) -> None:
        self.count += int(n)


def as_levels(y, p: ModelParams) -> np.ndarray:
    """View a flat or 2-D mean-field vector as a ``(n_levels, m)`` array."""
    y = np.asarray(y, dtype=float)
    return y.reshape(p.n_levels, p.m)


def service_rate(k: int, j: int, p: ModelParams) -> float:
    """Rate at which level ``k`` drops to ``k-1`` in environment state ``j`` (0-based)."""
    if k == -p.L:
        raise RateDomainError(f"no service at the floor level {-p.L}")
    p.offset(k)
    lam = p.env.lam[j]
    return float(lam if k >= 1 else lam * p.alpha)


def service_rates(p: ModelParams) -> np.ndarray:
    """All service rates as a ``(n_levels, m)`` array, zero at level ``-L``."""
    lev = p.levels[:, None]
    eta = np.where(lev >= 1, p.env.lam[None, :], p.alpha * p.env.lam[None, :])
    eta[0] = 0.0
    return eta


def interaction_scalar(y, p: ModelParams) -> np.ndarray:
    """Mean number of bikes on the road per station, one value per environment state.

    Parked bikes are subtracted from ``C``; returners bounced by full stations
    add the closed form ``x / (1 - x)**2`` of the retry series.
    """
    Y = as_levels(y, p)
    K, L = p.K, p.L
    lev = p.levels
    parked = (np.where(lev >= 1, lev, 0)[:, None] * Y).sum(axis=0)
    x = (1.0 - p.beta) * Y[K + L: K + 2 * L]  # levels K .. K+L-1
    top = Y[-1]
    if np.any(x >= 1.0):
        k_bad, j_bad = np.argwhere(x >= 1.0)[0]
        raise RetrySeriesDivergenceError("retry series diverges", level=K + int(k_bad), env_state=int(j_bad))
    if np.any(top >= 1.0):
        raise RetrySeriesDivergenceError("retry series diverges", level=K + L, env_state=int(np.argmax(top)))
    return p.C - parked + (x / (1.0 - x) ** 2).sum(axis=0) + top / (1.0 - top) ** 2


def _bounce_factor(p: ModelParams) -> np.ndarray:
    """Per-level factor on the interaction term: 1 below K, beta in the returner room, 0 at the top."""
    lev = p.levels
    f = np.where(lev < p.K, 1.0, p.beta)
    f[-1] = 0.0
    return f


def _own_bikes(p: ModelParams) -> np.ndarray:
    """Bikes the tagged station itself has put on the road, by level."""
    lev = p.levels
    return np.where(lev <= 0, p.C, np.where(lev < p.C, p.C - lev, 0)).astype(float)


def arrival_rates(y, p: ModelParams, n: int | None = None, diagnostics: ClampCounter | None = None) -> np.ndarray:
    """Virtual arrival rates ``xi[k, j]`` for every level (zero at ``K+L``).

    ``n=None`` gives the limiting form ``mu_j * zeta_j`` (times ``beta`` in the
    returner waiting room); an integer gives the finite-``N`` form.  Negative
    values are clamped to zero and tallied in ``diagnostics``.
    """
    return rates_from_interaction(interaction_scalar(y, p), p, n=n, diagnostics=diagnostics)


def rates_from_interaction(zeta, p: ModelParams, n: int | None = None,
                           diagnostics: ClampCounter | None = None) -> np.ndarray:
    """Arrival rates for a given interaction vector ``zeta`` (see :func:`arrival_rates`)."""
    zeta = np.asarray(zeta, dtype=float)
    mu = p.env.mu
    if n is None:
        base = np.broadcast_to(mu * zeta, (p.n_levels, p.m))
    else:
        if n < 1:
            raise InvalidParameterError("station count must be >= 1")
        base = (mu[None, :] / n) * (_own_bikes(p)[:, None] + (n - 1) * zeta[None, :])
    xi = base * _bounce_factor(p)[:, None]
    neg = xi < 0
    if neg.any():
        if diagnostics is not None:
            diagnostics.add(neg.sum())
        log.debug("clamped %d negative arrival rates", int(neg.sum()))
        xi = np.where(neg, 0.0, xi)
    return xi


def _check_arrival_level(l: int, p: ModelParams) -> None:
    if l == p.K + p.L:
        raise RateDomainError(f"no arrival at the ceiling level {p.K + p.L}")
    p.offset(l)


def arrival_rate_finite(l: int, j: int, y, n: int, p: ModelParams) -> float:
    """Finite-``N`` virtual arrival rate at level ``l``, environment state ``j``."""
    _check_arrival_level(l, p)
    return float(arrival_rates(y, p, n=n)[p.offset(l), j])


def arrival_rate_limit(l: int, j: int, y, p: ModelParams) -> float:
    """Limiting (``N -> infinity``) virtual arrival rate."""
    _check_arrival_level(l, p)
    return float(arrival_rates(y, p)[p.offset(l), j])
