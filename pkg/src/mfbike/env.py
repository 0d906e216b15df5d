"""Markovian environment construction.

A day is cut into ``m`` segments (each possibly a union of intervals).  The
environment is the cyclic chain that visits the segments in order, with
holding rates chosen so that its stationary law reproduces the segment
durations.  Per-state rent/return rates are time averages of rate profiles
over each segment.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InvalidParameterError, InvalidSegmentationError, NoUniqueStationaryVectorError

DAY_HOURS = 24.0
_PARTITION_TOL = 1e-9


class RateProfile:
    """Piecewise rate function on ``[0, 24)`` given by breakpoints.

    Parameters
    ----------
    breakpoints : sequence of (t, rate)
        Strictly increasing times in hours.
    kind : {"linear", "constant"}
        ``"linear"`` interpolates between breakpoints; ``"constant"`` holds the
        value of breakpoint ``i`` on ``[t_i, t_{i+1})``.  Outside the breakpoint
        range the nearest value is held.
    """

    def __init__(self, breakpoints: Sequence[Sequence[float]], kind: str = "linear"):
        pts = np.asarray(breakpoints, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) == 0:
            raise InvalidParameterError("breakpoints must be a nonempty list of (t, rate) pairs")
        if kind not in ("linear", "constant"):
            raise InvalidParameterError(f"unknown profile kind {kind!r}")
        if np.any(np.diff(pts[:, 0]) <= 0):
            raise InvalidParameterError("breakpoint times must be strictly increasing")
        if np.any(pts[:, 1] < 0):
            raise InvalidParameterError("rates must be nonnegative")
        self.times = pts[:, 0].copy()
        self.rates = pts[:, 1].copy()
        self.kind = kind

    @classmethod
    def constant(cls, rate: float) -> "RateProfile":
        return cls([(0.0, rate)], kind="constant")

    def __call__(self, t):
        return self.eval(t)

    def eval(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "linear":
            return np.interp(t, self.times, self.rates)
        idx = np.searchsorted(self.times, t, side="right") - 1
        return self.rates[np.clip(idx, 0, len(self.rates) - 1)]

    def integral(self, a: float, b: float) -> float:
        """Exact integral over ``[a, b]``."""
        if b <= a:
            return 0.0
        inner = self.times[(self.times > a) & (self.times < b)]
        grid = np.concatenate(([a], inner, [b]))
        if self.kind == "linear":
            vals = self.eval(grid)
            return float(np.sum(0.5 * (vals[1:] + vals[:-1]) * np.diff(grid)))
        return float(np.sum(self.eval(grid[:-1]) * np.diff(grid)))

    def _combine(self, other: "RateProfile", a: float, b: float) -> "RateProfile":
        if other.kind != self.kind:
            raise InvalidParameterError("cannot combine profiles of different kinds")
        grid = np.union1d(self.times, other.times)
        return RateProfile(np.column_stack([grid, a * self.eval(grid) + b * other.eval(grid)]), self.kind)

    def __add__(self, other: "RateProfile") -> "RateProfile":
        return self._combine(other, 1.0, 1.0)

    def __mul__(self, c: float) -> "RateProfile":
        if c < 0:
            raise InvalidParameterError("profiles can only be scaled by nonnegative factors")
        return RateProfile(np.column_stack([self.times, c * self.rates]), self.kind)

    __rmul__ = __mul__

    def to_list(self) -> list[list[float]]:
        return [[float(t), float(r)] for t, r in zip(self.times, self.rates)]


@dataclass(frozen=True)
class DaySegmentation:
    """Ordered partition of ``[0, 24)`` into segments that are unions of intervals."""

    segments: tuple[tuple[tuple[float, float], ...], ...]

    def __post_init__(self):
        segs = tuple(tuple((float(a), float(b)) for a, b in seg) for seg in self.segments)
        object.__setattr__(self, "segments", segs)
        if not segs:
            raise InvalidSegmentationError("segmentation needs at least one segment")
        for i, seg in enumerate(segs):
            if not seg:
                raise InvalidSegmentationError(f"segment {i} is empty")
            for a, b in seg:
                if b <= a:
                    raise InvalidSegmentationError(f"segment {i} has zero-length or reversed interval [{a}, {b})")
        pieces = sorted(iv for seg in segs for iv in seg)
        cursor = 0.0
        for a, b in pieces:
            if abs(a - cursor) > _PARTITION_TOL:
                kind = "overlap" if a < cursor else "gap"
                raise InvalidSegmentationError(f"segments do not partition the day ({kind} at t={min(a, cursor)})")
            cursor = b
        if abs(cursor - DAY_HOURS) > _PARTITION_TOL:
            raise InvalidSegmentationError(f"segments end at {cursor}, not {DAY_HOURS}")

    @classmethod
    def from_breaks(cls, breaks: Sequence[float]) -> "DaySegmentation":
        """Contiguous segments ``[b0, b1), [b1, b2), ...``; ``breaks`` must span the day."""
        return cls(tuple(((a, b),) for a, b in zip(breaks[:-1], breaks[1:])))

    @classmethod
    def three_peak_day(cls) -> "DaySegmentation":
        """Seven-part day with morning, midday and evening peaks; part one wraps midnight."""
        return cls((
            ((0.0, 6.5), (23.5, 24.0)),
            ((6.5, 8.5),),
            ((8.5, 11.5),),
            ((11.5, 14.0),),
            ((14.0, 17.5),),
            ((17.5, 19.5),),
            ((19.5, 23.5),),
        ))

    @property
    def m(self) -> int:
        return len(self.segments)

    @property
    def durations(self) -> np.ndarray:
        return np.array([sum(b - a for a, b in seg) for seg in self.segments])


def _check_generator(W: np.ndarray, tol: float = 1e-12) -> None:
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise InvalidParameterError("generator must be a square matrix")
    off = W - np.diag(np.diag(W))
    if np.any(off < 0):
        raise InvalidParameterError("generator has negative off-diagonal entries")
    scale = max(1.0, float(np.abs(W).max(initial=0.0)))
    if np.any(np.abs(W.sum(axis=1)) > tol * scale * W.shape[0]):
        raise InvalidParameterError("generator rows must sum to zero")


def stationary_vector(W) -> np.ndarray:
    """Stationary probability vector of an irreducible generator ``W``."""
    W = np.asarray(W, dtype=float)
    _check_generator(W)
    m = W.shape[0]
    if m == 1:
        return np.ones(1)
    sv = np.linalg.svd(W, compute_uv=False)
    if sv[-2] <= 1e-12 * max(sv[0], 1.0) * m:
        raise NoUniqueStationaryVectorError("generator has more than one closed class")
    A = W.T.copy()
    A[-1, :] = 1.0
    rhs = np.zeros(m)
    rhs[-1] = 1.0
    theta = np.linalg.solve(A, rhs)
    theta[np.abs(theta) < 1e-15] = 0.0
    if np.any(theta < 0):
        raise NoUniqueStationaryVectorError("stationary solve produced negative mass")
    return theta / theta.sum()


def _limit_from_uniform(W: np.ndarray) -> np.ndarray:
    """Long-run law of a (possibly reducible) generator started from the uniform law."""
    m = W.shape[0]
    q = 2.0 * max(float(np.abs(np.diag(W)).max()), 1e-300)
    P = np.eye(m) + W / q
    for _ in range(64):
        P = P @ P
        P /= P.sum(axis=1, keepdims=True)
    theta = np.full(m, 1.0 / m) @ P
    return theta / theta.sum()


def build_cyclic_generator(seg: DaySegmentation, time_scale: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic environment generator whose stationary law matches segment durations.

    State ``i`` moves to ``i+1`` (the last state wraps to the first) at rate
    ``x_i = theta_m / theta_i``, normalised so that ``x_m = 1``; ``time_scale``
    multiplies every rate.

    Returns
    -------
    W : (m, m) ndarray
    theta : (m,) ndarray
    """
    d = seg.durations
    if np.any(d <= 0):
        raise InvalidSegmentationError("segment durations must be positive")
    if time_scale <= 0:
        raise InvalidParameterError("time_scale must be positive")
    theta = d / d.sum()
    m = len(d)
    if m == 1:
        return np.zeros((1, 1)), np.ones(1)
    x = theta[-1] / theta * time_scale
    W = np.zeros((m, m))
    for i in range(m):
        W[i, i] = -x[i]
        W[i, (i + 1) % m] = x[i]
    return W, theta


def average_rates(rent: RateProfile, ret: RateProfile, seg: DaySegmentation) -> tuple[np.ndarray, np.ndarray]:
    """Segment-wise time averages of the rent and return profiles."""
    d = seg.durations
    lam = np.array([sum(rent.integral(a, b) for a, b in s) for s in seg.segments]) / d
    mu = np.array([sum(ret.integral(a, b) for a, b in s) for s in seg.segments]) / d
    return lam, mu


@dataclass(frozen=True)
class EnvironmentSpec:
    """Environment generator plus per-state arrival (``lam``) and ride-completion (``mu``) rates."""

    W: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    theta: np.ndarray = field(default=None)

    def __post_init__(self):
        W = np.array(self.W, dtype=float, ndmin=2)
        lam = np.array(self.lam, dtype=float, ndmin=1)
        mu = np.array(self.mu, dtype=float, ndmin=1)
        _check_generator(W)
        m = W.shape[0]
        if lam.shape != (m,) or mu.shape != (m,):
            raise InvalidParameterError(f"lam and mu must have length {m}")
        if np.any(lam < 0) or np.any(mu < 0):
            raise InvalidParameterError("rates must be nonnegative")
        if self.theta is not None:
            theta = np.array(self.theta, dtype=float)
        else:
            try:
                theta = stationary_vector(W)
            except NoUniqueStationaryVectorError:
                theta = _limit_from_uniform(W)
        if m > 1 and np.abs(theta @ W).max() > 1e-10:
            raise InvalidParameterError("theta is not stationary for W")
        for name, val in (("W", W), ("lam", lam), ("mu", mu), ("theta", theta)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def m(self) -> int:
        return self.W.shape[0]

    @classmethod
    def from_segmentation(
        cls,
        seg: DaySegmentation,
        rent: RateProfile | None = None,
        ret: RateProfile | None = None,
        lam=None,
        mu=None,
        time_scale: float = 1.0,
    ) -> "EnvironmentSpec":
        """Build from a segmentation; explicit ``lam``/``mu`` override profile averages."""
        W, theta = build_cyclic_generator(seg, time_scale)
        if lam is None or mu is None:
            if rent is None or ret is None:
                raise InvalidParameterError("need rate profiles or explicit lam/mu")
            plam, pmu = average_rates(rent, ret, seg)
            lam = plam if lam is None else lam
            mu = pmu if mu is None else mu
        return cls(W=W, lam=lam, mu=mu, theta=theta)

    def scaled(self, c: float) -> "EnvironmentSpec":
        return EnvironmentSpec(W=self.W * c, lam=self.lam * c, mu=self.mu * c, theta=self.theta)

    def to_dict(self) -> dict:
        return {
            "W": self.W.tolist(),
            "theta": self.theta.tolist(),
            "lambda": self.lam.tolist(),
            "mu": self.mu.tolist(),
        }
