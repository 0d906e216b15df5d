"""Fixed point of the nonlinear QBD via LU-type RG-factorization.

For a frozen generator the stationary vector is obtained by block
elimination: the lower levels are censored away one at a time, producing
rate matrices ``R[k]`` with ``pi_{k-1} = pi_k R[k]``, and the boundary vector
solves ``pi_c Xi = 0`` for the censored generator ``Xi`` at the boundary
level ``c`` (the top level by default).  The nonlinear problem
``pi V_pi = 0`` is solved by damped successive substitution around that
linear solve.

The frozen generator depends on ``pi`` only through the interaction vector
``zeta`` (one value per environment state), so the default solver runs a
damped Newton iteration on the ``m`` equations ``zeta(pi(zeta)) = zeta``
with a finite-difference Jacobian; plain damped substitution on ``pi`` is
kept as the alternative method and accepts pluggable update rules.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DegenerateBoundaryError, FactorizationError, MFBikeError
from .generator import AssemblyMode, BlockTridiagonalGenerator, assemble, assemble_from_rates
from .rates import ClampCounter, ModelParams, interaction_scalar, rates_from_interaction, service_rates

log = logging.getLogger(__name__)

_COND_LIMIT = 1e13
_NULL_RTOL = 1e-9


@dataclass(frozen=True)
class RMeasure:
    """Rate matrices and censored boundary generator.

    ``R[k]`` (``k >= 1``, offset index) maps level ``k`` to ``k-1`` below the
    boundary; ``R_up[k]`` maps level ``k`` to ``k+1`` above it.  With the
    default top boundary ``R_up`` is unused.
    """

    R: np.ndarray
    Xi: np.ndarray
    boundary: int
    R_up: np.ndarray | None = None


def _right_solve(A: np.ndarray, U: np.ndarray, level: int) -> np.ndarray:
    """``A @ inv(U)``, refusing numerically singular ``U``."""
    try:
        if np.linalg.cond(U) > _COND_LIMIT:
            raise np.linalg.LinAlgError("ill-conditioned")
        return np.linalg.solve(U.T, A.T).T
    except np.linalg.LinAlgError as exc:
        raise FactorizationError(f"censored block at level offset {level} is singular", level=level) from exc


def _forward(V: BlockTridiagonalGenerator, stop: int):
    """Bottom-up sweep; returns R, the censored blocks U[0..last], and the last offset reached."""
    n, m = V.n_levels, V.m
    R = np.zeros((n, m, m))
    U = np.zeros((n, m, m))
    U[0] = V.local[0]
    for k in range(1, stop + 1):
        if V.down[k].any():
            try:
                R[k] = -_right_solve(V.down[k], U[k - 1], k - 1)
            except FactorizationError:
                return R, U, k - 1
        U[k] = V.local[k] + R[k] @ V.up[k - 1]
    return R, U, stop


def _backward(V: BlockTridiagonalGenerator, stop: int):
    """Top-down mirror of :func:`_forward`; returns R_up and the lowest offset reached."""
    n, m = V.n_levels, V.m
    R_up = np.zeros((n, m, m))
    U = V.local[n - 1].copy()
    for k in range(n - 2, stop - 1, -1):
        if V.up[k].any():
            try:
                R_up[k] = -_right_solve(V.up[k], U, k + 1)
            except FactorizationError:
                return R_up, k + 1
        U = V.local[k] + R_up[k] @ V.down[k + 1]
    return R_up, stop


def rg_factorize(V: BlockTridiagonalGenerator) -> RMeasure:
    """LU-type R-measure with the boundary at the top level.

    ``R[k] = -down[k] (R[k-1] up[k-2] + local[k-1])^{-1}`` and
    ``Xi = R[top] up[top-1] + local[top]``.
    """
    n = V.n_levels
    R, U, reached = _forward(V, n - 1)
    if reached < n - 1:
        raise FactorizationError(f"censored block at level offset {reached} is singular", level=reached)
    return RMeasure(R=R, Xi=U[n - 1], boundary=n - 1)


def _boundary_vector(Xi: np.ndarray, scale: float) -> np.ndarray:
    """Unique probability null vector of a censored generator."""
    m = Xi.shape[0]
    sv = np.linalg.svd(Xi, compute_uv=False)
    if sv[-1] > _NULL_RTOL * scale:
        raise DegenerateBoundaryError("censored generator is nonsingular (boundary level is transient)")
    if m > 1 and sv[-2] <= _NULL_RTOL * scale:
        raise DegenerateBoundaryError("censored generator has a null space of dimension > 1")
    if m == 1:
        return np.ones(1)
    A = Xi.copy()
    A[:, -1] = 1.0
    rhs = np.zeros(m)
    rhs[-1] = 1.0
    return np.linalg.solve(A.T, rhs)


def _back_substitute(rm: RMeasure, pi_c: np.ndarray, n: int) -> np.ndarray:
    m = pi_c.shape[0]
    pi = np.zeros((n, m))
    c = rm.boundary
    pi[c] = pi_c
    for k in range(c - 1, -1, -1):
        pi[k] = pi[k + 1] @ rm.R[k + 1]
    for k in range(c + 1, n):
        pi[k] = pi[k - 1] @ rm.R_up[k - 1]
    total = pi.sum()
    if not np.isfinite(total) or total <= 0:
        raise DegenerateBoundaryError("back-substitution produced no probability mass")
    pi /= total
    pi[(pi < 0) & (pi > -1e-12)] = 0.0
    return pi


def _scale(V: BlockTridiagonalGenerator) -> float:
    return max(1.0, float(np.abs(V.local).max()))


def _two_sided_candidates(V: BlockTridiagonalGenerator):
    n = V.n_levels
    R, U, f_reach = _forward(V, n - 1)
    R_up, b_reach = _backward(V, 0)
    order = [0] + [k for pair in zip(range(n // 2, n - 1), range(n // 2 - 1, 0, -1)) for k in pair]
    order += [k for k in range(1, n - 1) if k not in order]
    for c in order:
        if c > f_reach or c < b_reach:
            continue
        Xi = U[c] + (R_up[c] @ V.down[c + 1] if c + 1 < n else 0.0)
        yield RMeasure(R=R, Xi=Xi, boundary=c, R_up=R_up)


def linear_qbd_solve(V: BlockTridiagonalGenerator, fallback: bool = True) -> np.ndarray:
    """Stationary vector of a frozen generator, as an ``(n_levels, m)`` array.

    The top-level boundary is tried first.  If that level is transient or the
    bottom-up sweep hits a singular block (e.g. a waiting room that can never
    be entered), and ``fallback`` is set, the boundary is moved to an interior
    level and the levels above it are eliminated top-down.
    """
    n = V.n_levels
    scale = _scale(V)
    first_error: Exception | None = None
    try:
        rm = rg_factorize(V)
        return _back_substitute(rm, _boundary_vector(rm.Xi, scale), n)
    except (FactorizationError, DegenerateBoundaryError) as exc:
        if not fallback:
            raise
        first_error = exc
    multi = isinstance(first_error, DegenerateBoundaryError) and "dimension" in str(first_error)
    if not multi:
        for rm in _two_sided_candidates(V):
            try:
                return _back_substitute(rm, _boundary_vector(rm.Xi, scale), n)
            except DegenerateBoundaryError as exc:
                if "dimension" in str(exc):
                    raise
    raise first_error


def stationary_residual(pi, V: BlockTridiagonalGenerator) -> float:
    return float(np.abs(V.left_multiply(pi)).max())


# --------------------------------------------------------------------------- nonlinear solve


class FixedDamping:
    """``pi <- (1 - omega) pi + omega target``."""

    def __init__(self, omega: float):
        if not 0.0 < omega <= 1.0:
            raise ValueError("damping must lie in (0, 1]")
        self.omega = omega

    def __call__(self, pi, target, step):
        return (1.0 - self.omega) * pi + self.omega * target


class AdaptiveDamping(FixedDamping):
    """Damping that halves ``omega`` when the substitution step grows.

    After ``patience`` consecutive shrinking steps ``omega`` is multiplied by
    ``grow``, never exceeding its starting value.
    """

    def __init__(self, omega: float, shrink: float = 0.5, grow: float = 1.25, patience: int = 5,
                 min_omega: float = 1e-3):
        super().__init__(omega)
        self.max_omega = omega
        self.shrink = shrink
        self.grow = grow
        self.patience = patience
        self.min_omega = min_omega
        self._prev = np.inf
        self._run = 0

    def __call__(self, pi, target, step):
        if step > self._prev:
            self.omega = max(self.omega * self.shrink, self.min_omega)
            self._run = 0
        else:
            self._run += 1
            if self._run >= self.patience:
                self.omega = min(self.omega * self.grow, self.max_omega)
                self._run = 0
        self._prev = step
        return super().__call__(pi, target, step)


METHODS = ("newton", "substitution")


@dataclass
class SolverOptions:
    """Outer-iteration settings.

    ``method`` is ``"newton"`` (on ``zeta``) or ``"substitution"`` (on ``pi``);
    ``damping``, ``adaptive`` and ``update`` apply to substitution only, and
    giving ``update`` selects substitution.
    """

    init: str | np.ndarray = "level-C"
    damping: float = 0.5
    tol: float = 1e-10
    max_iter: int = 500
    adaptive: bool = True
    update: Callable | None = None
    method: str = "newton"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")

    def make_update(self):
        if self.update is not None:
            return self.update
        return AdaptiveDamping(self.damping) if self.adaptive else FixedDamping(self.damping)


@dataclass
class FixedPoint:
    pi: np.ndarray
    residual: float
    iterations: int
    mode: AssemblyMode
    converged: bool
    clamp_events: int = 0
    final_damping: float | None = None
    history: list = field(default_factory=list, repr=False)

    @property
    def flat(self) -> np.ndarray:
        return self.pi.ravel()

    def to_dict(self, p: ModelParams | None = None) -> dict:
        d = {
            "mode": self.mode.value,
            "converged": self.converged,
            "residual": self.residual,
            "iterations": self.iterations,
            "clamp_events": self.clamp_events,
            "pi": self.pi.tolist(),
        }
        if p is not None:
            d["levels"] = p.levels.tolist()
        return d

    def to_json(self, path, p: ModelParams | None = None) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(p), fh, indent=2, sort_keys=True)
            fh.write("\n")


def initial_vector(p: ModelParams, init) -> np.ndarray:
    if isinstance(init, str):
        if init == "level-C":
            return p.point_mass()
        if init == "uniform":
            return np.full((p.n_levels, p.m), 1.0 / p.dim)
        raise ValueError(f"unknown init {init!r}")
    y = np.asarray(init, dtype=float).reshape(p.n_levels, p.m)
    return y / y.sum()


def solve_fixed_point(p: ModelParams, mode=AssemblyMode.STANDARD, opts: SolverOptions | None = None,
                      n: int | None = None) -> FixedPoint:
    """Solve ``pi V_pi = 0``, ``pi e = 1``.

    Stops once ``||pi V_pi||_inf <= tol``.  Hitting ``max_iter`` returns the
    best iterate seen with ``converged=False``.  A factorization failure at
    the starting point is raised with the offending iterate attached as
    ``exc.iterate``.
    """
    opts = opts or SolverOptions()
    mode = AssemblyMode.parse(mode)
    if opts.update is not None or opts.method == "substitution":
        return _substitution(p, mode, opts, n)
    return _newton(p, mode, opts, n)


class _Trace:
    """Residual history and best iterate of an outer iteration."""

    def __init__(self):
        self.history = []
        self.best = (np.inf, None, 0)

    def record(self, res, pi, it):
        self.history.append(res)
        if res < self.best[0]:
            self.best = (res, pi, it)

    def result(self, mode, max_iter, clamps, omega):
        res, pi, _ = self.best
        log.warning("fixed point not converged after %d iterations (best residual %.3e)", max_iter, res)
        return FixedPoint(pi=pi, residual=res, iterations=max_iter, mode=mode, converged=False,
                          clamp_events=clamps.count, final_damping=omega, history=self.history)


def _substitution(p, mode, opts, n) -> FixedPoint:
    """Freeze the rates at the current iterate, solve the linear QBD, move part of the way there."""
    update = opts.make_update()
    clamps = ClampCounter()
    pi = initial_vector(p, opts.init)
    trace = _Trace()
    for it in range(opts.max_iter + 1):
        V = assemble(pi, p, n=n, mode=mode, diagnostics=clamps)
        res = stationary_residual(pi, V)
        trace.record(res, pi, it)
        if res <= opts.tol:
            return FixedPoint(pi=pi, residual=res, iterations=it, mode=mode, converged=True,
                              clamp_events=clamps.count, final_damping=getattr(update, "omega", None),
                              history=trace.history)
        if it == opts.max_iter:
            break
        try:
            target = linear_qbd_solve(V)
        except (FactorizationError, DegenerateBoundaryError) as exc:
            exc.iterate = pi
            raise
        step = float(np.abs(target - pi).max())
        pi = update(pi, target, step)
    return trace.result(mode, opts.max_iter, clamps, getattr(update, "omega", None))


class _ZetaMap:
    """``zeta -> pi(zeta)``, the stationary vector of the generator frozen at ``zeta``."""

    def __init__(self, p, mode, n):
        self.p, self.mode, self.n = p, mode, n
        self.eta = service_rates(p)
        self.evals = 0

    def __call__(self, zeta):
        self.evals += 1
        xi = rates_from_interaction(zeta, self.p, n=self.n)
        pi = linear_qbd_solve(assemble_from_rates(xi, self.eta, self.p.env.W, self.mode))
        return pi, interaction_scalar(pi, self.p) - zeta


def _newton(p, mode, opts, n) -> FixedPoint:
    """Damped Newton on ``F(zeta) = zeta(pi(zeta)) - zeta`` with Armijo backtracking on ``|F|``.

    The first step is a full substitution step from the initial vector.  When
    the line search fails the iteration falls back to ``zeta <- zeta + F``.
    """
    clamps = ClampCounter()
    trace = _Trace()
    F_of = _ZetaMap(p, mode, n)
    pi = initial_vector(p, opts.init)
    res = stationary_residual(pi, assemble(pi, p, n=n, mode=mode, diagnostics=clamps))
    trace.record(res, pi, 0)
    if res <= opts.tol:
        return FixedPoint(pi=pi, residual=res, iterations=0, mode=mode, converged=True,
                          clamp_events=clamps.count, history=trace.history)
    zeta = interaction_scalar(pi, p)
    try:
        pi, F = F_of(zeta)
    except (FactorizationError, DegenerateBoundaryError) as exc:
        exc.iterate = pi
        raise
    t = 1.0
    for it in range(1, opts.max_iter + 1):
        res = stationary_residual(pi, assemble(pi, p, n=n, mode=mode, diagnostics=clamps))
        trace.record(res, pi, it)
        if res <= opts.tol:
            return FixedPoint(pi=pi, residual=res, iterations=it, mode=mode, converged=True,
                              clamp_events=clamps.count, final_damping=t, history=trace.history)
        if it == opts.max_iter:
            break
        d = _newton_direction(F_of, zeta, F)
        norm0 = float(np.linalg.norm(F))
        t, trial = 1.0, None
        while t >= 1e-8:
            try:
                cand = F_of(zeta + t * d)
            except MFBikeError:
                cand = None
            if cand is not None and np.linalg.norm(cand[1]) < (1.0 - 1e-4 * t) * norm0:
                trial = cand
                break
            t *= 0.5
        if trial is None:
            t, d = 1.0, F
            trial = F_of(zeta + F)
        zeta = zeta + t * d
        pi, F = trial
    return trace.result(mode, opts.max_iter, clamps, t)


def _newton_direction(F_of, zeta, F):
    m = len(zeta)
    J = np.empty((m, m))
    for i in range(m):
        h = 1e-7 * max(1.0, abs(zeta[i]))
        for sign in (1.0, -1.0):
            z = zeta.copy()
            z[i] += sign * h
            try:
                J[:, i] = (F_of(z)[1] - F) / (sign * h)
                break
            except MFBikeError:
                continue
        else:
            return F
    d, *_ = np.linalg.lstsq(J, -F, rcond=None)
    return d if np.all(np.isfinite(d)) else F
