"""Integration of the mean-field equations ``dy/dt = y V_y``.

Uses an explicit Dormand-Prince 5(4) pair with max-norm error control.
Output times are hit exactly (steps are shortened to land on them), so no
dense-output interpolation is involved.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import IntegrationAbortError, RetrySeriesDivergenceError, SteadyStateNotReachedError
from .generator import AssemblyMode, drift
from .rates import ClampCounter, ModelParams

log = logging.getLogger(__name__)

# Dormand-Prince 5(4) tableau
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4


@dataclass
class StepControl:
    rtol: float = 1e-8
    atol: float = 1e-10
    h0: float = 1e-4
    h_max: float = np.inf
    h_min: float = 1e-14
    # negative entries above this are roundoff and get clamped; below it the run aborts
    neg_tol: float = 1e-8
    max_steps: int = 10_000_000


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (T, n_levels, m)
    mode: AssemblyMode
    n: int | None
    accepted: int = 0
    rejected: int = 0
    clamp_events: int = 0
    negativity_clamps: int = 0
    max_mass_error: float = 0.0
    derivative_norm: float | None = None

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def to_csv(self, path, p: ModelParams, header_lines=()) -> None:
        """Time column plus one column per ``(level, env)`` pair."""
        cols = [f"y[{k},{j + 1}]" for k in p.levels for j in range(p.m)]
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            fh.write("t," + ",".join(cols) + "\n")
            for t, s in zip(self.times, self.states):
                fh.write(f"{float(t)!r}," + ",".join(repr(float(v)) for v in s.ravel()) + "\n")


class _RHS:
    def __init__(self, p, n, mode, clamps):
        self.p, self.n, self.mode, self.clamps = p, n, mode, clamps

    def __call__(self, y):
        return drift(y, self.p, n=self.n, mode=self.mode, diagnostics=self.clamps)


class _DP45:
    """Single-trajectory Dormand-Prince stepper with FSAL reuse."""

    def __init__(self, f, y0, ctrl: StepControl):
        self.f = f
        self.ctrl = ctrl
        self.y = np.array(y0, dtype=float)
        self.t = 0.0
        self.h = ctrl.h0
        self.k_first = f(self.y)
        self.accepted = 0
        self.rejected = 0
        self.neg_clamps = 0

    def step(self, h_cap: float) -> None:
        ctrl = self.ctrl
        while True:
            h = min(self.h, h_cap, ctrl.h_max)
            if h < ctrl.h_min:
                raise IntegrationAbortError(f"step size underflow at t={self.t}", time=self.t)
            try:
                ks = [self.k_first]
                for i in range(1, 7):
                    yi = self.y + h * sum(a * k for a, k in zip(_A[i], ks))
                    ks.append(self.f(yi))
            except RetrySeriesDivergenceError:
                self.h = h * 0.25
                self.rejected += 1
                continue
            y_new = self.y + h * sum(b * k for b, k in zip(_B5[:6], ks[:6]))
            err_vec = h * sum(e * k for e, k in zip(_E, ks))
            scale = ctrl.atol + ctrl.rtol * np.maximum(np.abs(self.y), np.abs(y_new))
            err = float(np.max(np.abs(err_vec) / scale))
            if err <= 1.0:
                self.t += h
                self.accepted += 1
                self._accept(y_new, ks[6])
                factor = 5.0 if err == 0 else min(5.0, max(0.2, 0.9 * err ** -0.2))
                if h == self.h:
                    self.h = h * factor
                else:
                    self.h = max(self.h, h * factor)
                return
            self.rejected += 1
            self.h = h * max(0.2, 0.9 * err ** -0.2)

    def _accept(self, y_new, k_last):
        neg = y_new < 0
        if neg.any():
            worst = float(y_new.min())
            if worst < -self.ctrl.neg_tol:
                raise IntegrationAbortError(
                    f"state went negative ({worst:.3e}) at t={self.t}; rate formula inadmissible here",
                    time=self.t)
            y_new = np.where(neg, 0.0, y_new)
            y_new /= y_new.sum()
            self.neg_clamps += int(neg.sum())
            k_last = self.f(y_new)
        self.y = y_new
        self.k_first = k_last


def _check_initial(g, p: ModelParams) -> np.ndarray:
    y0 = np.asarray(g, dtype=float).reshape(p.n_levels, p.m)
    if np.any(y0 < 0) or abs(y0.sum() - 1.0) > 1e-9:
        raise ValueError("initial condition must be a probability vector")
    return y0


def integrate(g, p: ModelParams, n: int | None = None, mode=AssemblyMode.STANDARD, t_end: float = 10.0,
              ctrl: StepControl | None = None, t_eval=None) -> Trajectory:
    """Integrate from ``g`` to ``t_end`` hours.

    Output is stored at ``t_eval`` (default: 101 evenly spaced times including
    0 and ``t_end``).
    """
    if t_end <= 0:
        raise ValueError("t_end must be positive")
    mode = AssemblyMode.parse(mode)
    ctrl = ctrl or StepControl()
    y0 = _check_initial(g, p)
    grid = np.linspace(0.0, t_end, 101) if t_eval is None else np.asarray(t_eval, dtype=float)
    if np.any(np.diff(grid) <= 0) or grid[0] < 0 or grid[-1] > t_end:
        raise ValueError("t_eval must be strictly increasing within [0, t_end]")
    clamps = ClampCounter()
    try:
        stepper = _DP45(_RHS(p, n, mode, clamps), y0, ctrl)
    except RetrySeriesDivergenceError as exc:
        raise IntegrationAbortError(f"rate evaluation failed at t=0: {exc}", time=0.0) from exc
    states = []
    mass_err = 0.0
    for t_out in grid:
        while stepper.t < t_out - 1e-12 * max(1.0, t_out):
            stepper.step(t_out - stepper.t)
            if stepper.accepted > ctrl.max_steps:
                raise IntegrationAbortError("step budget exhausted", time=stepper.t)
        states.append(stepper.y.copy())
        mass_err = max(mass_err, abs(stepper.y.sum() - 1.0))
    return Trajectory(times=grid.copy(), states=np.array(states), mode=mode, n=n, accepted=stepper.accepted,
                      rejected=stepper.rejected, clamp_events=clamps.count, negativity_clamps=stepper.neg_clamps,
                      max_mass_error=mass_err, derivative_norm=float(np.abs(stepper.k_first).max()))


@dataclass
class SteadyState:
    y: np.ndarray
    time: float
    derivative_norm: float
    trajectory: Trajectory = field(repr=False, default=None)


def steady_state_by_integration(p: ModelParams, n: int | None = None, mode=AssemblyMode.STANDARD, g=None,
                                tol: float = 1e-10, t_max: float = 2000.0, ctrl: StepControl | None = None,
                                record_every: float = 1.0) -> SteadyState:
    """Integrate until ``||dy/dt||_inf < tol`` and return the state reached.

    The trajectory is recorded every ``record_every`` hours (plus the final
    point) so that conservation can be audited afterwards.  The default step
    control is tighter than for :func:`integrate`: with ``atol=1e-10`` the
    state jitters at a level where ``||dy/dt||`` cannot drop below ~1e-8.
    """
    mode = AssemblyMode.parse(mode)
    ctrl = ctrl or StepControl(rtol=1e-10, atol=1e-12)
    y0 = _check_initial(p.point_mass() if g is None else g, p)
    clamps = ClampCounter()
    stepper = _DP45(_RHS(p, n, mode, clamps), y0, ctrl)
    times, states = [0.0], [y0.copy()]
    next_record = record_every
    mass_err = abs(y0.sum() - 1.0)
    while True:
        dnorm = float(np.abs(stepper.k_first).max())
        if dnorm < tol:
            break
        if stepper.t >= t_max:
            raise SteadyStateNotReachedError(
                f"derivative norm {dnorm:.3e} still above {tol:.1e} at t_max={t_max}",
                derivative_norm=dnorm, state=stepper.y.copy())
        stepper.step(min(next_record, t_max) - stepper.t)
        if stepper.t >= next_record - 1e-12:
            times.append(stepper.t)
            states.append(stepper.y.copy())
            mass_err = max(mass_err, abs(stepper.y.sum() - 1.0))
            next_record += record_every
    if times[-1] != stepper.t:
        times.append(stepper.t)
        states.append(stepper.y.copy())
        mass_err = max(mass_err, abs(stepper.y.sum() - 1.0))
    traj = Trajectory(times=np.array(times), states=np.array(states), mode=mode, n=n, accepted=stepper.accepted,
                      rejected=stepper.rejected, clamp_events=clamps.count, negativity_clamps=stepper.neg_clamps,
                      max_mass_error=mass_err, derivative_norm=dnorm)
    return SteadyState(y=stepper.y.copy(), time=stepper.t, derivative_norm=dnorm, trajectory=traj)
