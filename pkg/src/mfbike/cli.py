"""Command-line front end.

Subcommands: env-build, fixed-point, integrate, simulate, sweep, compare.
Every command reads a TOML config (see :mod:`mfbike.config`) and writes
CSV tables (plus optional SVG plots) into the output directory.  Exit code
is 0 only when every requested computation converged or completed.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import tomli_w

from . import __version__
from . import config as cfgmod
from .errors import DegenerateBoundaryError, FactorizationError, IntegrationAbortError, MFBikeError
from .generator import AssemblyMode
from .measures import efficiency_ratio, performance
from .meanfield import StepControl, integrate, steady_state_by_integration
from .output import header_lines, line_plot, write_csv
from .qbd import SolverOptions, solve_fixed_point
from .rates import ModelParams
from .simulator import SimMode, run, split_seeds, tv_distance

log = logging.getLogger("mfbike")

REPORT_FIELDS = ("mean_bikes", "mean_wait_rent", "mean_wait_return", "mean_wait_max", "prob_strong", "prob_weak")


# --------------------------------------------------------------------------- helpers


def _param_columns(p: ModelParams) -> tuple[list[str], list]:
    cols = ["K", "C", "L", "alpha", "beta"]
    vals = [p.K, p.C, p.L, float(p.alpha), float(p.beta)]
    for j in range(p.m):
        cols.append(f"lambda{j + 1}")
        vals.append(float(p.env.lam[j]))
    for j in range(p.m):
        cols.append(f"mu{j + 1}")
        vals.append(float(p.env.mu[j]))
    return cols, vals


def _solver_opts(cfg) -> SolverOptions:
    s = cfg.section("solver")
    try:
        return SolverOptions(init=s["init"], damping=float(s["damping"]), tol=float(s["tol"]),
                             max_iter=int(s["max_iter"]), adaptive=bool(s["adaptive"]), method=s["method"])
    except ValueError as exc:
        raise cfgmod.ConfigError(f"invalid solver settings: {exc}") from exc


def _mode(cfg) -> AssemblyMode:
    return AssemblyMode.parse(cfg.section("solver")["mode"])


class _Out:
    def __init__(self, cfg):
        self.cfg = cfg
        self.dir = cfg.section("output")["dir"]
        self.plots = bool(cfg.section("output")["plots"])
        os.makedirs(self.dir, exist_ok=True)
        self.written: list[str] = []

    def path(self, name: str) -> str:
        p = os.path.join(self.dir, name)
        self.written.append(p)
        return p

    def headers(self, **extra) -> list[str]:
        return header_lines(self.cfg.resolved_json(), extra)

    def csv(self, name, columns, rows, **extra):
        write_csv(self.path(name), columns, rows, self.headers(**extra))

    def plot(self, name, series, xlabel, ylabel, title=""):
        if self.plots:
            line_plot(self.path(name), series, xlabel, ylabel, title)


# --------------------------------------------------------------------------- commands


def cmd_env_build(cfg, out: _Out) -> int:
    p = cfg.params()
    env = p.env
    doc = {"environment": {"W": env.W.tolist(), "theta": env.theta.tolist(), "lambda": env.lam.tolist(),
                           "mu": env.mu.tolist()}}
    with open(out.path("environment.toml"), "w") as fh:
        for line in out.headers():
            fh.write(f"# {line}\n")
        fh.write(tomli_w.dumps(doc))
    rows = [[j + 1, float(env.theta[j]), float(env.lam[j]), float(env.mu[j])] + [float(w) for w in env.W[j]]
            for j in range(env.m)]
    out.csv("environment.csv", ["state", "theta", "lambda", "mu"] + [f"w{j + 1}" for j in range(env.m)], rows)
    print(f"environment with m={env.m} states written to {out.dir}")
    return 0


def _report_row(p, fp, report):
    cols, vals = _param_columns(p)
    return cols, vals + [getattr(report, f) for f in REPORT_FIELDS] + [fp.residual, fp.iterations, fp.converged]


def cmd_fixed_point(cfg, out: _Out) -> int:
    p = cfg.params()
    mode = _mode(cfg)
    try:
        fp = solve_fixed_point(p, mode=mode, opts=_solver_opts(cfg))
    except (FactorizationError, DegenerateBoundaryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    rows = [[int(k), j + 1, float(fp.pi[i, j])] for i, k in enumerate(p.levels) for j in range(p.m)]
    out.csv("fixed_point.csv", ["level", "env_state", "pi"], rows, mode=mode.value)
    doc = {"version": __version__, "config": json.loads(cfg.resolved_json()), **fp.to_dict(p)}
    with open(out.path("fixed_point.json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    report = performance(fp, p)
    cols, vals = _report_row(p, fp, report)
    out.csv("report.csv", cols + list(REPORT_FIELDS) + ["residual", "iterations", "converged"], [vals],
            mode=mode.value)
    marg = fp.pi.sum(axis=1)
    out.plot("fixed_point.svg", {"pi_k e": (p.levels, marg)}, "level k", "probability")
    status = "converged" if fp.converged else "NOT converged"
    print(f"{status}: residual {fp.residual:.3e} after {fp.iterations} iterations")
    return 0 if fp.converged else 1


def cmd_integrate(cfg, out: _Out) -> int:
    p = cfg.params()
    mode = _mode(cfg)
    s = cfg.section("integrator")
    n = s.get("n")
    t_end = float(s["t_end"])
    ctrl = StepControl(rtol=float(s["rtol"]), atol=float(s["atol"]))
    g = p.point_mass() if s.get("init", "level-C") == "level-C" else np.full((p.n_levels, p.m), 1.0 / p.dim)
    try:
        traj = integrate(g, p, n=n, mode=mode, t_end=t_end, ctrl=ctrl,
                         t_eval=np.linspace(0.0, t_end, int(s["n_out"])))
    except IntegrationAbortError as exc:
        print(f"error: integration aborted at t={exc.time}: {exc}", file=sys.stderr)
        return 1
    traj.to_csv(out.path("trajectory.csv"), p, out.headers(mode=mode.value, n=n if n else "limit"))
    out.csv("integrate_summary.csv",
            ["t_end", "max_mass_error", "derivative_norm", "accepted_steps", "rejected_steps", "clamp_events"],
            [[t_end, traj.max_mass_error, traj.derivative_norm, traj.accepted, traj.rejected, traj.clamp_events]],
            mode=mode.value)
    eq = [performance(y, p).mean_bikes for y in traj.states]
    out.plot("trajectory.svg", {"E[Q](t)": (traj.times, eq)}, "t (hours)", "mean bikes")
    print(f"integrated to t={t_end}; max mass error {traj.max_mass_error:.2e}")
    return 0


def _sim_settings(cfg):
    s = cfg.section("simulation")
    return (int(s["N"]), float(s["horizon"]), int(s["seed"]), SimMode.parse(s["mode"]), float(s["burn_in"]),
            int(s["batches"]), int(s["replications"]), s.get("max_events"), bool(s["check_conservation"]))


def cmd_simulate(cfg, out: _Out) -> int:
    p = cfg.params()
    N, horizon, seed, smode, burn, batches, reps, max_events, check = _sim_settings(cfg)
    seeds = split_seeds(seed, reps)
    fp = solve_fixed_point(p, opts=_solver_opts(cfg))
    target = fp.pi.sum(axis=1)
    rows, margs = [], []
    for i, s in enumerate(seeds):
        res = run(p, N, horizon, seed=s, mode=smode, burn_in_frac=burn, n_batches=batches, max_events=max_events,
                  check_conservation=check)
        if i == 0:
            res.to_csv(out.path("sim_trajectory.csv"), p, out.headers(sim_mode=smode.value, seed=s))
        marg = res.level_marginal
        margs.append(marg)
        rows.append([i, s, res.events, res.t_end, res.clamp_events, res.in_transit, tv_distance(marg, target)]
                    + [float(v) for v in marg])
    cols = ["replication", "seed", "events", "t_end", "clamp_events", "in_transit", "tv_to_fixed_point"]
    cols += [f"p[{k}]" for k in p.levels]
    out.csv("sim_summary.csv", cols, rows, sim_mode=smode.value)
    mean = np.mean(margs, axis=0)
    out.plot("sim_marginal.svg", {"simulation": (p.levels, mean), "fixed point": (p.levels, target)},
             "level k", "probability")
    print(f"{reps} replication(s) of N={N}: mean TV to fixed point {np.mean([r[6] for r in rows]):.4f}")
    return 0


def _sweep_point(args):
    raw, overrides, measure, opts, mode = args
    try:
        p = cfgmod.build_params(raw, overrides)
        fp = solve_fixed_point(p, mode=mode, opts=opts)
        if not fp.converged:
            return p, fp, None, None, f"not-converged (residual {fp.residual:.3e})"
        report = performance(fp, p)
        ups = efficiency_ratio(p, opts, mode) if measure == "efficiency_ratio" else None
        return p, fp, report, ups, "ok"
    except (MFBikeError, ArithmeticError) as exc:
        return None, None, None, None, f"error: {type(exc).__name__}: {exc}"


def cmd_sweep(cfg, out: _Out) -> int:
    if cfg.shape != "sweep":
        raise cfgmod.ConfigError("sweep needs at least one [[panel]] table")
    opts, mode = _solver_opts(cfg), _mode(cfg)
    threads = int(cfg.section("output").get("threads") or os.cpu_count() or 1)
    all_ok = True
    base_cols, _ = _param_columns(cfg.params())
    for pnl in cfg.panels:
        pts = pnl.points()
        jobs = [(cfg.raw, pnl.overrides(cv, xv), pnl.measure, opts, mode) for cv, xv in pts]
        if threads > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=threads) as ex:
                results = list(ex.map(_sweep_point, jobs))
        else:
            results = [_sweep_point(j) for j in jobs]
        rows = []
        series: dict = {}
        for (cv, xv), (p, fp, report, ups, status) in zip(pts, results):
            ok = status == "ok"
            all_ok &= ok
            params = _param_columns(p)[1] if p is not None else [""] * len(base_cols)
            meas = [getattr(report, f) for f in REPORT_FIELDS] if report is not None else [""] * len(REPORT_FIELDS)
            diag = [fp.residual, fp.iterations, fp.converged] if fp is not None else ["", "", False]
            rows.append([pnl.name, xv, cv] + params + meas + [ups if ups is not None else ""] + diag + [status])
            if ok:
                y = ups if pnl.measure == "efficiency_ratio" else getattr(report, pnl.measure)
                xs, ys = series.setdefault(f"{pnl.curve}={cv}" if pnl.curve else pnl.measure, ([], []))
                xs.append(xv)
                ys.append(y)
        cols = ["panel", pnl.x, pnl.curve or "curve"] + base_cols + list(REPORT_FIELDS)
        cols += ["efficiency_ratio", "residual", "iterations", "converged", "status"]
        out.csv(f"sweep_{pnl.name}.csv", cols, rows, measure=pnl.measure, mode=mode.value)
        out.plot(f"sweep_{pnl.name}.svg", series, pnl.x, pnl.measure, pnl.name)
        n_bad = sum(r[-1] != "ok" for r in rows)
        print(f"panel {pnl.name}: {len(rows)} points, {n_bad} failed")
    return 0 if all_ok else 1


def cmd_compare(cfg, out: _Out) -> int:
    p = cfg.params()
    opts = _solver_opts(cfg)
    N, horizon, seed, smode, burn, batches, reps, max_events, _ = _sim_settings(cfg)
    t_max = float(cfg.section("integrator").get("t_max", 2000.0))
    estimates: dict[str, np.ndarray] = {}
    status_rows = []
    ok = True
    for m in cfg.section("compare")["modes"]:
        mode = AssemblyMode.parse(m)
        try:
            fp = solve_fixed_point(p, mode=mode, opts=opts)
            if fp.converged:
                estimates[f"fixed_point[{mode.value}]"] = fp.pi.sum(axis=1)
                status_rows.append([f"fixed_point[{mode.value}]", "ok", fp.residual])
            else:
                ok = False
                status_rows.append([f"fixed_point[{mode.value}]", "not-converged", fp.residual])
        except DegenerateBoundaryError as exc:
            # structural: the frozen generator is reducible, the ODE route still applies
            status_rows.append([f"fixed_point[{mode.value}]", f"not-applicable: {exc}", ""])
        except (FactorizationError, MFBikeError) as exc:
            ok = False
            status_rows.append([f"fixed_point[{mode.value}]", f"error: {exc}", ""])
        try:
            ss = steady_state_by_integration(p, mode=mode, t_max=t_max)
            estimates[f"ode[{mode.value}]"] = ss.y.sum(axis=1)
            status_rows.append([f"ode[{mode.value}]", "ok", ss.derivative_norm])
        except MFBikeError as exc:
            ok = False
            status_rows.append([f"ode[{mode.value}]", f"error: {exc}", ""])
    margs = []
    for s in split_seeds(seed, reps):
        res = run(p, N, horizon, seed=s, mode=smode, burn_in_frac=burn, n_batches=batches, max_events=max_events,
                  sample_times=[])
        margs.append(res.level_marginal)
    estimates[f"simulation[{smode.value},N={N}]"] = np.mean(margs, axis=0)
    status_rows.append([f"simulation[{smode.value},N={N}]", "ok", ""])
    names = list(estimates)
    out.csv("compare.csv", ["level"] + names,
            [[int(k)] + [float(estimates[n][i]) for n in names] for i, k in enumerate(p.levels)])
    pairs = []
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            pairs.append([a, b, float(np.abs(estimates[a] - estimates[b]).max()),
                          tv_distance(estimates[a], estimates[b])])
    out.csv("compare_summary.csv", ["estimate_a", "estimate_b", "sup_distance", "tv_distance"], pairs)
    out.csv("compare_status.csv", ["estimate", "status", "residual_or_derivative_norm"], status_rows)
    out.plot("compare.svg", {n: (p.levels, estimates[n]) for n in names}, "level k", "probability")
    for a, b, sup, tv in pairs:
        print(f"{a} vs {b}: sup {sup:.4f}, TV {tv:.4f}")
    return 0 if ok else 1


COMMANDS = {
    "env-build": cmd_env_build,
    "fixed-point": cmd_fixed_point,
    "integrate": cmd_integrate,
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
    "compare": cmd_compare,
}


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="TOML experiment document")
    common.add_argument("--out", help="output directory (overrides [output] dir)")
    common.add_argument("--mode", choices=[m.value for m in AssemblyMode], help="generator assembly mode")
    common.add_argument("--seed", type=int, help="simulation master seed (unsigned 64-bit)")
    common.add_argument("--threads", type=int, help="worker processes for sweeps")
    common.add_argument("--plots", choices=["on", "off"], help="write SVG plots")
    common.add_argument("-v", "--verbose", action="store_true")
    ap = argparse.ArgumentParser(prog="mfbike", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"mfbike {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return ap


def _flag_overrides(args) -> dict:
    ov: dict = {}
    if args.out is not None:
        ov.setdefault("output", {})["dir"] = args.out
    if args.plots is not None:
        ov.setdefault("output", {})["plots"] = args.plots == "on"
    if args.threads is not None:
        if args.threads < 1:
            raise cfgmod.ConfigError("--threads must be >= 1")
        ov.setdefault("output", {})["threads"] = args.threads
    if args.mode is not None:
        ov.setdefault("solver", {})["mode"] = args.mode
    if args.seed is not None:
        if not 0 <= args.seed < 2 ** 64:
            raise cfgmod.ConfigError("--seed must be an unsigned 64-bit integer")
        ov.setdefault("simulation", {})["seed"] = args.seed
    return ov


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = cfgmod.load(args.config, _flag_overrides(args))
        if cfg.shape == "sweep" and args.command not in ("sweep", "env-build"):
            raise cfgmod.ConfigError(f"{args.command} needs a single-run config (this one has [[panel]] tables)")
        return COMMANDS[args.command](cfg, _Out(cfg))
    except MFBikeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
