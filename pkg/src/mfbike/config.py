"""Experiment configuration: TOML documents resolved into typed settings.

A document has these tables (all optional except ``model`` and
``environment``)::

    [model]        K, C, L, alpha, beta
    [environment]  either W / lambda / mu arrays, or a day segmentation
                   (preset = "three-peak-day" or breaks = [...]) with
                   rent_profile / return_profile breakpoints, optional
                   lambda / mu overrides and time_scale
    [solver]       mode, method, init, damping, tol, max_iter, adaptive
    [integrator]   t_end, rtol, atol, n_out, n
    [simulation]   N, horizon, seed, mode, burn_in, batches, replications,
                   max_events, check_conservation
    [compare]      modes
    [output]       dir, plots, threads
    [[panel]]      sweep panels (name, measure, x, x_values, curve, curve_values,
                   and an optional ``set`` table of fixed parameter values)

Command-line flags override document fields, which override defaults.
"""
from __future__ import annotations

import copy
import itertools
import json
import sys
from dataclasses import dataclass, field

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .env import DaySegmentation, EnvironmentSpec, RateProfile
from .errors import ConfigError, MFBikeError
from .rates import ModelParams

DEFAULTS = {
    "solver": {"mode": "standard", "method": "newton", "init": "level-C", "damping": 0.5, "tol": 1e-10, "max_iter": 500,
               "adaptive": True},
    "integrator": {"t_end": 200.0, "rtol": 1e-8, "atol": 1e-10, "n_out": 101},
    "simulation": {"N": 1000, "horizon": 50.0, "seed": 0, "mode": "paper-rates", "burn_in": 0.2, "batches": 20,
                   "replications": 1, "check_conservation": False},
    "compare": {"modes": ["standard", "paper-literal"]},
    "output": {"dir": "out", "plots": True},
}

MEASURES = ("mean_bikes", "mean_wait_rent", "mean_wait_return", "mean_wait_max", "prob_strong", "prob_weak",
            "efficiency_ratio")
_SCALAR_PARAMS = ("K", "C", "L", "alpha", "beta")
_INT_PARAMS = ("K", "C", "L")


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class Panel:
    name: str
    measure: str
    x: str
    x_values: list
    curve: str | None = None
    curve_values: list = field(default_factory=lambda: [None])
    fixed: dict = field(default_factory=dict)

    def points(self):
        """Cartesian points in deterministic order: curve outer, x inner."""
        return list(itertools.product(self.curve_values, self.x_values))

    def overrides(self, curve_value, x_value) -> dict:
        ov = dict(self.fixed)
        if self.curve is not None:
            ov[self.curve] = curve_value
        ov[self.x] = x_value
        return ov


@dataclass
class ExperimentConfig:
    raw: dict
    panels: list[Panel]

    @property
    def shape(self) -> str:
        return "sweep" if self.panels else "single"

    def section(self, name: str) -> dict:
        return self.raw.get(name, {})

    def resolved_json(self) -> str:
        return json.dumps(self.raw, sort_keys=True, separators=(",", ":"))

    def params(self, overrides: dict | None = None) -> ModelParams:
        return build_params(self.raw, overrides)


def _check_param_name(name: str, m: int | None = None) -> None:
    if name in _SCALAR_PARAMS:
        return
    for prefix in ("lambda", "mu"):
        if name == prefix:
            return
        if name.startswith(prefix) and name[len(prefix):].isdigit():
            j = int(name[len(prefix):])
            if j < 1 or (m is not None and j > m):
                raise ConfigError(f"parameter {name!r} refers to a missing environment state")
            return
    raise ConfigError(f"unknown sweep parameter {name!r}")


def _build_env(e: dict) -> EnvironmentSpec:
    try:
        if "W" in e:
            if "lambda" not in e or "mu" not in e:
                raise ConfigError("environment needs lambda and mu alongside W")
            return EnvironmentSpec(W=e["W"], lam=e["lambda"], mu=e["mu"], theta=e.get("theta"))
        if e.get("preset") == "three-peak-day":
            seg = DaySegmentation.three_peak_day()
        elif "breaks" in e:
            seg = DaySegmentation.from_breaks(e["breaks"])
        elif "segments" in e:
            seg = DaySegmentation(tuple(tuple(tuple(iv) for iv in s) for s in e["segments"]))
        else:
            raise ConfigError("environment needs W or a segmentation (preset, breaks or segments)")
        kind = e.get("profile_kind", "linear")
        rent = RateProfile(e["rent_profile"], kind) if "rent_profile" in e else None
        ret = RateProfile(e["return_profile"], kind) if "return_profile" in e else None
        return EnvironmentSpec.from_segmentation(seg, rent, ret, lam=e.get("lambda"), mu=e.get("mu"),
                                                 time_scale=e.get("time_scale", 1.0))
    except ConfigError:
        raise
    except MFBikeError as exc:
        raise ConfigError(f"invalid environment: {exc}") from exc


def build_params(raw: dict, overrides: dict | None = None) -> ModelParams:
    """Model parameters from a resolved document, with optional sweep overrides."""
    model = dict(raw.get("model", {}))
    env_raw = dict(raw.get("environment", {}))
    env = _build_env(env_raw)
    lam = np.array(env.lam, dtype=float)
    mu = np.array(env.mu, dtype=float)
    for name, value in (overrides or {}).items():
        _check_param_name(name, env.m)
        if name in _SCALAR_PARAMS:
            model[name] = int(value) if name in _INT_PARAMS else float(value)
        elif name in ("lambda", "mu"):
            (lam if name == "lambda" else mu)[:] = float(value)
        elif name.startswith("lambda"):
            lam[int(name[6:]) - 1] = float(value)
        else:
            mu[int(name[2:]) - 1] = float(value)
    if overrides:
        env = EnvironmentSpec(W=env.W, lam=lam, mu=mu, theta=env.theta)
    missing = [k for k in _SCALAR_PARAMS if k not in model]
    if missing:
        raise ConfigError(f"model table is missing {missing}")
    try:
        return ModelParams(K=int(model["K"]), C=int(model["C"]), L=int(model["L"]), alpha=float(model["alpha"]),
                           beta=float(model["beta"]), env=env)
    except MFBikeError as exc:
        raise ConfigError(f"invalid model parameters: {exc}") from exc


def _panels(raw: dict) -> list[Panel]:
    out = []
    for i, d in enumerate(raw.get("panel", [])):
        try:
            pnl = Panel(name=str(d.get("name", f"panel{i + 1}")), measure=d["measure"], x=d["x"],
                        x_values=list(d["x_values"]), curve=d.get("curve"),
                        curve_values=list(d.get("curve_values", [None])), fixed=dict(d.get("set", {})))
        except KeyError as exc:
            raise ConfigError(f"panel {i + 1} is missing {exc}") from exc
        if pnl.measure not in MEASURES:
            raise ConfigError(f"panel {pnl.name!r}: unknown measure {pnl.measure!r}")
        if not pnl.x_values or not pnl.curve_values:
            raise ConfigError(f"panel {pnl.name!r}: sweep ranges must be nonempty")
        for name in [pnl.x, *pnl.fixed]:
            _check_param_name(name)
        if pnl.curve is not None:
            _check_param_name(pnl.curve)
        elif pnl.curve_values != [None]:
            raise ConfigError(f"panel {pnl.name!r}: curve_values given without curve")
        out.append(pnl)
    names = [p.name for p in out]
    if len(set(names)) != len(names):
        raise ConfigError("panel names must be unique")
    return out


def from_dict(doc: dict) -> ExperimentConfig:
    raw = _merge(DEFAULTS, doc)
    cfg = ExperimentConfig(raw=raw, panels=_panels(raw))
    m = build_params(raw).m  # validate eagerly
    for pnl in cfg.panels:
        for name in (pnl.x, pnl.curve):
            if name is not None:
                _check_param_name(name, m)
        build_params(raw, pnl.fixed)
    return cfg


def load(path, overrides: dict | None = None) -> ExperimentConfig:
    """Read a TOML document and apply ``overrides`` (nested dict, e.g. from CLI flags)."""
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    return from_dict(_merge(doc, overrides or {}))
