import os
import subprocess
import sys

import numpy as np
import pytest

from mfbike import _simcore_py
from mfbike.env import EnvironmentSpec
from mfbike.errors import InvalidParameterError
from mfbike.generator import drift
from mfbike.qbd import solve_fixed_point
from mfbike.rates import ModelParams
from mfbike.simulator import (BACKEND, SimMode, chaos_check, convergence_sweep, get_backend, run, split_seeds,
                              trajectory_gap, tv_distance)

from conftest import common_params

HAVE_CYTHON = BACKEND == "cython"
needs_cython = pytest.mark.skipif(not HAVE_CYTHON, reason="compiled core not built")


def small_params(**kw):
    env = EnvironmentSpec(W=[[-1.0, 1.0], [1.0, -1.0]], lam=[4.0, 7.0], mu=[5.0, 3.0])
    base = dict(K=3, C=1, L=1, alpha=0.5, beta=0.5, env=env)
    base.update(kw)
    return ModelParams(**base)


@pytest.fixture(scope="module")
def pi_common():
    return solve_fixed_point(common_params()).pi


class TestBackends:
    @needs_cython
    @pytest.mark.parametrize("mode", ["physical", "paper-rates"])
    def test_bit_identical(self, p_common, mode):
        kw = dict(seed=99, mode=mode, max_events=20000, n_batches=5, tuples=np.arange(20).reshape(10, 2),
                  check_conservation=mode == "physical")
        a = run(p_common, 60, 1e9, backend="python", **kw)
        b = run(p_common, 60, 1e9, backend="cython", **kw)
        assert a.t_end == b.t_end and a.events == b.events == 20000
        np.testing.assert_array_equal(a.batch_occ, b.batch_occ)
        np.testing.assert_array_equal(a.samples, b.samples)
        np.testing.assert_array_equal(a.joint, b.joint)
        np.testing.assert_array_equal(a.final_levels, b.final_levels)
        assert a.in_transit == b.in_transit

    @needs_cython
    def test_uniform_streams(self):
        core = get_backend("cython")
        for seed in (0, 1, 2 ** 64 - 1, 0x5DEECE66D):
            rng = _simcore_py.Xoshiro256(seed)
            ref = np.array([rng.uniform() for _ in range(1000)])
            np.testing.assert_array_equal(core.uniforms(seed, 1000), ref)

    def test_xoshiro_reference_values(self):
        # splitmix64 reference outputs for state 0 (published test vector)
        s, z = _simcore_py.splitmix64(0)
        assert z == 0xE220A8397B1DCDAF
        s, z = _simcore_py.splitmix64(s)
        assert z == 0x6E789E6AA1B965F4
        u = [_simcore_py.Xoshiro256(7).uniform() for _ in range(3)]
        assert all(0.0 <= x < 1.0 for x in u)

    def test_pure_python_switch(self):
        env = dict(os.environ, MFBIKE_PURE_PYTHON="1")
        out = subprocess.run([sys.executable, "-c", "import mfbike.simulator as s; print(s.BACKEND)"],
                             env=env, capture_output=True, text=True, check=True)
        assert out.stdout.strip() == "python"

    def test_unknown_backend(self):
        with pytest.raises(ValueError):
            get_backend("fortran")


class TestRun:
    def test_determinism(self, p_common):
        a = run(p_common, 100, 2.0, seed=5, mode="paper-rates")
        b = run(p_common, 100, 2.0, seed=5, mode="paper-rates")
        c = run(p_common, 100, 2.0, seed=6, mode="paper-rates")
        np.testing.assert_array_equal(a.samples, b.samples)
        np.testing.assert_array_equal(a.batch_occ, b.batch_occ)
        assert a.events == b.events
        assert not np.array_equal(a.samples, c.samples)

    def test_conservation(self, p_common):
        res = run(p_common, 100, 1e9, seed=1, mode="physical", max_events=100_000, check_conservation=True)
        assert res.events == 100_000
        assert np.maximum(res.final_levels, 0).sum() + res.in_transit == 100 * p_common.C

    def test_frozen_without_customers(self, p_common):
        env = EnvironmentSpec(W=p_common.env.W, lam=[0.0, 0.0], mu=p_common.env.mu)
        p = p_common.replace(env=env)
        res = run(p, 1, 20.0, seed=3, mode="physical")
        assert res.final_levels[0] == p.C and res.in_transit == 0
        assert np.all(res.samples.sum(axis=2)[:, p.offset(p.C)] == 1.0)
        # only environment switches happen (rate 1 per hour)
        assert 5 <= res.events <= 40

    def test_empirical_measure_lattice(self, p_common):
        res = run(p_common, 40, 1.0, seed=2, mode="paper-rates")
        s = res.samples * 40
        np.testing.assert_allclose(s, np.round(s), atol=1e-9)
        np.testing.assert_allclose(res.samples.sum(axis=(1, 2)), 1.0)
        assert res.final_levels.min() >= -p_common.L and res.final_levels.max() <= p_common.K + p_common.L

    def test_time_average(self, p_common):
        res = run(p_common, 50, 5.0, seed=2, mode="paper-rates", n_batches=10)
        assert res.time_avg.sum() == pytest.approx(1.0, abs=1e-12)
        assert res.batch_means().shape == (10, p_common.n_levels, 2)
        np.testing.assert_allclose(res.batch_len.sum(), 4.0)

    def test_max_events(self, p_common):
        res = run(p_common, 50, 100.0, seed=2, max_events=500)
        assert res.events == 500 and res.t_end < 100.0

    def test_drift_in_expectation(self):
        # short-horizon mean increment of the empirical measure equals h * y V_y^(N)
        p = small_params()
        N, h, reps = 50, 0.005, 4000
        rng = np.random.default_rng(0)
        lv = rng.integers(-p.L, p.K + p.L + 1, N)
        inc, pred = [], []
        for s in split_seeds(11, reps):
            res = run(p, N, h, seed=s, mode="paper-rates", levels=lv, sample_times=[0.0, h], burn_in_frac=0.0,
                      n_batches=1)
            y0 = res.samples[0]
            inc.append(res.samples[1] - y0)
            pred.append(h * drift(y0, p, n=N))
        inc, pred = np.array(inc), np.array(pred)
        diff = inc - pred
        se = diff.std(axis=0, ddof=1) / np.sqrt(reps)
        bias = np.abs(diff.mean(axis=0))
        # second-order terms are O(h^2 * rate^2) ~ 1e-3 of the increment
        assert np.all(bias <= 4.5 * se + 2e-3 * np.abs(pred.mean(axis=0)) + 1e-12)

    def test_exchangeability(self, p_common):
        # pairs (a, b) and their relabeling (b, a) come from the same trajectory
        nl = p_common.n_levels
        res = run(p_common, 200, 50.0, seed=8, mode="paper-rates", tuples=np.arange(200).reshape(100, 2),
                  sample_times=[])
        Jb = res.joint.reshape(-1, nl, nl)
        Jb = Jb / Jb.sum(axis=(1, 2), keepdims=True)
        d = Jb.sum(axis=1) - Jb.sum(axis=2)  # first-position minus second-position marginal, per batch
        se = d.std(axis=0, ddof=1) / np.sqrt(len(d))
        busy = se > 0
        assert np.all(np.abs(d.mean(axis=0))[busy] <= 4 * se[busy])
        assert np.all(d.mean(axis=0)[~busy] == 0)
        J = Jb.mean(axis=0)
        assert tv_distance(J, J.T) < 0.05
        a = run(p_common, 200, 20.0, seed=8, mode="paper-rates", sample_times=[]).level_marginal
        perm = np.random.default_rng(1).permutation(200)
        lv = np.full(200, p_common.C)
        lv[perm[:100]] = p_common.C - 2
        lv[perm[100:]] = p_common.C + 2
        b = run(p_common, 200, 20.0, seed=8, mode="paper-rates", sample_times=[], levels=lv).level_marginal
        lv2 = np.full(200, p_common.C)
        lv2[:100] = p_common.C - 2
        lv2[100:] = p_common.C + 2
        c = run(p_common, 200, 20.0, seed=8, mode="paper-rates", sample_times=[], levels=lv2).level_marginal
        assert tv_distance(b, c) < 0.05
        assert tv_distance(a, b) < 0.05

    @pytest.mark.parametrize("kw", [dict(N=0), dict(horizon=0.0), dict(burn_in_frac=1.0),
                                    dict(tuples=np.array([[0, 0]]))])
    def test_invalid(self, p_common, kw):
        args = dict(N=10, horizon=1.0)
        args.update(kw)
        with pytest.raises(InvalidParameterError):
            run(p_common, **args)

    def test_too_many_bikes(self, p_common):
        with pytest.raises(InvalidParameterError):
            run(p_common, 2, 1.0, levels=[20, 20], mode="physical")

    def test_csv(self, p_common, tmp_path):
        res = run(p_common, 20, 1.0, seed=1, sample_times=[0.0, 0.5, 1.0])
        res.to_csv(tmp_path / "s.csv", p_common)
        back = np.loadtxt(tmp_path / "s.csv", delimiter=",", skiprows=1)
        np.testing.assert_array_equal(back[:, 1:], res.samples.reshape(3, -1))


class TestSeeds:
    def test_split_rule(self):
        seeds = split_seeds(42, 3)
        s, out = 42, []
        for _ in range(3):
            s, z = _simcore_py.splitmix64(s)
            out.append(z)
        assert seeds == out
        assert len(set(split_seeds(0, 100))) == 100

    def test_mode_parse(self):
        assert SimMode.parse("paper-rates") is SimMode.PAPER_RATES


class TestChaos:
    def test_single_station_tuples(self, p_common):
        res = chaos_check(p_common, 50, 5.0, seed=1, k=1, n_boot=20)
        assert res.tv == 0.0

    def test_two_stations_are_correlated(self):
        p = small_params()
        two = chaos_check(p, 2, 2000.0, seed=3, k=2, n_boot=200)
        many = chaos_check(p, 1000, 20.0, seed=3, k=2, n_boot=200)
        assert two.ci[0] > 0.01
        assert two.tv > 3 * many.tv
        np.testing.assert_allclose(two.joint.sum(), 1.0)

    def test_k_too_large(self, p_common):
        with pytest.raises(InvalidParameterError):
            chaos_check(p_common, 2, 1.0, k=3)


class TestConvergence:
    def test_replications_agree(self, p_common, pi_common):
        tab = convergence_sweep(p_common, [100, 100], 20.0, seeds=5, pi=pi_common, master_seed=4)
        a, b = tab.rows
        assert a.seeds != b.seeds
        assert abs(a.mean - b.mean) <= 3 * np.hypot(a.stderr, b.stderr)

    def test_table_csv(self, p_common, pi_common, tmp_path):
        tab = convergence_sweep(p_common, [10, 50], 5.0, seeds=2, pi=pi_common)
        tab.to_csv(tmp_path / "c.csv")
        lines = (tmp_path / "c.csv").read_text().splitlines()
        assert lines[0].startswith("N,") and len(lines) == 3

    def test_trajectory_gap(self, p_common):
        res = run(p_common, 1000, 5.0, seed=12, mode="paper-rates", sample_times=np.linspace(0, 5, 26))
        assert trajectory_gap(res, p_common) < 0.05


def test_tv_distance():
    assert tv_distance([1, 0], [0, 1]) == 1.0
    assert tv_distance([0.5, 0.5], [0.5, 0.5]) == 0.0
