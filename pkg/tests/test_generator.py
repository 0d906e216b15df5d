import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfbike.env import EnvironmentSpec
from mfbike.errors import InvalidParameterError
from mfbike.generator import AssemblyMode, assemble, assemble_from_rates, drift, row_sum_residual
from mfbike.rates import ModelParams, arrival_rates, service_rates

from conftest import random_distribution, random_params

STD = AssemblyMode.STANDARD
LIT = AssemblyMode.PAPER_LITERAL


def _offdiag(V):
    return V - np.diag(np.diag(V))


class TestStandard:
    def test_common_set(self, p_common):
        V = assemble(p_common.point_mass(), p_common).to_dense()
        assert V.shape == (62, 62)
        assert np.abs(V.sum(axis=1)).max() <= 1e-12
        assert np.all(_offdiag(V) >= 0)
        assert np.all(np.diag(V) <= 0)

    def test_birth_death_reduction(self, rng):
        p = random_params(rng, m=1)
        y = random_distribution(rng, p)
        xi = arrival_rates(y, p)[:, 0]
        eta = service_rates(p)[:, 0]
        n = p.n_levels
        ref = np.zeros((n, n))
        for k in range(n):
            if k + 1 < n:
                ref[k, k + 1] = xi[k]
            if k > 0:
                ref[k, k - 1] = eta[k]
            ref[k, k] = -ref[k].sum()
        np.testing.assert_allclose(assemble(y, p).to_dense(), ref, atol=1e-13)

    def test_block_contents(self, p_common, rng):
        y = random_distribution(rng, p_common)
        V = assemble(y, p_common)
        xi = arrival_rates(y, p_common)
        eta = service_rates(p_common)
        k = 7
        np.testing.assert_array_equal(V.up[k], np.diag(xi[k]))
        np.testing.assert_array_equal(V.down[k], np.diag(eta[k]))
        np.testing.assert_allclose(V.local[k], p_common.env.W - np.diag(xi[k] + eta[k]))
        np.testing.assert_allclose(V.local[-1], p_common.env.W - np.diag(eta[-1]))
        np.testing.assert_allclose(V.local[0], p_common.env.W - np.diag(xi[0]))

    def test_bandwidth(self, p_common):
        V = assemble(p_common.point_mass(), p_common).to_dense()
        i, j = np.nonzero(V)
        assert np.all(np.abs(i // 2 - j // 2) <= 1)

    def test_homogeneous(self, p_common, rng):
        y = random_distribution(rng, p_common)
        c = 3.7
        q = p_common.replace(env=p_common.env.scaled(c))
        np.testing.assert_allclose(assemble(y, q).to_dense(), c * assemble(y, p_common).to_dense(), rtol=1e-13)

    @pytest.mark.parametrize("mode", [STD, LIT])
    def test_drift_is_left_product(self, p_common, rng, mode):
        y = random_distribution(rng, p_common)
        V = assemble(y, p_common, mode=mode)
        ref = (y.ravel() @ V.to_dense()).reshape(y.shape)
        np.testing.assert_allclose(drift(y, p_common, mode=mode), ref, atol=1e-12)
        np.testing.assert_allclose(V.left_multiply(y), ref, atol=1e-12)
        np.testing.assert_allclose(drift(y, p_common, n=40, mode=mode),
                                   (y.ravel() @ assemble(y, p_common, n=40, mode=mode).to_dense()).reshape(y.shape),
                                   atol=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.one_of(st.none(), st.integers(1, 1000)))
    def test_generator_property(self, seed, n):
        r = np.random.default_rng(seed)
        p = random_params(r)
        V = assemble(random_distribution(r, p), p, n=n).to_dense()
        assert np.abs(V.sum(axis=1)).max() <= 1e-12 * max(1.0, np.abs(V).max())
        assert np.all(_offdiag(V) >= 0)


class TestPaperLiteral:
    def test_block_formula(self, p_common, rng):
        y = random_distribution(rng, p_common)
        V = assemble(y, p_common, mode=LIT)
        xi = arrival_rates(y, p_common)
        eta = service_rates(p_common)
        W = p_common.env.W
        k = 12
        for i in range(2):
            for j in range(2):
                if i != j:
                    assert V.up[k][i, j] == xi[k, i] * W[i, j]
                    assert V.down[k][i, j] == eta[k, i] * W[i, j]
                else:
                    assert V.up[k][i, j] == 0.0 and V.down[k][i, j] == 0.0
            assert V.local[k][i, i] == pytest.approx((xi[k, i] + eta[k, i]) * W[i, i])
        # boundary levels carry only the applicable hat term
        np.testing.assert_allclose(np.diag(V.local[0]), xi[0] * np.diag(W))
        np.testing.assert_allclose(np.diag(V.local[-1]), eta[-1] * np.diag(W))

    def test_row_sums(self, rng):
        for _ in range(20):
            p = random_params(rng)
            if p.m < 2:
                continue
            V = assemble(random_distribution(rng, p), p, mode=LIT)
            assert row_sum_residual(V) <= 1e-12 * max(1.0, np.abs(V.local).max())

    def test_single_state_rejected(self, rng):
        p = random_params(rng, m=1)
        with pytest.raises(InvalidParameterError):
            assemble(p.point_mass(), p, mode=LIT)

    def test_mode_parse(self):
        assert AssemblyMode.parse("paper-literal") is LIT
        with pytest.raises(ValueError):
            AssemblyMode.parse("other")


class TestRowSumResidual:
    def test_valid_assembly(self, p_common):
        assert row_sum_residual(assemble(p_common.point_mass(), p_common)) <= 1e-12

    def test_perturbation(self, p_common):
        V = assemble(p_common.point_mass(), p_common).to_dense()
        V[3, 4] += 1e-6
        assert row_sum_residual(V) == pytest.approx(1e-6, rel=1e-6)

    def test_block_and_dense_agree(self, p_common, rng):
        V = assemble(random_distribution(rng, p_common), p_common, n=5)
        assert row_sum_residual(V) == pytest.approx(row_sum_residual(V.to_dense()), abs=1e-13)


def test_csv_export(tmp_path, p_common):
    V = assemble(p_common.point_mass(), p_common)
    V.to_csv(tmp_path / "V.csv", header_lines=["test"])
    back = np.loadtxt(tmp_path / "V.csv", delimiter=",", comments="#")
    np.testing.assert_array_equal(back, V.to_dense())


def test_zero_rates_give_environment_only():
    env = EnvironmentSpec(W=[[-2.0, 2.0], [0.5, -0.5]], lam=[0.0, 0.0], mu=[0.0, 0.0])
    p = ModelParams(K=3, C=1, L=1, alpha=0.3, beta=0.3, env=env)
    V = assemble(p.point_mass(), p)
    np.testing.assert_allclose(V.to_dense(), np.kron(np.eye(p.n_levels), env.W))
    V2 = assemble_from_rates(np.zeros((6, 2)), np.zeros((6, 2)), env.W)
    np.testing.assert_array_equal(V2.to_dense(), V.to_dense())
