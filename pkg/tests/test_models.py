import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import dense_nlml
from sparsegp.kernels import Hyperparameters, JitterPolicy, kernel_matrix
from sparsegp.models import (
    Dataset,
    Method,
    NlmlBreakdown,
    SparseModel,
    full_nlml,
    heteroscedastic_diag,
    sparse_nlml,
)

SPARSE = [Method.FITC, Method.VFE, Method.DTC]


def random_instance(seed, N=8, M=4, d=2):
    gen = np.random.default_rng(seed)
    X = gen.normal(size=(N, d))
    y = gen.normal(size=N)
    Z = gen.normal(size=(M, d))
    hyper = Hyperparameters.from_values(
        math.exp(gen.uniform(-1, 1)), np.exp(gen.uniform(-0.7, 0.7, size=d)), math.exp(gen.uniform(-3, 0))
    )
    return Dataset(X, y), hyper, Z


def fd_gradient(f, x, step=1e-5):
    x = np.asarray(x, float)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = step
        g.flat[i] = (f(x + e) - f(x - e)) / (2 * step)
    return g


def rel_err(a, b, floor=1e-4):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


class TestDataset:
    def test_validation(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((3, 1)), np.zeros(2))
        with pytest.raises(ValueError):
            Dataset(np.array([[np.nan]]), np.zeros(1))

    def test_read_only(self):
        d = Dataset(np.zeros((2, 1)), np.zeros(2))
        with pytest.raises(ValueError):
            d.X[0, 0] = 1.0


class TestMethod:
    @pytest.mark.parametrize("text,expect", [("vfe", Method.VFE), ("FITC", Method.FITC), ("full", Method.FULL)])
    def test_parse(self, text, expect):
        assert Method.parse(text) is expect

    def test_parse_unknown(self):
        with pytest.raises(ValueError):
            Method.parse("sor")


class TestBreakdown:
    def test_total_is_sum(self):
        b = NlmlBreakdown.from_terms(1.0, 2.0, 3.0, 4.0)
        assert b.total == 10.0
        assert (b - b).total == 0.0


class TestClosedForms:
    def test_single_point_exact(self):
        # N=1, x=0, y=0, unit variances: 0.5 log(2 pi) + 0.5 log 2 = 0.5 log(4 pi)
        d = Dataset([[0.0]], [0.0])
        h = Hyperparameters.from_values(1.0, 1.0, 1.0)
        assert full_nlml(d, h).total == pytest.approx(1.26551212348, rel=1e-11)

    @pytest.mark.parametrize("method", SPARSE)
    def test_single_point_sparse_at_data(self, method):
        d = Dataset([[0.0]], [0.0])
        h = Hyperparameters.from_values(1.0, 1.0, 1.0)
        m = SparseModel(d, h, [[0.0]], method, JitterPolicy(1e-12))
        assert m.nlml().total == pytest.approx(0.5 * math.log(4 * math.pi), rel=1e-10)

    def test_vfe_is_dtc_plus_trace(self, toy):
        d, h, Z = toy
        vfe = SparseModel(d, h, Z, Method.VFE).nlml()
        dtc = SparseModel(d, h, Z, Method.DTC).nlml()
        assert vfe.total == pytest.approx(dtc.total + vfe.trace_term, rel=1e-12)
        assert dtc.trace_term == 0.0
        assert vfe.trace_term > 0

    def test_fitc_and_vfe_share_constant(self, toy):
        d, h, Z = toy
        bds = [SparseModel(d, h, Z, m).nlml() for m in SPARSE]
        assert all(b.constant == pytest.approx(0.5 * 25 * math.log(2 * math.pi)) for b in bds)


class TestDenseOracle:
    @pytest.mark.parametrize("method", SPARSE)
    @pytest.mark.parametrize("seed", range(10))
    def test_matches_dense(self, method, seed):
        d, h, Z = random_instance(seed)
        m = SparseModel(d, h, Z, method)
        expect = dense_nlml(d.X, d.y, h, Z, method.value, m.applied_jitter)
        assert sparse_nlml(m).total == pytest.approx(expect, rel=1e-8)

    @pytest.mark.parametrize("seed", range(5))
    def test_full_matches_dense(self, seed):
        d, h, _ = random_instance(seed, N=12)
        assert full_nlml(d, h).total == pytest.approx(dense_nlml(d.X, d.y, h), rel=1e-10)

    def test_sparse_rejects_full(self, toy):
        d, h, _ = toy
        with pytest.raises(ValueError):
            sparse_nlml(SparseModel(d, h, None, Method.FULL))


class TestGradients:
    @pytest.mark.parametrize("method", SPARSE)
    @pytest.mark.parametrize("seed", range(4))
    def test_hyper_gradient(self, method, seed):
        d, h, Z = random_instance(seed, N=10, M=4, d=2)
        m = SparseModel(d, h, Z, method)
        _, g, _ = m.nlml_grad()
        f = lambda v: m.with_params(hyper=Hyperparameters.from_vector(v)).nlml().total
        assert rel_err(g, fd_gradient(f, h.to_vector())).max() < 1e-5

    @pytest.mark.parametrize("method", SPARSE)
    @pytest.mark.parametrize("seed", range(4))
    def test_inducing_gradient(self, method, seed):
        d, h, Z = random_instance(seed, N=10, M=4, d=2)
        m = SparseModel(d, h, Z, method)
        _, _, gZ = m.nlml_grad()
        f = lambda z: m.with_params(Z=z).nlml().total
        assert rel_err(gZ, fd_gradient(f, Z)).max() < 1e-5

    def test_isotropic_gradient(self, toy1d):
        d, h, Z = toy1d
        for method in SPARSE:
            m = SparseModel(d, h, Z, method)
            _, g, _ = m.nlml_grad()
            f = lambda v: m.with_params(hyper=Hyperparameters.from_vector(v)).nlml().total
            assert rel_err(g, fd_gradient(f, h.to_vector())).max() < 1e-5

    def test_full_gradient(self, toy):
        d, h, _ = toy
        m = SparseModel(d, h, None, Method.FULL)
        bd, g, gZ = m.nlml_grad()
        f = lambda v: full_nlml(d, Hyperparameters.from_vector(v)).total
        assert rel_err(g, fd_gradient(f, h.to_vector())).max() < 1e-6
        assert gZ.shape == (0, 2)
        assert bd == m.nlml()

    @pytest.mark.parametrize("method", SPARSE)
    def test_mirror_symmetry(self, method, toy1d):
        # reflecting inputs and inducing inputs reflects the Z-gradient
        d, h, Z = toy1d
        _, g1, gz1 = SparseModel(d, h, Z, method).nlml_grad()
        _, g2, gz2 = SparseModel(Dataset(-d.X, d.y), h, -Z, method).nlml_grad()
        np.testing.assert_allclose(gz2, -gz1, rtol=1e-8, atol=1e-10)
        np.testing.assert_allclose(g2, g1, rtol=1e-8, atol=1e-10)


class TestInvariances:
    @pytest.mark.parametrize("method", SPARSE)
    def test_inducing_permutation(self, method, toy):
        d, h, Z = toy
        perm = np.random.default_rng(0).permutation(len(Z))
        a = SparseModel(d, h, Z, method).nlml_grad()
        b = SparseModel(d, h, Z[perm], method).nlml_grad()
        assert b[0].total == pytest.approx(a[0].total, rel=1e-12)
        np.testing.assert_allclose(b[2], a[2][perm], rtol=1e-8, atol=1e-12)

    @pytest.mark.parametrize("method", SPARSE)
    def test_translation(self, method, toy):
        d, h, Z = toy
        shift = np.array([3.0, -1.5])
        a = SparseModel(d, h, Z, method).nlml().total
        b = SparseModel(Dataset(d.X + shift, d.y), h, Z + shift, method).nlml().total
        assert b == pytest.approx(a, rel=1e-9)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10**6), st.integers(1, 6))
    def test_vfe_bounds_full(self, seed, M):
        d, h, Z = random_instance(seed, N=12, M=M, d=2)
        vfe = SparseModel(d, h, Z, Method.VFE).nlml().total
        assert vfe >= full_nlml(d, h).total - 1e-9

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10**6))
    def test_terms_nonnegative_where_expected(self, seed):
        d, h, Z = random_instance(seed)
        for method in SPARSE:
            bd = SparseModel(d, h, Z, method).nlml()
            assert bd.data_fit >= 0
            assert bd.trace_term >= 0


class TestZEqualsX:
    def _instance(self, seed, N=30):
        gen = np.random.default_rng(seed)
        X = np.sort(gen.uniform(0, 3 * N, size=N))
        X = X + 1.5 * np.arange(N)  # keep points well separated relative to the lengthscale
        y = gen.normal(size=N)
        h = Hyperparameters.from_values(gen.uniform(0.5, 2), gen.uniform(0.5, 1.0), gen.uniform(0.05, 0.5))
        return Dataset(X[:, None], y), h

    @pytest.mark.parametrize("seed", range(3))
    def test_objectives_match_full(self, seed):
        d, h = self._instance(seed)
        full = full_nlml(d, h).total
        jit = JitterPolicy(1e-12)
        vfe = SparseModel(d, h, d.X, Method.VFE, jit).nlml()
        fitc = SparseModel(d, h, d.X, Method.FITC, jit).nlml()
        assert vfe.trace_term == pytest.approx(0.0, abs=1e-8 * abs(full))
        assert vfe.total == pytest.approx(full, rel=1e-8)
        assert fitc.total == pytest.approx(full, rel=1e-8)

    def test_predictions_match_full(self):
        d, h = self._instance(1)
        xs = np.linspace(-5, 150, 50)[:, None]
        pf = SparseModel(d, h, None, Method.FULL).predict(xs)
        pv = SparseModel(d, h, d.X, Method.VFE, JitterPolicy(1e-12)).predict(xs)
        np.testing.assert_allclose(pv.mean, pf.mean, rtol=1e-8, atol=1e-10)
        np.testing.assert_allclose(pv.latent_variance, pf.latent_variance, rtol=1e-8, atol=1e-10)


class TestPredict:
    @pytest.mark.parametrize("method", SPARSE)
    def test_matches_dense(self, method, toy):
        d, h, Z = toy
        m = SparseModel(d, h, Z, method)
        xs = np.random.default_rng(2).uniform(-4, 4, size=(9, 2))
        p = m.predict(xs)
        Kuu = kernel_matrix(Z, Z, h) + m.applied_jitter * np.eye(len(Z))
        Kuf = kernel_matrix(Z, d.X, h)
        Kus = kernel_matrix(Z, xs, h)
        Q = Kuf.T @ np.linalg.solve(Kuu, Kuf)
        Qsf = Kus.T @ np.linalg.solve(Kuu, Kuf)
        G = np.diag(np.diag(kernel_matrix(d.X, d.X, h) - Q)) if method is Method.FITC else 0
        C = Q + G + h.noise_variance * np.eye(d.N)
        mean = Qsf @ np.linalg.solve(C, d.y)
        # kss - Qss + K*u Sigma^-1 Ku* rewritten with Woodbury as kss - Q*f C^-1 Qf*
        var_expected = h.signal_variance - np.sum(Qsf.T * np.linalg.solve(C, Qsf.T), 0)
        np.testing.assert_allclose(p.mean, mean, rtol=1e-8, atol=1e-10)
        np.testing.assert_allclose(p.latent_variance, var_expected, rtol=1e-7, atol=1e-10)
        np.testing.assert_allclose(p.observation_variance, p.latent_variance + h.noise_variance)

    def test_full_matches_dense(self, toy):
        d, h, _ = toy
        xs = np.array([[0.1, 0.2], [10.0, 10.0]])
        p = SparseModel(d, h, None, Method.FULL).predict(xs)
        K = kernel_matrix(d.X, d.X, h) + h.noise_variance * np.eye(d.N)
        Ks = kernel_matrix(d.X, xs, h)
        np.testing.assert_allclose(p.mean, Ks.T @ np.linalg.solve(K, d.y), rtol=1e-10)
        np.testing.assert_allclose(p.latent_variance,
                                   h.signal_variance - np.sum(Ks * np.linalg.solve(K, Ks), 0), rtol=1e-9)

    @pytest.mark.parametrize("method", list(Method))
    def test_reverts_to_prior_far_away(self, method, toy):
        d, h, Z = toy
        p = SparseModel(d, h, Z, method).predict([[1e3, -1e3]])
        assert p.mean[0] == pytest.approx(0.0, abs=1e-12)
        assert p.latent_variance[0] == pytest.approx(h.signal_variance, rel=1e-10)

    def test_dimension_mismatch(self, toy):
        d, h, Z = toy
        with pytest.raises(ValueError):
            SparseModel(d, h, Z).predict(np.zeros((3, 3)))


class TestHeteroscedastic:
    def test_zero_at_inducing_and_prior_far_away(self, toy1d):
        d, h, Z = toy1d
        r = heteroscedastic_diag(np.vstack([Z, [[100.0]]]), Z, h, JitterPolicy(1e-12))
        np.testing.assert_allclose(r[:-1], 0.0, atol=1e-9)
        assert r[-1] == pytest.approx(h.signal_variance)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10**6))
    def test_bounded_by_prior(self, seed):
        d, h, Z = random_instance(seed)
        r = heteroscedastic_diag(d.X, Z, h)
        assert np.all(r >= 0) and np.all(r <= h.signal_variance * (1 + 1e-12))

    def test_matches_model_residual(self, toy):
        d, h, Z = toy
        m = SparseModel(d, h, Z, Method.FITC)
        np.testing.assert_allclose(heteroscedastic_diag(d.X, Z, h), m._state.residual, rtol=1e-12)


class TestModelSnapshot:
    def test_immutable(self, toy):
        d, h, Z = toy
        m = SparseModel(d, h, Z)
        with pytest.raises(Exception):
            m.hyper = h
        with pytest.raises(ValueError):
            m.Z[0, 0] = 5.0

    def test_add_inducing(self, toy):
        d, h, Z = toy
        m = SparseModel(d, h, Z).add_inducing([0.0, 0.0])
        assert m.M == len(Z) + 1

    def test_bad_inducing_shape(self, toy):
        d, h, _ = toy
        with pytest.raises(ValueError):
            SparseModel(d, h, np.zeros((3, 5)))
