import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sparsegp.kernels import (
    Hyperparameters,
    JitterPolicy,
    NotPositiveDefiniteError,
    jittered_cholesky,
    kernel_diag,
    kernel_eval,
    kernel_matrix,
)

finite = st.floats(-5, 5, allow_nan=False)
positive = st.floats(0.05, 5.0)


def hyp(sf2=1.0, ls=1.0, sn2=0.1):
    return Hyperparameters.from_values(sf2, ls, sn2)


class TestHyperparameters:
    def test_log_roundtrip(self):
        h = Hyperparameters.from_values(2.5, [0.3, 4.0], 0.01)
        assert h.signal_variance == pytest.approx(2.5, rel=1e-15)
        np.testing.assert_allclose(h.lengthscales, [0.3, 4.0], rtol=1e-15)
        assert Hyperparameters.from_vector(h.to_vector()) == h

    @pytest.mark.parametrize("bad", [(0.0, 1.0, 1.0), (1.0, -1.0, 1.0), (1.0, 1.0, 0.0)])
    def test_rejects_nonpositive(self, bad):
        with pytest.raises(ValueError):
            Hyperparameters.from_values(*bad)

    def test_dimension_check(self):
        h = Hyperparameters.from_values(1.0, [1.0, 2.0], 0.1)
        with pytest.raises(ValueError):
            kernel_matrix(np.zeros((2, 3)), np.zeros((2, 3)), h)


class TestKernelEval:
    def test_zero_distance(self):
        assert kernel_eval([0.3, -1.0], [0.3, -1.0], hyp(sf2=1.7, ls=[0.5, 2.0])) == pytest.approx(1.7, rel=1e-15)

    def test_unit_distance(self):
        # exp(-1/2) to 12 significant digits
        assert kernel_eval([0.0], [1.0], hyp()) == pytest.approx(0.606530659713, rel=1e-11)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            kernel_eval([0.0, 1.0], [1.0], hyp())

    @given(arrays(float, 3, elements=finite), arrays(float, 3, elements=finite),
           arrays(float, 3, elements=positive))
    def test_symmetry(self, a, b, ls):
        h = hyp(ls=ls)
        assert kernel_eval(a, b, h) == kernel_eval(b, a, h)

    @given(arrays(float, 2, elements=finite), arrays(float, 2, elements=finite),
           arrays(float, 2, elements=finite), positive)
    def test_translation_invariance(self, a, b, shift, ls):
        h = hyp(ls=ls)
        assert kernel_eval(a + shift, b + shift, h) == pytest.approx(kernel_eval(a, b, h), rel=1e-9, abs=1e-300)

    @given(arrays(float, 2, elements=finite), arrays(float, 2, elements=finite),
           arrays(float, 2, elements=positive), st.floats(0.1, 10))
    def test_joint_scaling_invariance(self, a, b, ls, scale):
        k1 = kernel_eval(a, b, hyp(ls=ls))
        k2 = kernel_eval(scale * a, scale * b, hyp(ls=scale * ls))
        assert k2 == pytest.approx(k1, rel=1e-9, abs=1e-300)


class TestKernelMatrix:
    def test_single_point(self):
        np.testing.assert_allclose(kernel_matrix([[0.5]], [[0.5]], hyp(sf2=3.0)), [[3.0]], rtol=1e-15)

    def test_three_points_closed_form(self):
        X = np.array([[0.0], [1.0], [2.0]])
        K = kernel_matrix(X, X, hyp())
        e1, e2 = math.exp(-0.5), math.exp(-2.0)
        np.testing.assert_allclose(K, [[1, e1, e2], [e1, 1, e1], [e2, e1, 1]], rtol=1e-14)

    @given(arrays(float, (4, 2), elements=finite), arrays(float, (3, 2), elements=finite),
           arrays(float, 2, elements=positive))
    def test_entries_match_eval_and_transpose(self, A, B, ls):
        h = hyp(sf2=1.3, ls=ls)
        K = kernel_matrix(A, B, h)
        expect = np.array([[kernel_eval(a, b, h) for b in B] for a in A])
        np.testing.assert_allclose(K, expect, rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(kernel_matrix(B, A, h), K.T, rtol=1e-12, atol=1e-15)

    @given(arrays(float, (6, 2), elements=finite), arrays(float, 2, elements=positive))
    def test_psd(self, A, ls):
        K = kernel_matrix(A, A, hyp(ls=ls))
        assert np.all(K == K.T)
        assert np.linalg.eigvalsh(K).min() > -1e-10

    def test_isotropic_equals_tied_ard(self):
        rng = np.random.default_rng(3)
        A, B = rng.normal(size=(5, 3)), rng.normal(size=(4, 3))
        np.testing.assert_allclose(kernel_matrix(A, B, hyp(ls=0.7)), kernel_matrix(A, B, hyp(ls=[0.7] * 3)))


class TestKernelDiag:
    def test_values(self):
        np.testing.assert_allclose(kernel_diag(np.zeros((5, 2)), hyp(sf2=0.4)), [0.4] * 5, rtol=1e-15)
        np.testing.assert_allclose(kernel_diag([[1.0]], hyp(sf2=2.5)), [2.5], rtol=1e-15)

    @given(arrays(float, (5, 2), elements=finite))
    def test_matches_matrix_diagonal(self, A):
        h = hyp(sf2=1.9, ls=[0.3, 1.1])
        np.testing.assert_array_equal(kernel_diag(A, h), np.diag(kernel_matrix(A, A, h)))


class TestJitteredCholesky:
    def test_identity(self):
        L, jit = jittered_cholesky(np.eye(3), JitterPolicy(1e-6))
        assert jit == 1e-6
        np.testing.assert_allclose(L, math.sqrt(1 + 1e-6) * np.eye(3), rtol=1e-15)

    def test_coincident_inducing_points(self):
        Z = np.array([[0.2], [0.2]])
        A = kernel_matrix(Z, Z, hyp())
        with pytest.raises(np.linalg.LinAlgError):
            np.linalg.cholesky(A)
        L, jit = jittered_cholesky(A)
        assert jit > 0
        recon = L @ L.T
        target = A + jit * np.eye(2)
        assert np.linalg.norm(recon - target) <= 1e-8 * np.linalg.norm(target)

    def test_indefinite(self):
        A = np.diag([1.0, -1.0])
        with pytest.raises(NotPositiveDefiniteError) as info:
            jittered_cholesky(A, JitterPolicy(1e-6, 10.0, 1e-2))
        # zero mean diagonal falls back to unit scale
        assert info.value.ladder[-1] == pytest.approx(1e-2)
        assert len(info.value.ladder) == 5

    def test_ladder_escalates_to_smallest_sufficient(self):
        # eigenvalue -5e-5 needs jitter above it: 1e-4 is the first rung that works
        A = np.diag([1.0, 1.0, -5e-5])
        mean_diag = np.mean(np.diag(A))
        L, jit = jittered_cholesky(A, JitterPolicy(1e-6, 10.0, 1e-2))
        assert jit == pytest.approx(1e-4 * mean_diag)

    def test_rejects_asymmetric(self):
        with pytest.raises(ValueError):
            jittered_cholesky(np.array([[1.0, 0.5], [0.0, 1.0]]))

    @pytest.mark.parametrize("kw", [dict(initial_jitter=0.0), dict(escalation_factor=1.0),
                                    dict(initial_jitter=1.0, max_jitter=0.1)])
    def test_policy_validation(self, kw):
        with pytest.raises(ValueError):
            JitterPolicy(**kw)

    @settings(max_examples=30)
    @given(st.integers(2, 30), st.integers(0, 2**31 - 1), positive, positive)
    def test_distinct_points_factorise_at_initial_jitter(self, n, seed, ls, sf2):
        X = np.sort(np.random.default_rng(seed).uniform(-3, 3, size=n))
        X = X[np.r_[True, np.diff(X) > 1e-3]][:, None]
        K = kernel_matrix(X, X, hyp(sf2=sf2, ls=ls))
        L, jit = jittered_cholesky(K, JitterPolicy(1e-6))
        assert jit == pytest.approx(1e-6 * sf2)
