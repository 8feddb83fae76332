"""Exact and inducing-point GP regression objectives.

Every sparse method shares one negative log marginal likelihood

    F = N/2 log 2pi + 1/2 log|Q + G| + 1/2 y^T (Q + G)^-1 y + tr(T) / (2 sn2)

with Q = Kfu Kuu^-1 Kuf and

    method  G                              T
    FITC    diag(Kff - Q) + sn2 I          0
    VFE     sn2 I                          Kff - Q
    DTC     sn2 I                          0

Sparse evaluations only factorise M x M matrices: ``Kuu + jitter*I = L L^T``
and ``B = I + V G^-1 V^T`` with ``V = L^-1 Kuf``, so that
``Sigma = Kuu + Kuf G^-1 Kfu = L B L^T``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
import scipy.linalg

from .kernels import (
    DEFAULT_JITTER,
    Hyperparameters,
    JitterPolicy,
    NotPositiveDefiniteError,
    jittered_cholesky,
    kernel_diag,
    kernel_matrix,
)

LOG_2PI = math.log(2.0 * math.pi)
# negative residuals below -RESIDUAL_TOL * sf2 are treated as bugs, not round-off
RESIDUAL_TOL = 1e-8


class ConsistencyError(RuntimeError):
    """Internal numerical invariant violated."""


class Method(str, enum.Enum):
    FULL = "FULL"
    FITC = "FITC"
    VFE = "VFE"
    DTC = "DTC"

    @classmethod
    def parse(cls, value) -> "Method":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise ValueError(f"unknown method {value!r}; expected one of {[m.value for m in cls]}") from None

    @property
    def sparse(self) -> bool:
        return self is not Method.FULL


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        y = np.asarray(self.y, dtype=float).reshape(-1)
        if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
            raise ValueError(f"X must be a non-empty N x d matrix, got shape {X.shape}")
        if y.shape[0] != X.shape[0]:
            raise ValueError(f"{X.shape[0]} inputs but {y.shape[0]} outputs")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValueError("dataset contains non-finite values")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def N(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def __len__(self):
        return self.N


@dataclass(frozen=True)
class NlmlBreakdown:
    constant: float
    data_fit: float
    complexity_penalty: float
    trace_term: float
    total: float

    @classmethod
    def from_terms(cls, constant, data_fit, complexity_penalty, trace_term=0.0):
        return cls(
            float(constant),
            float(data_fit),
            float(complexity_penalty),
            float(trace_term),
            float(constant + data_fit + complexity_penalty + trace_term),
        )

    def __sub__(self, other: "NlmlBreakdown") -> "NlmlBreakdown":
        return NlmlBreakdown(
            self.constant - other.constant,
            self.data_fit - other.data_fit,
            self.complexity_penalty - other.complexity_penalty,
            self.trace_term - other.trace_term,
            self.total - other.total,
        )

    def as_dict(self) -> dict:
        return {
            "constant": self.constant,
            "data_fit": self.data_fit,
            "complexity_penalty": self.complexity_penalty,
            "trace_term": self.trace_term,
            "total": self.total,
        }


@dataclass(frozen=True)
class PredictiveDistribution:
    mean: np.ndarray
    latent_variance: np.ndarray
    observation_variance: np.ndarray


def _as_Z(Z, d: int) -> np.ndarray:
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    if Z.ndim != 2 or Z.shape[0] < 1:
        raise ValueError(f"inducing inputs must be a non-empty M x d matrix, got {Z.shape}")
    if Z.shape[1] != d:
        raise ValueError(f"inducing inputs have dimension {Z.shape[1]}, data has {d}")
    if not np.all(np.isfinite(Z)):
        raise ValueError("inducing inputs contain non-finite values")
    Z = Z.copy()
    Z.setflags(write=False)
    return Z


@dataclass(frozen=True, eq=False)
class SparseModel:
    """Immutable snapshot of dataset, hyperparameters, inducing inputs and method.

    Factorisations are computed lazily on first use and cached on the snapshot;
    changing any parameter means building a new snapshot (see ``with_params``).
    ``Z`` is ignored for ``Method.FULL``.
    """

    dataset: Dataset
    hyper: Hyperparameters
    Z: np.ndarray | None
    method: Method = Method.VFE
    jitter: JitterPolicy = field(default=DEFAULT_JITTER)

    def __post_init__(self):
        object.__setattr__(self, "method", Method.parse(self.method))
        self.hyper.check_dim(self.dataset.dim)
        if self.method.sparse:
            object.__setattr__(self, "Z", _as_Z(self.Z, self.dataset.dim))
        elif self.Z is not None:
            object.__setattr__(self, "Z", _as_Z(self.Z, self.dataset.dim))

    @property
    def M(self) -> int:
        return 0 if self.Z is None else self.Z.shape[0]

    def with_params(self, hyper=None, Z=None, method=None) -> "SparseModel":
        return replace(
            self,
            hyper=self.hyper if hyper is None else hyper,
            Z=self.Z if Z is None else Z,
            method=self.method if method is None else method,
        )

    def add_inducing(self, z) -> "SparseModel":
        z = np.asarray(z, dtype=float).reshape(-1, self.dataset.dim)
        return self.with_params(Z=np.vstack([self.Z, z]))

    @cached_property
    def _state(self) -> "_SparseState":
        if not self.method.sparse:
            raise ValueError("no sparse factorisation for the FULL method")
        return _SparseState.build(self)

    @cached_property
    def _full_state(self) -> "_FullState":
        return _FullState.build(self.dataset, self.hyper)

    @property
    def applied_jitter(self) -> float:
        return self._state.jitter if self.method.sparse else 0.0

    @property
    def chol_Kuu(self) -> np.ndarray:
        return self._state.L

    @property
    def chol_Sigma(self) -> np.ndarray:
        st = self._state
        return st.L @ st.LB

    def nlml(self) -> NlmlBreakdown:
        if self.method.sparse:
            return self._state.breakdown
        return self._full_state.breakdown

    def nlml_grad(self):
        if self.method.sparse:
            return sparse_nlml_grad(self)
        bd, g = full_nlml_grad(self.dataset, self.hyper)
        return bd, g, np.zeros((0, self.dataset.dim))

    def predict(self, Xstar) -> PredictiveDistribution:
        return predict(self, Xstar)


@dataclass
class _FullState:
    K: np.ndarray
    L: np.ndarray
    alpha: np.ndarray
    breakdown: NlmlBreakdown

    @classmethod
    def build(cls, data: Dataset, hyper: Hyperparameters) -> "_FullState":
        K = kernel_matrix(data.X, data.X, hyper)
        Ky = K + hyper.noise_variance * np.eye(data.N)
        try:
            L = scipy.linalg.cholesky(Ky, lower=True)
        except np.linalg.LinAlgError as err:
            raise NotPositiveDefiniteError(f"K_ff + noise is not positive definite: {err}") from err
        alpha = scipy.linalg.cho_solve((L, True), data.y)
        bd = NlmlBreakdown.from_terms(
            0.5 * data.N * LOG_2PI,
            0.5 * data.y @ alpha,
            np.log(np.diag(L)).sum(),
        )
        return cls(K, L, alpha, bd)


def full_nlml(dataset: Dataset, hyper: Hyperparameters) -> NlmlBreakdown:
    """Exact GP objective via a Cholesky of ``K_ff + sn2 I``. O(N^3); keep N below a few thousand."""
    hyper.check_dim(dataset.dim)
    return _FullState.build(dataset, hyper).breakdown


def full_nlml_grad(dataset: Dataset, hyper: Hyperparameters):
    """Exact GP objective and its gradient w.r.t. the log-hyperparameter vector."""
    hyper.check_dim(dataset.dim)
    st = _FullState.build(dataset, hyper)
    N = dataset.N
    Kinv = scipy.linalg.cho_solve((st.L, True), np.eye(N))
    W = 0.5 * (Kinv - np.outer(st.alpha, st.alpha))
    WK = W * st.K
    ls = hyper.lengthscales_for(dataset.dim)
    grad = np.empty(hyper.size)
    grad[0] = WK.sum()
    Xs = dataset.X / ls
    g_ls = _sqdist_contract(WK, Xs, Xs)
    grad[1:-1] = g_ls.sum() if hyper.isotropic else g_ls
    grad[-1] = hyper.noise_variance * np.trace(W)
    return st.breakdown, grad


def _sqdist_contract(S, A, B) -> np.ndarray:
    """Per-dimension sum_ij S_ij (A_id - B_jd)^2."""
    return S.sum(1) @ (A * A) + S.sum(0) @ (B * B) - 2.0 * np.einsum("id,ij,jd->d", A, S, B)


@dataclass
class _SparseState:
    Kuu: np.ndarray  # jittered
    Kuf: np.ndarray
    L: np.ndarray
    jitter: float
    V: np.ndarray
    residual: np.ndarray
    g: np.ndarray
    LB: np.ndarray
    c: np.ndarray
    breakdown: NlmlBreakdown

    @classmethod
    def build(cls, model: SparseModel) -> "_SparseState":
        data, hyp, Z = model.dataset, model.hyper, model.Z
        sf2, sn2 = hyp.signal_variance, hyp.noise_variance
        Kuu = kernel_matrix(Z, Z, hyp)
        L, jitter = jittered_cholesky(Kuu, model.jitter)
        Kuu = Kuu + jitter * np.eye(Z.shape[0])
        Kuf = kernel_matrix(Z, data.X, hyp)
        V = scipy.linalg.solve_triangular(L, Kuf, lower=True)
        residual = _residual(kernel_diag(data.X, hyp), V, sf2)
        g = sn2 + residual if model.method is Method.FITC else np.full(data.N, sn2)
        Vg = V / g
        B = np.eye(Z.shape[0]) + Vg @ V.T
        try:
            LB = scipy.linalg.cholesky(B, lower=True)
        except np.linalg.LinAlgError as err:
            raise NotPositiveDefiniteError(f"inner matrix not positive definite: {err}") from err
        c = scipy.linalg.solve_triangular(LB, Vg @ data.y, lower=True)
        y = data.y
        trace = residual.sum() / (2.0 * sn2) if model.method is Method.VFE else 0.0
        bd = NlmlBreakdown.from_terms(
            0.5 * data.N * LOG_2PI,
            0.5 * (y @ (y / g) - c @ c),
            np.log(np.diag(LB)).sum() + 0.5 * np.log(g).sum(),
            trace,
        )
        return cls(Kuu, Kuf, L, jitter, V, residual, g, LB, c, bd)


def _residual(kdiag, V, sf2) -> np.ndarray:
    r = kdiag - (V * V).sum(0)
    if r.size and r.min() < -RESIDUAL_TOL * sf2:
        raise ConsistencyError(f"diag(Kff - Qff) has negative entry {r.min():.3g}")
    return np.maximum(r, 0.0)


def sparse_nlml(model: SparseModel) -> NlmlBreakdown:
    if not model.method.sparse:
        raise ValueError("sparse_nlml needs FITC, VFE or DTC; use full_nlml for FULL")
    return model._state.breakdown


@dataclass
class _Adjoints:
    """Derivatives of F w.r.t. jittered Kuu, Kuf, the sum c.diag(Kff) and sn2."""

    dKuu: np.ndarray
    dKuf: np.ndarray
    dkdiag: np.ndarray | None
    dsn2: float


def _adjoints(model: SparseModel) -> _Adjoints:
    st = model._state
    data, hyp, method = model.dataset, model.hyper, model.method
    y = data.y
    sn2 = hyp.noise_variance
    M = st.L.shape[0]
    solve_L = lambda A, trans=0: scipy.linalg.solve_triangular(st.L, A, lower=True, trans=trans)
    solve_LB = lambda A, trans=0: scipy.linalg.solve_triangular(st.LB, A, lower=True, trans=trans)

    Vg = st.V / st.g
    # B^-1 V G^-1 = V (Q + G)^-1
    BiVg = solve_LB(solve_LB(Vg), trans=1)
    alpha = y / st.g - Vg.T @ solve_LB(st.c, trans=1)  # (Q + G)^-1 y
    diag_Ainv = 1.0 / st.g - (Vg * BiVg).sum(0)
    W_diag = diag_Ainv - alpha**2  # diag of (Q+G)^-1 - alpha alpha^T

    P = solve_L(st.V, trans=1)  # Kuu^-1 Kuf
    Palpha = P @ alpha
    PW = solve_L(BiVg, trans=1) - np.outer(Palpha, alpha)
    # P (Q+G)^-1 P^T = L^-T (I - B^-1) L^-1
    Binv = scipy.linalg.cho_solve((st.LB, True), np.eye(M))
    PWPt = solve_L(solve_L(np.eye(M) - Binv, trans=1).T, trans=1) - np.outer(Palpha, Palpha)

    dKuf = PW.copy()
    dKuu = -0.5 * PWPt
    dsn2 = 0.5 * W_diag.sum()

    # weights of the residual diag(Kff - Q) in the objective
    if method is Method.FITC:
        c = 0.5 * W_diag
    elif method is Method.VFE:
        c = np.full(data.N, 0.5 / sn2)
        dsn2 -= st.residual.sum() / (2.0 * sn2**2)
    else:
        c = None
    if c is not None:
        dKuf -= 2.0 * P * c
        dKuu += (P * c) @ P.T
    return _Adjoints(0.5 * (dKuu + dKuu.T), dKuf, c, dsn2)


def jitter_sensitivity(model: SparseModel) -> float:
    """Spectral norm of dF/dKuu.

    Multiplied by the applied jitter this bounds, to first order, how far the
    objective can move when the jitter changes along one direction, which is
    what duplicating an inducing input amounts to.
    """
    return float(np.linalg.norm(_adjoints(model).dKuu, 2))


def sparse_nlml_grad(model: SparseModel):
    """Objective, gradient w.r.t. log-hyperparameters, and gradient w.r.t. Z.

    The objective is first differentiated w.r.t. the kernel matrices
    (Kuu, Kuf, diag Kff) and the noise variance, then pushed through the
    squared-exponential kernel. Jitter scales with the signal variance, so it
    is part of the signal-variance derivative of Kuu.
    """
    if not model.method.sparse:
        raise ValueError("sparse_nlml_grad needs FITC, VFE or DTC")
    st = model._state
    adj = _adjoints(model)
    data, hyp, Z = model.dataset, model.hyper, model.Z
    X = data.X
    M = Z.shape[0]
    ls = hyp.lengthscales_for(data.dim)
    Kuu_nj = st.Kuu - st.jitter * np.eye(M)
    Suu = adj.dKuu * Kuu_nj
    Suf = adj.dKuf * st.Kuf

    grad = np.empty(hyp.size)
    dkdiag_sum = 0.0 if adj.dkdiag is None else adj.dkdiag @ kernel_diag(X, hyp)
    grad[0] = (adj.dKuu * st.Kuu).sum() + Suf.sum() + dkdiag_sum
    Zs, Xs = Z / ls, X / ls
    g_ls = _sqdist_contract(Suu, Zs, Zs) + _sqdist_contract(Suf, Zs, Xs)
    grad[1:-1] = g_ls.sum() if hyp.isotropic else g_ls
    grad[-1] = hyp.noise_variance * adj.dsn2

    ls2 = ls**2
    gZ = -2.0 * (Suu.sum(1)[:, None] * Z - Suu @ Z) / ls2
    gZ -= (Suf.sum(1)[:, None] * Z - Suf @ X) / ls2
    return st.breakdown, grad, gZ


def heteroscedastic_diag(X, Z, hyper: Hyperparameters, jitter: JitterPolicy = DEFAULT_JITTER) -> np.ndarray:
    """FITC's input-dependent noise diag(Kff - Qff) at the rows of X, floored at zero."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    Z = _as_Z(Z, X.shape[1])
    L, _ = jittered_cholesky(kernel_matrix(Z, Z, hyper), jitter)
    V = scipy.linalg.solve_triangular(L, kernel_matrix(Z, X, hyper), lower=True)
    return _residual(kernel_diag(X, hyper), V, hyper.signal_variance)


def predict(model: SparseModel, Xstar) -> PredictiveDistribution:
    Xstar = np.asarray(Xstar, dtype=float)
    if Xstar.ndim == 1:
        Xstar = Xstar.reshape(-1, model.dataset.dim)
    if Xstar.shape[1] != model.dataset.dim:
        raise ValueError(f"test inputs have dimension {Xstar.shape[1]}, data has {model.dataset.dim}")
    hyp = model.hyper
    kss = kernel_diag(Xstar, hyp)
    if model.method.sparse:
        st = model._state
        A = scipy.linalg.solve_triangular(st.L, kernel_matrix(model.Z, Xstar, hyp), lower=True)
        BA = scipy.linalg.solve_triangular(st.LB, A, lower=True)
        mean = BA.T @ st.c
        var = kss - (A * A).sum(0) + (BA * BA).sum(0)
    else:
        st = model._full_state
        Ks = kernel_matrix(model.dataset.X, Xstar, hyp)
        mean = Ks.T @ st.alpha
        v = scipy.linalg.solve_triangular(st.L, Ks, lower=True)
        var = kss - (v * v).sum(0)
    var = np.maximum(var, 0.0)
    return PredictiveDistribution(mean, var, var + hyp.noise_variance)
