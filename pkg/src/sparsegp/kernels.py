"""Squared-exponential covariance and jitter-stabilised Cholesky factorisation.

The isotropic kernel is the ARD kernel with a single shared lengthscale, so
there is one code path for both.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Cholesky factorisation failed for every jitter level on the ladder."""

    def __init__(self, message: str, ladder: tuple[float, ...] = ()):
        super().__init__(message)
        self.ladder = tuple(ladder)


@dataclass(frozen=True)
class Hyperparameters:
    """Signal variance, lengthscales and noise variance, stored as logs.

    A lengthscale vector of length one is an isotropic kernel and is broadcast
    over every input dimension.
    """

    log_signal_variance: float
    log_lengthscales: np.ndarray
    log_noise_variance: float

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.log_lengthscales, dtype=float)).copy()
        ls.setflags(write=False)
        object.__setattr__(self, "log_lengthscales", ls)
        object.__setattr__(self, "log_signal_variance", float(self.log_signal_variance))
        object.__setattr__(self, "log_noise_variance", float(self.log_noise_variance))
        vec = self.to_vector()
        if ls.ndim != 1 or ls.size == 0 or not np.all(np.isfinite(vec)):
            raise ValueError(f"invalid hyperparameters: {vec}")

    @classmethod
    def from_values(cls, signal_variance, lengthscales, noise_variance) -> "Hyperparameters":
        values = np.concatenate(
            [[signal_variance], np.atleast_1d(lengthscales), [noise_variance]]
        ).astype(float)
        if np.any(~(values > 0)):
            raise ValueError("hyperparameters must be strictly positive")
        return cls(np.log(signal_variance), np.log(np.atleast_1d(lengthscales)), np.log(noise_variance))

    @classmethod
    def from_vector(cls, vec) -> "Hyperparameters":
        vec = np.asarray(vec, dtype=float)
        return cls(vec[0], vec[1:-1], vec[-1])

    def to_vector(self) -> np.ndarray:
        return np.concatenate([[self.log_signal_variance], self.log_lengthscales, [self.log_noise_variance]])

    @property
    def signal_variance(self) -> float:
        return float(np.exp(self.log_signal_variance))

    @property
    def lengthscales(self) -> np.ndarray:
        return np.exp(self.log_lengthscales)

    @property
    def noise_variance(self) -> float:
        return float(np.exp(self.log_noise_variance))

    @property
    def isotropic(self) -> bool:
        return self.log_lengthscales.size == 1

    @property
    def size(self) -> int:
        return self.log_lengthscales.size + 2

    def check_dim(self, d: int) -> None:
        if not (self.isotropic or self.log_lengthscales.size == d):
            raise ValueError(
                f"{self.log_lengthscales.size} lengthscales for {d}-dimensional inputs"
            )

    def lengthscales_for(self, d: int) -> np.ndarray:
        self.check_dim(d)
        return np.broadcast_to(self.lengthscales, (d,))

    def replace(self, **kw) -> "Hyperparameters":
        vals = dict(
            signal_variance=self.signal_variance,
            lengthscales=self.lengthscales,
            noise_variance=self.noise_variance,
        )
        vals.update(kw)
        return Hyperparameters.from_values(**vals)

    def __eq__(self, other):
        if not isinstance(other, Hyperparameters):
            return NotImplemented
        a, b = self.to_vector(), other.to_vector()
        return a.shape == b.shape and bool(np.all(a == b))

    def __hash__(self):
        return hash(self.to_vector().tobytes())

    def __repr__(self):
        return (
            f"Hyperparameters(signal_variance={self.signal_variance:.6g}, "
            f"lengthscales={np.array2string(self.lengthscales, precision=4)}, "
            f"noise_variance={self.noise_variance:.6g})"
        )


@dataclass(frozen=True)
class JitterPolicy:
    """Escalating diagonal jitter, relative to the mean of the matrix diagonal."""

    initial_jitter: float = 1e-6
    escalation_factor: float = 10.0
    max_jitter: float = 1e-2

    def __post_init__(self):
        if not (self.initial_jitter > 0 and self.max_jitter > 0):
            raise ValueError("jitter levels must be positive")
        if self.initial_jitter > self.max_jitter:
            raise ValueError("initial_jitter exceeds max_jitter")
        if not self.escalation_factor > 1:
            raise ValueError("escalation_factor must exceed 1")

    def ladder(self) -> list[float]:
        levels = []
        eps = self.initial_jitter
        while eps < self.max_jitter * (1 + 1e-12):
            levels.append(eps)
            eps *= self.escalation_factor
        if levels[-1] < self.max_jitter * (1 - 1e-12):
            levels.append(self.max_jitter)
        return levels


DEFAULT_JITTER = JitterPolicy()


def _as_inputs(A) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    if A.ndim == 1:
        A = A[:, None]
    if A.ndim != 2:
        raise ValueError(f"inputs must be a matrix, got shape {A.shape}")
    return A


def scaled_sqdist(A, B, lengthscales) -> np.ndarray:
    """Squared distance between rows after dividing each axis by its lengthscale."""
    a = A / lengthscales
    b = B / lengthscales
    d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d2, 0.0)


def kernel_eval(x, x2, hyper: Hyperparameters) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x2 = np.atleast_1d(np.asarray(x2, dtype=float))
    if x.shape != x2.shape or x.ndim != 1:
        raise ValueError(f"input shapes differ: {x.shape} vs {x2.shape}")
    ls = hyper.lengthscales_for(x.size)
    r = (x - x2) / ls
    return hyper.signal_variance * float(np.exp(-0.5 * r @ r))


def kernel_matrix(A, B, hyper: Hyperparameters) -> np.ndarray:
    same = A is B
    A, B = _as_inputs(A), _as_inputs(B)
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"input dimensions differ: {A.shape[1]} vs {B.shape[1]}")
    ls = hyper.lengthscales_for(A.shape[1])
    K = hyper.signal_variance * np.exp(-0.5 * scaled_sqdist(A, B, ls))
    if same:
        # exact symmetry and unit correlation on the diagonal
        K = 0.5 * (K + K.T)
        np.fill_diagonal(K, hyper.signal_variance)
    return K


def kernel_diag(A, hyper: Hyperparameters) -> np.ndarray:
    A = _as_inputs(A)
    hyper.check_dim(A.shape[1])
    return np.full(A.shape[0], hyper.signal_variance)


def jittered_cholesky(A, policy: JitterPolicy = DEFAULT_JITTER) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``A + jitter*I`` for the first jitter on the ladder that works.

    Jitter levels are relative to ``mean(diag(A))``; the returned jitter is absolute.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"expected a square matrix, got {A.shape}")
    scale = float(np.mean(np.diag(A))) if A.size else 1.0
    if not scale > 0:
        scale = 1.0
    asym = np.max(np.abs(A - A.T)) if A.size else 0.0
    if asym > 1e-10 * max(np.max(np.abs(A)), 1e-300):
        raise ValueError(f"matrix is not symmetric (max asymmetry {asym:.3g})")
    tried = []
    eye = np.eye(A.shape[0])
    for rel in policy.ladder():
        jitter = rel * scale
        tried.append(jitter)
        try:
            L = scipy.linalg.cholesky(A + jitter * eye, lower=True, check_finite=True)
        except (np.linalg.LinAlgError, ValueError):
            continue
        return L, jitter
    raise NotPositiveDefiniteError(
        "matrix not positive definite at maximum jitter "
        f"{tried[-1]:.3g}; duplicate inputs or degenerate hyperparameters?",
        ladder=tuple(tried),
    )
