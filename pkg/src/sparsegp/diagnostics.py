"""Inducing-input addition sweeps, clump detection, noise-bias reports and test metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse.csgraph
import scipy.spatial.distance

from .kernels import JitterPolicy, NotPositiveDefiniteError
from .models import ConsistencyError, jitter_sensitivity, Method, NlmlBreakdown, PredictiveDistribution, SparseModel

DEFAULT_CLUMP_THRESHOLD = 1e-2
DEFAULT_GRID_POINTS = 200


@dataclass
class SweepResult:
    grid: np.ndarray
    baseline: NlmlBreakdown
    delta_total: np.ndarray
    delta_data_fit: np.ndarray
    delta_complexity: np.ndarray
    delta_trace: np.ndarray
    jitter: np.ndarray  # applied jitter of each augmented model
    errors: dict = field(default_factory=dict)

    def series(self) -> dict:
        return {
            "delta_total": self.delta_total,
            "delta_data_fit": self.delta_data_fit,
            "delta_complexity": self.delta_complexity,
            "delta_trace": self.delta_trace,
        }


def default_grid(model: SparseModel, n: int = DEFAULT_GRID_POINTS, include_inducing: bool = True) -> np.ndarray:
    """Uniform 1-D grid over [min X - l, max X + l], merged with the current inducing inputs.

    The inducing inputs are included so the sweep hits the spikes exactly.
    """
    if model.dataset.dim != 1:
        raise ValueError("default_grid is for one-dimensional inputs; pass an explicit grid")
    ell = float(model.hyper.lengthscales_for(1)[0])
    x = model.dataset.X[:, 0]
    grid = np.linspace(x.min() - ell, x.max() + ell, n)
    if include_inducing:
        grid = np.union1d(grid, model.Z[:, 0])
    return grid[:, None]


def addition_sweep(model: SparseModel, grid=None) -> SweepResult:
    """Change in each objective term from adding one inducing input at each grid point.

    Hyperparameters and the existing inducing inputs stay fixed. Each
    candidate is refactorised from scratch; failures are recorded and the
    sweep continues with NaN deltas.
    """
    if model.method not in (Method.FITC, Method.VFE, Method.DTC):
        raise ValueError("addition_sweep needs a sparse model")
    grid = default_grid(model) if grid is None else np.asarray(grid, dtype=float).reshape(-1, model.dataset.dim)
    if grid.shape[0] == 0:
        raise ValueError("empty sweep grid")
    base = model.nlml()
    n = grid.shape[0]
    out = {k: np.full(n, np.nan) for k in ("total", "data_fit", "complexity_penalty", "trace_term", "jitter")}
    errors = {}
    for i, z in enumerate(grid):
        try:
            aug = model.add_inducing(z)
            d = aug.nlml() - base
            jit = aug.applied_jitter
        except (NotPositiveDefiniteError, ConsistencyError) as err:
            errors[i] = repr(err)
            continue
        out["total"][i] = d.total
        out["data_fit"][i] = d.data_fit
        out["complexity_penalty"][i] = d.complexity_penalty
        out["trace_term"][i] = d.trace_term
        out["jitter"][i] = jit
    return SweepResult(grid, base, out["total"], out["data_fit"], out["complexity_penalty"],
                       out["trace_term"], out["jitter"], errors)


def jitter_tolerance(model: SparseModel) -> float:
    """Scale of objective changes attributable to the jitter on Kuu.

    The larger of the first-order bound ``jitter * ||dF/dKuu||_2`` and the
    actual change from halving the jitter. Duplicating an inducing input is
    equivalent to halving the jitter along one direction, so spikes in an
    addition sweep should return to baseline within this tolerance.
    """
    jitter = model.applied_jitter
    first_order = jitter * jitter_sensitivity(model)
    rel = jitter / model.hyper.signal_variance
    policy = JitterPolicy(rel / 2, model.jitter.escalation_factor, max(model.jitter.max_jitter, rel / 2))
    halved = replace(model, jitter=policy)
    try:
        finite = abs(halved.nlml().total - model.nlml().total)
    except (NotPositiveDefiniteError, ConsistencyError):
        finite = 0.0
    return max(first_order, finite)


@dataclass
class ClumpReport:
    clusters: list
    effective_count: int
    min_pairwise_distance: float


def detect_clumps(Z, lengthscales, threshold: float = DEFAULT_CLUMP_THRESHOLD) -> ClumpReport:
    """Single-linkage clusters of inducing inputs within ``threshold`` lengthscales."""
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    M = Z.shape[0]
    if M == 1:
        return ClumpReport([[0]], 1, math.inf)
    Zs = Z / np.broadcast_to(np.asarray(lengthscales, dtype=float), (Z.shape[1],))
    dist = scipy.spatial.distance.pdist(Zs)
    adj = scipy.spatial.distance.squareform(dist) <= threshold
    _, labels = scipy.sparse.csgraph.connected_components(adj, directed=False)
    groups = {}
    for i, lab in enumerate(labels):
        groups.setdefault(lab, []).append(i)
    clusters = sorted(groups.values(), key=lambda g: g[0])
    return ClumpReport(clusters, len(clusters), float(dist.min()))


@dataclass
class NoiseBiasReport:
    noise_std: dict
    ratio_to_full: dict
    order: list
    flags: dict


def noise_bias_report(models: dict) -> NoiseBiasReport:
    """Noise std per method relative to the exact GP.

    ``models`` maps a label to a trained model; the reference is the entry
    whose method is FULL. Ratios below 0.5 flag underestimation (below 0.05:
    severe); ratios above 1 flag overestimation.
    """
    full = [k for k, m in models.items() if m.method is Method.FULL]
    if not full:
        raise ValueError("noise_bias_report needs a FULL model as reference")
    ref = math.sqrt(models[full[0]].hyper.noise_variance)
    noise = {k: math.sqrt(m.hyper.noise_variance) for k, m in models.items()}
    ratio = {k: v / ref for k, v in noise.items()}
    flags = {}
    for k, r in ratio.items():
        if k in full:
            continue
        if r < 0.05:
            flags[k] = "severe underestimation"
        elif r < 0.5:
            flags[k] = "underestimation"
        elif r > 1.0:
            flags[k] = "overestimation"
    return NoiseBiasReport(noise, ratio, sorted(noise, key=noise.get), flags)


@dataclass
class MetricsReport:
    nlml_per_datum: float
    rmse: float
    smse: float
    nlpp: float

    def as_dict(self):
        return {"nlml_per_datum": self.nlml_per_datum, "rmse": self.rmse, "smse": self.smse, "nlpp": self.nlpp}


def evaluate(pred: PredictiveDistribution, y_test, y_train=None, nlml: float | None = None,
             n_train: int | None = None) -> MetricsReport:
    """RMSE, SMSE (population variance of the test targets) and mean negative log predictive probability.

    ``nlml_per_datum`` is filled when the training objective and size are given.
    """
    y_test = np.asarray(y_test, dtype=float).reshape(-1)
    mean = np.asarray(pred.mean, dtype=float)
    var = np.asarray(pred.observation_variance, dtype=float)
    if mean.shape != y_test.shape or var.shape != y_test.shape:
        raise ValueError(f"prediction length {mean.shape} does not match targets {y_test.shape}")
    resid = y_test - mean
    mse = float(np.mean(resid**2))
    tvar = float(np.var(y_test))
    if not tvar > 0:
        raise ValueError("test targets have zero variance; SMSE undefined")
    nlpp = float(np.mean(0.5 * np.log(2 * np.pi * var) + 0.5 * resid**2 / var))
    if n_train is None and y_train is not None:
        n_train = len(y_train)
    per = float(nlml / n_train) if (nlml is not None and n_train) else float("nan")
    return MetricsReport(per, math.sqrt(mse), mse / tvar, nlpp)
