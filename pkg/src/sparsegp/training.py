"""Joint optimisation of log-hyperparameters and inducing inputs."""

from __future__ import annotations

import enum
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.cluster.vq
import scipy.optimize

from .data import rng
from .kernels import Hyperparameters, NotPositiveDefiniteError
from .models import ConsistencyError, Dataset, Method, NlmlBreakdown, SparseModel

log = logging.getLogger(__name__)

KMEANS_ITERATIONS = 25


@dataclass(frozen=True)
class OptimizerConfig:
    max_iterations: int = 1000
    gradient_tolerance: float | None = None  # None: 1e-6 * N
    objective_tolerance: float = 1e-9
    freeze_hyper_iterations: int = 0
    restarts: int = 1
    seed: int = 0
    min_noise_variance: float = 1e-8
    memory: int = 10

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.gradient_tolerance is not None and not self.gradient_tolerance > 0:
            raise ValueError("gradient_tolerance must be positive")
        if not self.objective_tolerance > 0:
            raise ValueError("objective_tolerance must be positive")
        if self.freeze_hyper_iterations < 0:
            raise ValueError("freeze_hyper_iterations must be >= 0")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")


class InitKind(str, enum.Enum):
    RANDOM_SUBSET = "RANDOM_SUBSET"
    KMEANS = "KMEANS"
    GIVEN = "GIVEN"
    FROM_MODEL = "FROM_MODEL"


@dataclass(frozen=True)
class InitScheme:
    kind: InitKind = InitKind.RANDOM_SUBSET
    Z: np.ndarray | None = None
    hyper: Hyperparameters | None = None
    model: SparseModel | None = None

    @classmethod
    def random_subset(cls):
        return cls(InitKind.RANDOM_SUBSET)

    @classmethod
    def kmeans(cls):
        return cls(InitKind.KMEANS)

    @classmethod
    def given(cls, Z, hyper=None):
        return cls(InitKind.GIVEN, Z=np.asarray(Z, dtype=float), hyper=hyper)

    @classmethod
    def from_model(cls, model: SparseModel):
        return cls(InitKind.FROM_MODEL, model=model)

    @classmethod
    def parse(cls, name) -> "InitScheme":
        kind = InitKind(str(name).upper().replace("-", "_"))
        if kind not in (InitKind.RANDOM_SUBSET, InitKind.KMEANS):
            raise ValueError(f"init scheme {name!r} needs explicit arguments")
        return cls(kind)


@dataclass
class IterationRecord:
    objective: float
    breakdown: NlmlBreakdown
    grad_norm: float
    log_hyper: np.ndarray
    Z_summary: dict


@dataclass
class TrainingTrace:
    records: list[IterationRecord] = field(default_factory=list)
    status: str = "max-iter"
    message: str = ""
    n_evaluations: int = 0

    @property
    def objectives(self) -> np.ndarray:
        return np.array([r.objective for r in self.records])

    @property
    def final_objective(self) -> float:
        return self.records[-1].objective if self.records else float("nan")


def default_hyper(dataset: Dataset, isotropic: bool = False) -> Hyperparameters:
    var_y = float(np.var(dataset.y))
    if not var_y > 0:
        var_y = 1.0
    ls = dataset.X.std(0)
    ls = np.where(ls > 0, ls, 1.0)
    if isotropic:
        ls = np.array([float(np.mean(ls))])
    return Hyperparameters.from_values(var_y, ls, 0.1 * var_y)


def initialize(dataset: Dataset, M: int, scheme: InitScheme | None = None, seed: int = 0,
               isotropic: bool = False) -> tuple[np.ndarray, Hyperparameters]:
    """Initial inducing inputs and hyperparameters."""
    if dataset is None or dataset.N < 1:
        raise ValueError("cannot initialise from an empty dataset")
    if M < 1:
        raise ValueError("M must be >= 1")
    scheme = scheme or InitScheme.random_subset()
    hyper = default_hyper(dataset, isotropic)
    gen = rng(seed)
    if scheme.kind is InitKind.RANDOM_SUBSET:
        idx = gen.choice(dataset.N, size=M, replace=M > dataset.N)
        Z = dataset.X[idx].copy()
    elif scheme.kind is InitKind.KMEANS:
        if M >= dataset.N:
            idx = gen.choice(dataset.N, size=M, replace=M > dataset.N)
            Z = dataset.X[idx].copy()
        else:
            Z, _ = scipy.cluster.vq.kmeans2(
                dataset.X, M, iter=KMEANS_ITERATIONS, minit="++", missing="warn", seed=gen
            )
    elif scheme.kind is InitKind.GIVEN:
        Z = np.asarray(scheme.Z, dtype=float).reshape(-1, dataset.dim)
        if scheme.hyper is not None:
            scheme.hyper.check_dim(dataset.dim)
            hyper = scheme.hyper
    else:
        other = scheme.model
        if other.Z is None:
            raise ValueError("FROM_MODEL needs a sparse model with inducing inputs")
        Z = other.Z.copy()
        hyper = other.hyper
    if Z.shape[1] != dataset.dim:
        raise ValueError(f"initial Z has dimension {Z.shape[1]}, data has {dataset.dim}")
    return Z, hyper


def _z_summary(Z):
    if Z is None:
        return {}
    return {"M": int(Z.shape[0]), "min": Z.min(0).tolist(), "max": Z.max(0).tolist()}


class _Objective:
    """Maps a flat parameter vector to (F, gradient); remembers the best point seen."""

    def __init__(self, model: SparseModel, free_hyper: bool, free_Z: bool):
        self.model = model
        self.free_hyper = free_hyper
        self.free_Z = free_Z and model.method.sparse
        self.nh = model.hyper.size
        self.cache = {}
        self.best = (np.inf, None)
        self.n_evals = 0

    def pack(self, model) -> np.ndarray:
        parts = []
        if self.free_hyper:
            parts.append(model.hyper.to_vector())
        if self.free_Z:
            parts.append(model.Z.ravel())
        return np.concatenate(parts) if parts else np.zeros(0)

    def unpack(self, x) -> SparseModel:
        hyper, Z = self.model.hyper, self.model.Z
        i = 0
        if self.free_hyper:
            hyper = Hyperparameters.from_vector(x[: self.nh])
            i = self.nh
        if self.free_Z:
            Z = x[i:].reshape(self.model.Z.shape)
        return self.model.with_params(hyper=hyper, Z=Z)

    def evaluate(self, x):
        key = x.tobytes()
        if key in self.cache:
            return self.cache[key]
        self.n_evals += 1
        try:
            m = self.unpack(x)
            bd, gh, gZ = m.nlml_grad()
            f = bd.total
            parts = []
            if self.free_hyper:
                parts.append(gh)
            if self.free_Z:
                parts.append(gZ.ravel())
            g = np.concatenate(parts) if parts else np.zeros(0)
            if not (np.isfinite(f) and np.all(np.isfinite(g))):
                raise FloatingPointError("non-finite objective")
        except (NotPositiveDefiniteError, ConsistencyError, FloatingPointError, ValueError) as err:
            log.debug("evaluation failed: %s", err)
            m, bd, f, g = None, None, np.inf, np.zeros_like(x)
        out = (f, g, bd, m)
        self.cache = {key: out}
        if f < self.best[0]:
            self.best = (f, m)
        return out

    def fun(self, x):
        f, g, _, _ = self.evaluate(x)
        return f, g


def _bounds(obj: _Objective, config: OptimizerConfig):
    if not obj.free_hyper:
        return None
    n = obj.pack(obj.model).size
    lower = [None] * n
    lower[obj.nh - 1] = float(np.log(config.min_noise_variance))
    return list(zip(lower, [None] * n))


def _run_lbfgs(model, config, trace, max_iter, free_hyper, gtol):
    obj = _Objective(model, free_hyper=free_hyper, free_Z=True)
    x0 = obj.pack(model)
    if x0.size == 0 or max_iter <= 0:
        return model
    f0, g0, bd0, _ = obj.evaluate(x0)
    if not np.isfinite(f0):
        raise ValueError("objective is not finite at the initial parameters")
    if not trace.records:
        trace.records.append(IterationRecord(f0, bd0, float(np.linalg.norm(g0)), model.hyper.to_vector(), _z_summary(model.Z)))

    def callback(intermediate_result):
        f, g, bd, m = obj.evaluate(intermediate_result.x)
        if m is not None:
            trace.records.append(IterationRecord(f, bd, float(np.linalg.norm(g)), m.hyper.to_vector(), _z_summary(m.Z)))

    res = scipy.optimize.minimize(
        obj.fun, x0, jac=True, method="L-BFGS-B", bounds=_bounds(obj, config), callback=callback,
        options=dict(maxiter=int(max_iter), maxfun=int(max(20 * max_iter, 100)), gtol=gtol,
                     ftol=config.objective_tolerance, maxcor=config.memory),
    )
    trace.n_evaluations += obj.n_evals
    msg = str(res.message)
    if res.nit >= max_iter or "ITERATIONS" in msg.upper() or "EVALUATIONS" in msg.upper():
        trace.status = "max-iter"
    elif res.success:
        trace.status = "converged"
    else:
        trace.status = "line-search-failure"
    trace.message = msg
    best_f, best_model = obj.best
    return best_model if best_model is not None else model


def optimize(model: SparseModel, config: OptimizerConfig | None = None) -> tuple[SparseModel, TrainingTrace]:
    """L-BFGS-B on log-hyperparameters and flattened Z; returns the best iterate and its trace.

    During the first ``freeze_hyper_iterations`` iterations only Z moves.
    A failed line search is recorded in the trace, not raised.
    """
    config = config or OptimizerConfig()
    trace = TrainingTrace()
    gtol = config.gradient_tolerance if config.gradient_tolerance is not None else 1e-6 * model.dataset.N
    current = model
    remaining = config.max_iterations
    if config.freeze_hyper_iterations > 0 and model.method.sparse:
        n_before = len(trace.records)
        current = _run_lbfgs(current, config, trace, config.freeze_hyper_iterations, False, gtol)
        remaining -= max(len(trace.records) - n_before - 1, 0)
    if remaining > 0:
        current = _run_lbfgs(current, config, trace, remaining, True, gtol)
    # the trace's last record is the returned model
    if trace.records:
        bd = current.nlml()
        last = trace.records[-1]
        if last.objective != bd.total:
            trace.records.append(IterationRecord(bd.total, bd, float("nan"), current.hyper.to_vector(), _z_summary(current.Z)))
    return current, trace


@dataclass
class MultistartResult:
    best: SparseModel
    best_seed: int
    models: list
    traces: list
    objectives: list
    seeds: list
    errors: dict

    @property
    def best_trace(self) -> TrainingTrace:
        return self.traces[self.seeds.index(self.best_seed)]


def _one_restart(args):
    dataset, M, method, config, scheme, seed, isotropic, jitter = args
    Z, hyper = initialize(dataset, M, scheme, seed=seed, isotropic=isotropic)
    kw = {} if jitter is None else {"jitter": jitter}
    model = SparseModel(dataset, hyper, Z if Method.parse(method).sparse else None, method, **kw)
    return optimize(model, config)


def optimize_multistart(dataset: Dataset, M: int, method, config: OptimizerConfig | None = None,
                        scheme: InitScheme | None = None, isotropic: bool = False, jobs: int = 1,
                        jitter=None) -> MultistartResult:
    """``config.restarts`` seeded runs; the best final objective wins, ties to the lowest seed.

    FULL runs once regardless of ``config.restarts``.
    """
    config = config or OptimizerConfig()
    method = Method.parse(method)
    # FULL has no inducing inputs and a data-driven start, so its restarts would all coincide
    n_runs = 1 if method is Method.FULL else config.restarts
    seeds = [config.seed + r for r in range(n_runs)]
    tasks = [(dataset, M, method, config, scheme, s, isotropic, jitter) for s in seeds]
    outcomes = []
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_one_restart, t) for t in tasks]
            for fut in futures:
                try:
                    outcomes.append(fut.result())
                except Exception as err:  # noqa: BLE001
                    outcomes.append(err)
    else:
        for t in tasks:
            try:
                outcomes.append(_one_restart(t))
            except (ValueError, NotPositiveDefiniteError, ConsistencyError) as err:
                outcomes.append(err)
    models, traces, objectives, errors = [], [], [], {}
    for s, out in zip(seeds, outcomes):
        if isinstance(out, Exception):
            errors[s] = repr(out)
            models.append(None)
            traces.append(None)
            objectives.append(np.inf)
        else:
            models.append(out[0])
            traces.append(out[1])
            objectives.append(out[0].nlml().total)
    if not any(m is not None for m in models):
        raise RuntimeError(f"all {len(seeds)} restarts failed: {errors}")
    order = sorted(range(len(seeds)), key=lambda i: (objectives[i], seeds[i]))
    b = order[0]
    return MultistartResult(models[b], seeds[b], models, traces, objectives, seeds, errors)
