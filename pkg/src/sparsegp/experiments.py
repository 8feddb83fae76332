"""Named studies comparing FULL, FITC and VFE, with manifests and plot data.

Each study takes an ``ExperimentConfig`` and returns a ``RunManifest`` whose
``results`` and ``series`` are plain JSON-able values. ``write_run`` persists
them; ``emit_plots`` turns a manifest into delimited series files and
matplotlib scripts.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .data import (
    DataSource,
    InputDistribution,
    SyntheticSpec,
    content_hash,
    load_xy,
    rng,
    sample_gp,
    snelson,
    standardize,
    subset,
)
from .diagnostics import addition_sweep, default_grid, detect_clumps, evaluate, jitter_tolerance, noise_bias_report
from .kernels import Hyperparameters, NotPositiveDefiniteError
from .models import ConsistencyError, Dataset, Method, SparseModel
from .training import (
    InitScheme,
    OptimizerConfig,
    default_hyper,
    initialize,
    optimize,
    optimize_multistart,
)

log = logging.getLogger(__name__)

EXPERIMENTS = ("fit", "sweep-add", "clump-study", "recover-zx", "regime-study", "ard-study")


class ConfigError(ValueError):
    """Invalid experiment configuration; ``field`` is the dotted path of the offending entry."""

    def __init__(self, field_path: str, message: str):
        super().__init__(f"{field_path}: {message}")
        self.field = field_path


# Per-experiment defaults chosen to match the studies they reproduce.
DEFAULTS = {
    "fit": {"data": {"source": "snelson"}, "methods": ["FULL", "FITC", "VFE"], "optimizer": {"restarts": 1}},
    "sweep-add": {"data": {"source": "snelson"}, "methods": ["VFE", "FITC"], "M": 7,
                  "optimizer": {"restarts": 3}, "grid_points": 200},
    "clump-study": {"data": {"source": "snelson"}, "methods": ["VFE", "FITC"], "M": 15,
                    "optimizer": {"restarts": 1}, "clump_threshold": 1e-2},
    "recover-zx": {"data": {"source": "snelson", "subset": {"n": 100, "rule": "FIRST"}},
                   "methods": ["VFE", "FITC"],
                   "optimizer": {"objective_tolerance": 1e-12, "gradient_tolerance": 1e-10},
                   "clump_threshold": 1e-3},
    "regime-study": {"data": {"source": "synthetic", "synthetic": {
                         "dim": 4, "n_train": 1024, "n_test": 1024, "lengthscale": 1.5,
                         "signal_variance": 1.0, "noise_variance": 0.01, "input_distribution": "GAUSSIAN",
                         "input_scale": 2.0}},
                     "methods": ["VFE", "FITC"], "M_list": [16, 32, 64, 128, 256, 512, 1024],
                     "optimizer": {"restarts": 3}, "isotropic": True},
    "ard-study": {"data": {"source": "ard-synthetic"}, "methods": ["FULL", "FITC", "VFE"], "M": 40, "sod_size": 2048, "freeze_iterations": 200,
                  "optimizer": {"restarts": 1}},
}

ARD_SYNTHETIC = {"dim": 32, "relevant": 4, "n_train": 3072, "n_test": 1024, "relevant_lengthscale": 1.0,
                 "irrelevant_lengthscale": 1e3, "signal_variance": 1.0, "noise_variance": 0.04,
                 "input_distribution": "UNIFORM", "input_scale": 1.73}


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


@dataclass
class ExperimentConfig:
    experiment: str
    data: dict
    methods: list
    M: int | None
    M_list: list | None
    optimizer: OptimizerConfig
    seed: int
    out: str | None
    init: str
    isotropic: bool
    extra: dict = field(default_factory=dict)

    def echo(self) -> dict:
        d = {
            "experiment": self.experiment,
            "data": self.data,
            "methods": list(self.methods),
            "M": self.M,
            "M_list": self.M_list,
            "optimizer": asdict(self.optimizer),
            "seed": self.seed,
            "init": self.init,
            "isotropic": self.isotropic,
        }
        d.update(self.extra)
        return d


_KNOWN_KEYS = {"experiment", "data", "methods", "M", "M_list", "optimizer", "seed", "out", "init", "isotropic",
               "grid_points", "clump_threshold", "sod_size", "freeze_iterations", "ladder_subset_seed"}


def parse_config(raw: dict, experiment: str | None = None, seed: int | None = None,
                 out: str | None = None) -> ExperimentConfig:
    """Validate a raw mapping (e.g. loaded YAML) and fill per-experiment defaults."""
    raw = dict(raw or {})
    name = experiment or raw.get("experiment")
    if name is None:
        raise ConfigError("experiment", "missing")
    if name not in EXPERIMENTS:
        raise ConfigError("experiment", f"unknown experiment {name!r}; expected one of {EXPERIMENTS}")
    if experiment and raw.get("experiment") not in (None, experiment):
        raise ConfigError("experiment", f"config is for {raw['experiment']!r}, command is {experiment!r}")
    unknown = set(raw) - _KNOWN_KEYS
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown key")
    cfg = _merge(DEFAULTS[name], raw)

    methods = cfg.get("methods") or []
    if not isinstance(methods, list) or not methods:
        raise ConfigError("methods", "must be a non-empty list")
    for i, m in enumerate(methods):
        try:
            Method.parse(m)
        except ValueError as err:
            raise ConfigError(f"methods[{i}]", str(err)) from None
    methods = [Method.parse(m).value for m in methods]

    sparse = any(Method.parse(m).sparse for m in methods)
    M = cfg.get("M")
    M_list = cfg.get("M_list")
    if name == "regime-study":
        if not isinstance(M_list, list) or not M_list:
            raise ConfigError("M_list", "regime-study needs a non-empty list of inducing-point counts")
        for i, v in enumerate(M_list):
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"M_list[{i}]", "must be a positive integer")
    elif name != "recover-zx" and sparse:
        if M is None:
            raise ConfigError("M", "missing; number of inducing inputs is required")
        if not isinstance(M, int) or M < 1:
            raise ConfigError("M", "must be a positive integer")

    opt_raw = cfg.get("optimizer") or {}
    if not isinstance(opt_raw, dict):
        raise ConfigError("optimizer", "must be a mapping")
    valid = {f.name for f in fields(OptimizerConfig)}
    for k in opt_raw:
        if k not in valid:
            raise ConfigError(f"optimizer.{k}", "unknown key")
    run_seed = int(seed if seed is not None else cfg.get("seed", 0))
    opt_raw = dict(opt_raw)
    opt_raw.setdefault("seed", run_seed)
    try:
        opt = OptimizerConfig(**opt_raw)
    except (TypeError, ValueError) as err:
        raise ConfigError("optimizer", str(err)) from None

    data = cfg.get("data")
    if not isinstance(data, dict) or "source" not in data:
        raise ConfigError("data.source", "missing")
    if data["source"] not in ("snelson", "file", "paired", "synthetic", "ard-synthetic"):
        raise ConfigError("data.source", f"unknown source {data['source']!r}")
    if data["source"] == "file" and "path" not in data:
        raise ConfigError("data.path", "missing for file source")
    if data["source"] == "paired" and not ("inputs" in data and "outputs" in data):
        raise ConfigError("data.inputs", "paired source needs inputs and outputs")
    if data["source"] == "synthetic" and not isinstance(data.get("synthetic"), dict):
        raise ConfigError("data.synthetic", "missing")

    init = str(cfg.get("init", "RANDOM_SUBSET")).upper().replace("-", "_")
    if init not in ("RANDOM_SUBSET", "KMEANS"):
        raise ConfigError("init", f"unknown init scheme {init!r}")
    extra = {k: cfg[k] for k in ("grid_points", "clump_threshold", "sod_size", "freeze_iterations") if k in cfg}
    return ExperimentConfig(name, data, methods, M, M_list, opt, run_seed, out or cfg.get("out"), init,
                            bool(cfg.get("isotropic", False)), extra)


def load_config(path, experiment: str | None = None, seed=None, out=None) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
    except FileNotFoundError:
        raise ConfigError("--config", f"{path}: no such file") from None
    except yaml.YAMLError as err:
        raise ConfigError("--config", f"cannot parse {path}: {err}") from None
    if not isinstance(raw, dict):
        raise ConfigError("--config", "top level must be a mapping")
    return parse_config(raw, experiment, seed, out)


@dataclass
class LoadedData:
    train: Dataset
    test: Dataset | None
    provenance: str
    info: dict


def load_data(cfg: ExperimentConfig) -> LoadedData:
    d = cfg.data
    src = d["source"]
    test = None
    info = {}
    if src == "snelson":
        train, prov = snelson(int(d.get("seed", 0)))
    elif src in ("file", "paired"):
        source = DataSource(
            path=d.get("path"), inputs_path=d.get("inputs"), outputs_path=d.get("outputs"),
            delimiter=d.get("delimiter"), input_columns=d.get("input_columns"),
            target_column=int(d.get("target_column", -1)), skip_header=int(d.get("skip_header", 0)),
        )
        train = load_xy(source)
        prov = f"file:{d.get('path') or d.get('inputs')}"
        if "test_path" in d:
            test = load_xy(DataSource(path=d["test_path"], delimiter=d.get("delimiter"),
                                      input_columns=d.get("input_columns"),
                                      target_column=int(d.get("target_column", -1)),
                                      skip_header=int(d.get("skip_header", 0))))
        elif "n_train" in d:
            n = int(d["n_train"])
            if not 1 <= n < train.N:
                raise ConfigError("data.n_train", f"must be in [1, {train.N - 1}]")
            test = Dataset(train.X[n:], train.y[n:])
            train = Dataset(train.X[:n], train.y[:n])
    elif src == "synthetic":
        s = d["synthetic"]
        try:
            dim = int(s["dim"])
            ls = s.get("lengthscales", s.get("lengthscale", 1.0))
            hyp = Hyperparameters.from_values(float(s.get("signal_variance", 1.0)), ls,
                                              float(s.get("noise_variance", 0.01)))
            spec = SyntheticSpec(dim, int(s["n_train"]), int(s["n_test"]), hyp,
                                 InputDistribution(str(s.get("input_distribution", "GAUSSIAN")).upper()),
                                 float(s.get("input_scale", 1.0)), int(s.get("seed", cfg.seed)))
        except (KeyError, TypeError, ValueError) as err:
            raise ConfigError("data.synthetic", f"invalid synthetic spec: {err}") from None
        train, test, _ = sample_gp(spec)
        prov = f"synthetic:seed={spec.seed}"
        info["true_hyper"] = _hyper_dict(hyp)
    else:
        s = _merge(ARD_SYNTHETIC, d.get("synthetic") or {})
        ls = np.full(int(s["dim"]), float(s["irrelevant_lengthscale"]))
        ls[: int(s["relevant"])] = float(s["relevant_lengthscale"])
        hyp = Hyperparameters.from_values(float(s["signal_variance"]), ls, float(s["noise_variance"]))
        spec = SyntheticSpec(int(s["dim"]), int(s["n_train"]), int(s["n_test"]), hyp,
                             InputDistribution(str(s["input_distribution"]).upper()), float(s["input_scale"]),
                             int(s.get("seed", cfg.seed)))
        train, test, _ = sample_gp(spec)
        prov = f"ard-synthetic:seed={spec.seed}"
        info["true_hyper"] = _hyper_dict(hyp)
    if "subset" in d:
        sub = d["subset"] or {}
        try:
            train = subset(train, int(sub["n"]), sub.get("rule", "FIRST"), int(sub.get("seed", cfg.seed)))
        except (KeyError, ValueError) as err:
            raise ConfigError("data.subset", str(err)) from None
        info["subset"] = {"n": int(sub["n"]), "rule": str(sub.get("rule", "FIRST")).upper()}
    if d.get("standardize"):
        train, t = standardize(train)
        if test is not None:
            test = t.forward(test)
        info["standardized"] = True
    return LoadedData(train, test, prov, info)


@dataclass
class RunManifest:
    experiment: str
    config: dict
    dataset: dict
    toolkit_version: str
    results: dict
    series: dict
    errors: dict
    wall_clock_seconds: float = 0.0

    @property
    def status(self) -> str:
        return "partial-failure" if self.errors else "ok"

    def as_dict(self) -> dict:
        d = asdict(self)
        d["status"] = self.status
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        return cls(d["experiment"], d["config"], d["dataset"], d["toolkit_version"], d["results"],
                   d.get("series", {}), d.get("errors", {}), d.get("wall_clock_seconds", 0.0))


def _f(x):
    x = float(x)
    return x if math.isfinite(x) else None


def _hyper_dict(h: Hyperparameters) -> dict:
    return {"signal_variance": h.signal_variance, "lengthscales": h.lengthscales.tolist(),
            "noise_variance": h.noise_variance, "noise_std": math.sqrt(h.noise_variance)}


def _model_record(model: SparseModel, trace=None, test: Dataset | None = None, clump_threshold=1e-2) -> dict:
    bd = model.nlml()
    rec = {"method": model.method.value, "M": model.M, "nlml": bd.as_dict(),
           "nlml_per_datum": bd.total / model.dataset.N, "hyper": _hyper_dict(model.hyper)}
    if model.method.sparse:
        cr = detect_clumps(model.Z, model.hyper.lengthscales_for(model.dataset.dim), clump_threshold)
        rec["Z"] = model.Z.tolist()
        rec["applied_jitter"] = model.applied_jitter
        rec["clumps"] = {"threshold": clump_threshold, "effective_count": cr.effective_count,
                         "clusters": cr.clusters, "min_pairwise_distance": _f(cr.min_pairwise_distance)}
    if trace is not None:
        rec["trace"] = {"status": trace.status, "iterations": max(len(trace.records) - 1, 0),
                        "evaluations": trace.n_evaluations, "objective": trace.objectives.tolist()}
    if test is not None:
        pred = model.predict(test.X)
        rec["metrics"] = evaluate(pred, test.y, nlml=bd.total, n_train=model.dataset.N).as_dict()
    return rec


def _fit_method(data: Dataset, method: str, cfg: ExperimentConfig, M: int | None, jobs: int):
    scheme = InitScheme.parse(cfg.init)
    res = optimize_multistart(data, M or 1, method, cfg.optimizer, scheme, isotropic=cfg.isotropic, jobs=jobs)
    return res


def run_fit(cfg: ExperimentConfig, ld: LoadedData, jobs: int = 1):
    results, errors, models = {}, {}, {}
    thr = cfg.extra.get("clump_threshold", 1e-2)
    for method in cfg.methods:
        try:
            res = _fit_method(ld.train, method, cfg, cfg.M, jobs)
        except (RuntimeError, ValueError, NotPositiveDefiniteError, ConsistencyError) as err:
            errors[method] = repr(err)
            continue
        models[method] = res.best
        rec = _model_record(res.best, res.best_trace, ld.test, thr)
        rec["restarts"] = {"seeds": res.seeds, "objectives": [_f(o) for o in res.objectives],
                           "best_seed": res.best_seed, "errors": {str(k): v for k, v in res.errors.items()}}
        results[method] = rec
    if "FULL" in models and len(models) > 1:
        nb = noise_bias_report(models)
        results["noise_bias"] = {"noise_std": nb.noise_std, "ratio_to_full": nb.ratio_to_full,
                                 "order": nb.order, "flags": nb.flags}
    series = {}
    if ld.train.dim == 1 and models:
        grid = np.linspace(ld.train.X.min(), ld.train.X.max(), 200)
        cols = {"x": grid.tolist()}
        for k, m in models.items():
            p = m.predict(grid[:, None])
            cols[f"{k}_mean"] = p.mean.tolist()
            cols[f"{k}_std"] = np.sqrt(p.observation_variance).tolist()
        series["fit_predictions"] = cols
    return results, series, errors


def run_sweep_add(cfg: ExperimentConfig, ld: LoadedData, jobs: int = 1):
    results, series, errors = {}, {}, {}
    n_grid = int(cfg.extra.get("grid_points", 200))
    for method in cfg.methods:
        if not Method.parse(method).sparse:
            continue
        try:
            res = _fit_method(ld.train, method, cfg, cfg.M, jobs)
            model = res.best
            grid = default_grid(model, n_grid) if ld.train.dim == 1 else None
            sw = addition_sweep(model, grid)
        except (RuntimeError, ValueError, NotPositiveDefiniteError, ConsistencyError) as err:
            errors[method] = repr(err)
            continue
        rec = _model_record(model, res.best_trace)
        rec["sweep"] = {"baseline": sw.baseline.as_dict(), "jitter_tolerance": jitter_tolerance(model),
                        "max_delta_total": _f(np.nanmax(sw.delta_total)),
                        "min_delta_total": _f(np.nanmin(sw.delta_total)),
                        "failed_candidates": {str(k): v for k, v in sw.errors.items()}}
        results[method] = rec
        cols = {"z": sw.grid[:, 0].tolist()}
        for k, v in sw.series().items():
            cols[k] = [_f(x) for x in v]
        series[f"sweep_{method}"] = cols
    return results, series, errors


def run_clump_study(cfg: ExperimentConfig, ld: LoadedData, jobs: int = 1):
    results, series, errors = {}, {}, {}
    thr = float(cfg.extra.get("clump_threshold", 1e-2))
    scheme = InitScheme.parse(cfg.init)
    for method in cfg.methods:
        if not Method.parse(method).sparse:
            continue
        try:
            res = optimize_multistart(ld.train, cfg.M, method, cfg.optimizer, scheme, cfg.isotropic, jobs)
            Z0, _ = initialize(ld.train, cfg.M, scheme, seed=res.best_seed, isotropic=cfg.isotropic)
        except (RuntimeError, ValueError, NotPositiveDefiniteError, ConsistencyError) as err:
            errors[method] = repr(err)
            continue
        rec = _model_record(res.best, res.best_trace, None, thr)
        rec["Z_initial"] = Z0.tolist()
        rec["restart_effective_counts"] = [
            None if m is None else detect_clumps(m.Z, m.hyper.lengthscales_for(ld.train.dim), thr).effective_count
            for m in res.models]
        results[method] = rec
        if ld.train.dim == 1:
            series[f"inducing_{method}"] = {"z_initial": sorted(Z0[:, 0].tolist()),
                                            "z_final": sorted(res.best.Z[:, 0].tolist())}
    return results, series, errors


def run_recover_zx(cfg: ExperimentConfig, ld: LoadedData, jobs: int = 1):
    """Start every sparse method at Z = X and the exact-GP optimum, then optimise."""
    results, series, errors = {}, {}, {}
    thr = float(cfg.extra.get("clump_threshold", 1e-3))
    data = ld.train
    full0 = SparseModel(data, default_hyper(data, cfg.isotropic), None, Method.FULL)
    full, ftrace = optimize(full0, cfg.optimizer)
    results["FULL"] = _model_record(full, ftrace)
    for method in cfg.methods:
        if not Method.parse(method).sparse:
            continue
        try:
            m0 = SparseModel(data, full.hyper, data.X, method)
            init = m0.nlml()
            m, trace = optimize(m0, cfg.optimizer)
        except (ValueError, NotPositiveDefiniteError, ConsistencyError) as err:
            errors[method] = repr(err)
            continue
        ls = m.hyper.lengthscales_for(data.dim)
        rec = _model_record(m, trace, None, thr)
        rec["nlml_initial"] = init.total
        rec["nlml_final"] = m.nlml().total
        rec["initial_effective_count"] = detect_clumps(data.X, ls, thr).effective_count
        _, gh, gZ = m0.nlml_grad()
        rec["initial_grad_Z_inf_norm"] = float(np.abs(gZ).max())
        results[method] = rec
        if data.dim == 1:
            series[f"zx_{method}"] = {"z_initial": data.X[:, 0].tolist(), "z_final": m.Z[:, 0].tolist()}
    results["table"] = {k: {"initial": results[k].get("nlml_initial"), "optimised": results[k]["nlml"]["total"]}
                        for k in results if k in ("FULL", "VFE", "FITC", "DTC")}
    return results, series, errors


def run_regime_study(cfg: ExperimentConfig, ld: LoadedData, jobs: int = 1):
    """Sweep M with nested initialisations.

    Restart 0 warm-starts from the best model at the previous M with extra
    inducing inputs taken from a fixed permutation of the training inputs;
    the other restarts start fresh from nested prefixes of their own
    permutation (so at M = N they start at Z = X).
    """
    results, errors = {}, {}
    data, test = ld.train, ld.test
    opt = cfg.optimizer
    R = opt.restarts
    one = OptimizerConfig(**{**asdict(opt), "restarts": 1})
    full_res = optimize_multistart(data, 1, Method.FULL, opt, isotropic=cfg.isotropic, jobs=jobs)
    results["FULL"] = _model_record(full_res.best, full_res.best_trace, test)
    ladder = sorted(int(m) for m in cfg.M_list)
    perms = [rng(opt.seed + 1000 + r).permutation(data.N) for r in range(R)]
    series = {}
    for method in cfg.methods:
        if not Method.parse(method).sparse:
            continue
        prev = None
        per_M = []
        for M in ladder:
            runs = []
            for r in range(R):
                try:
                    if r == 0 and prev is not None:
                        extra_idx = perms[0][prev.M:M] if M <= data.N else rng(opt.seed + M).choice(data.N, M - prev.M)
                        Z = np.vstack([prev.Z, data.X[extra_idx]])
                        hyper = prev.hyper
                        kind = "warm"
                    else:
                        idx = perms[r][:M] if M <= data.N else np.concatenate([perms[r], rng(opt.seed + r).choice(data.N, M - data.N)])
                        Z = data.X[idx]
                        hyper = default_hyper(data, cfg.isotropic)
                        kind = "fresh"
                    m, trace = optimize(SparseModel(data, hyper, Z, method), one)
                    rec = _model_record(m, trace, test)
                    rec["init"] = kind
                    rec.pop("Z", None)
                    runs.append((m, rec))
                except (ValueError, NotPositiveDefiniteError, ConsistencyError) as err:
                    errors[f"{method}/M={M}/restart={r}"] = repr(err)
            if not runs:
                continue
            objs = [rec["nlml"]["total"] for _, rec in runs]
            b = int(np.argmin(objs))
            prev = runs[b][0]
            best = dict(runs[b][1])
            best["restarts"] = [r for _, r in runs]
            best["best_restart"] = b
            per_M.append(best)
        results[method] = per_M
        series[f"regime_{method}"] = {
            "M": [r["M"] for r in per_M],
            "nlml": [r["nlml"]["total"] for r in per_M],
            "noise_std": [r["hyper"]["noise_std"] for r in per_M],
            "nlpp": [r["metrics"]["nlpp"] for r in per_M] if test is not None else [],
            "smse": [r["metrics"]["smse"] for r in per_M] if test is not None else [],
        }
    f = results["FULL"]
    series["regime_FULL"] = {"nlml": [f["nlml"]["total"]], "noise_std": [f["hyper"]["noise_std"]],
                             "nlpp": [f["metrics"]["nlpp"]] if test is not None else [],
                             "smse": [f["metrics"]["smse"]] if test is not None else []}
    return results, series, errors


def run_ard_study(cfg: ExperimentConfig, ld: LoadedData, jobs: int = 1):
    """FULL on a random subset, FITC, VFE, VFE with frozen hyperparameters, VFE started from FITC."""
    results, errors = {}, {}
    data, test = ld.train, ld.test
    M = cfg.M
    opt = cfg.optimizer
    sod = int(cfg.extra.get("sod_size", 2048))
    scheme = InitScheme.parse(cfg.init)
    rows = {}

    def record(label, model, trace):
        rec = _model_record(model, trace, test)
        inv = 1.0 / model.hyper.lengthscales_for(data.dim)
        rec["inverse_lengthscales"] = inv.tolist()
        rec["top_inverse_lengthscales"] = sorted(inv.tolist(), reverse=True)[:10]
        rows[label] = model
        results[label] = rec

    try:
        sub = subset(data, min(sod, data.N), "SEEDED_RANDOM", opt.seed)
        r = optimize_multistart(sub, 1, Method.FULL, opt, jobs=jobs)
        record("GP (SoD)", r.best, r.best_trace)
    except (RuntimeError, ValueError, NotPositiveDefiniteError) as err:
        errors["GP (SoD)"] = repr(err)
    fitc = None
    for label, method, freeze in (("FITC", "FITC", 0), ("VFE", "VFE", 0),
                                  ("VFE (frozen)", "VFE", int(cfg.extra.get("freeze_iterations", 200)))):
        try:
            o = OptimizerConfig(**{**asdict(opt), "freeze_hyper_iterations": freeze})
            r = optimize_multistart(data, M, method, o, scheme, jobs=jobs)
            record(label, r.best, r.best_trace)
            if label == "FITC":
                fitc = r.best
        except (RuntimeError, ValueError, NotPositiveDefiniteError, ConsistencyError) as err:
            errors[label] = repr(err)
    if fitc is not None:
        try:
            m, trace = optimize(fitc.with_params(method=Method.VFE), opt)
            record("VFE (init FITC)", m, trace)
        except (ValueError, NotPositiveDefiniteError, ConsistencyError) as err:
            errors["VFE (init FITC)"] = repr(err)
    series = {"ard_table": {
        "method": list(results),
        "nlml_per_datum": [results[k]["nlml_per_datum"] for k in results],
        "noise_std": [results[k]["hyper"]["noise_std"] for k in results],
        "rmse": [results[k]["metrics"]["rmse"] if test is not None else None for k in results],
    }}
    for k in results:
        series["ard_table"][f"inv_ls_{k}"] = results[k]["top_inverse_lengthscales"]
    return results, series, errors


RUNNERS = {
    "fit": run_fit,
    "sweep-add": run_sweep_add,
    "clump-study": run_clump_study,
    "recover-zx": run_recover_zx,
    "regime-study": run_regime_study,
    "ard-study": run_ard_study,
}


def run(cfg: ExperimentConfig, jobs: int = 1) -> RunManifest:
    t0 = time.perf_counter()
    ld = load_data(cfg)
    if cfg.experiment in ("regime-study", "ard-study") and ld.test is None:
        raise ConfigError("data", f"{cfg.experiment} needs a test set (synthetic source, test_path or n_train)")
    if cfg.experiment == "recover-zx" and ld.train.N > 2000:
        raise ConfigError("data.subset", "recover-zx places one inducing input per training point; use a subset")
    results, series, errors = RUNNERS[cfg.experiment](cfg, ld, jobs)
    dataset = {"provenance": ld.provenance, "sha256": content_hash(ld.train), "N": ld.train.N,
               "dim": ld.train.dim, "n_test": None if ld.test is None else ld.test.N, **ld.info}
    return RunManifest(cfg.experiment, cfg.echo(), dataset, __version__, _jsonable(results), _jsonable(series),
                       errors, time.perf_counter() - t0)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return _f(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, allow_nan=False) + "\n")


def write_run(manifest: RunManifest, out_dir) -> Path:
    """Write ``manifest.json`` plus one deterministic ``results/<key>.json`` per top-level result."""
    out = Path(out_dir)
    (out / "results").mkdir(parents=True, exist_ok=True)
    for key, value in manifest.results.items():
        safe = key.replace(" ", "_").replace("(", "").replace(")", "").replace("/", "_")
        _dump(value, out / "results" / f"{safe}.json")
    _dump(manifest.as_dict(), out / "manifest.json")
    return out / "manifest.json"


def load_manifest(path) -> RunManifest:
    with open(path) as fh:
        return RunManifest.from_dict(json.load(fh))


# ----------------------------------------------------------------------------
# plot data and scripts

def _series_to_rows(cols: dict):
    names = [k for k, v in cols.items() if isinstance(v, list)]
    n = max((len(cols[k]) for k in names), default=0)
    rows = []
    for i in range(n):
        rows.append(["" if i >= len(cols[k]) or cols[k][i] is None else
                     (repr(float(cols[k][i])) if isinstance(cols[k][i], (int, float)) else str(cols[k][i]))
                     for k in names])
    return names, rows


def _plot_script(name: str, csv_name: str, x: str | None, ys: list, logx: bool = False) -> str:
    lines = [
        f'"""Plot {name} from {csv_name}. Requires matplotlib."""',
        "import csv",
        "from pathlib import Path",
        "",
        "import matplotlib",
        'matplotlib.use("Agg")',
        "import matplotlib.pyplot as plt",
        "",
        "here = Path(__file__).resolve().parent",
        f'with open(here / "{csv_name}") as fh:',
        "    rows = list(csv.DictReader(fh))",
        "",
        "",
        "def col(k):",
        '    return [float(r[k]) if r[k] != "" else float("nan") for r in rows]',
        "",
        "",
        f"ys = {ys!r}",
        "fig, axes = plt.subplots(len(ys), 1, figsize=(6, 2.2 * len(ys)), sharex=True, squeeze=False)",
        "for ax, k in zip(axes[:, 0], ys):",
        f"    x = col({x!r})" if x else "    x = list(range(len(rows)))",
        '    ax.plot(x, col(k), ".-" if len(rows) < 50 else "-")',
        "    ax.set_ylabel(k)",
    ]
    if logx:
        lines.append('    ax.set_xscale("log", base=2)')
    lines += [
        f"axes[-1, 0].set_xlabel({(x or 'index')!r})",
        "fig.tight_layout()",
        f'fig.savefig(here / "{name}.png", dpi=120)',
        "",
    ]
    return "\n".join(lines)


def emit_plots(manifest: RunManifest, out_dir) -> list:
    """Write ``<series>.csv`` and ``plot_<series>.py`` for every series in the manifest."""
    if manifest is None or not manifest.series:
        raise ValueError("manifest has no plot series")
    for name, cols in manifest.series.items():
        if not isinstance(cols, dict) or not any(isinstance(v, list) and v for v in cols.values()):
            raise ValueError(f"series {name!r} is empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, cols in manifest.series.items():
        names, rows = _series_to_rows(cols)
        csv_path = out / f"{name}.csv"
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(names)
            writer.writerows(rows)
        numeric = [k for k in names if all(isinstance(v, (int, float)) or v is None for v in cols[k])]
        x = next((k for k in ("z", "x", "M") if k in numeric), None)
        ys = [k for k in numeric if k != x] or numeric
        script = _plot_script(name, csv_path.name, x, ys, logx=(x == "M"))
        script_path = out / f"plot_{name}.py"
        script_path.write_text(script)
        written += [csv_path, script_path]
    return written
