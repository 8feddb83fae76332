"""Dataset loading, subsetting, standardisation and seeded synthetic GP draws.

All randomness goes through ``rng(seed)``, a numpy ``Generator`` over the
counter-based Philox bit generator, so runs reproduce from the seed alone.
"""

from __future__ import annotations

import enum
import hashlib
import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .kernels import Hyperparameters, JitterPolicy, jittered_cholesky, kernel_matrix
from .models import Dataset

SNELSON_ENV = "SNELSON_DIR"
_SPLIT = re.compile(r"[\s,;]+")


class DataError(ValueError):
    """Raised when input data cannot be read or is malformed."""


def rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))


@dataclass(frozen=True)
class DataSource:
    """Where to read a dataset from.

    Either ``path`` (one table, targets in ``target_column``, inputs in
    ``input_columns`` or every other column), or the Snelson-style pair
    ``inputs_path`` / ``outputs_path``.
    """

    path: str | None = None
    inputs_path: str | None = None
    outputs_path: str | None = None
    delimiter: str | None = None  # None: any run of whitespace, commas or semicolons
    input_columns: Sequence[int] | None = None
    target_column: int = -1
    skip_header: int = 0


def _read_table(path, delimiter=None, skip_header=0) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: no such file")
    rows = []
    width = None
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if lineno <= skip_header:
                continue
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split(delimiter) if delimiter else _SPLIT.split(text)
            parts = [p for p in parts if p != ""]
            try:
                vals = [float(p) for p in parts]
            except ValueError:
                raise DataError(f"{path}:{lineno}: cannot parse {text!r}") from None
            if not all(np.isfinite(vals)):
                raise DataError(f"{path}:{lineno}: non-finite value in {text!r}")
            if width is None:
                width = len(vals)
            elif len(vals) != width:
                raise DataError(f"{path}:{lineno}: expected {width} columns, found {len(vals)}")
            rows.append(vals)
    if not rows:
        raise DataError(f"{path}: no data rows")
    return np.asarray(rows, dtype=float)


def load_xy(source: DataSource) -> Dataset:
    if source.inputs_path is not None or source.outputs_path is not None:
        if source.inputs_path is None or source.outputs_path is None:
            raise DataError("paired format needs both inputs_path and outputs_path")
        X = _read_table(source.inputs_path, source.delimiter, source.skip_header)
        Y = _read_table(source.outputs_path, source.delimiter, source.skip_header)
        if Y.shape[1] != 1:
            raise DataError(f"{source.outputs_path}: expected one output column, found {Y.shape[1]}")
        if X.shape[0] != Y.shape[0]:
            raise DataError(f"{X.shape[0]} input rows but {Y.shape[0]} output rows")
        return Dataset(X, Y[:, 0])
    if source.path is None:
        raise DataError("data source has no path")
    T = _read_table(source.path, source.delimiter, source.skip_header)
    ncol = T.shape[1]
    if ncol < 2:
        raise DataError(f"{source.path}: need at least two columns, found {ncol}")
    tgt = source.target_column % ncol if -ncol <= source.target_column < ncol else None
    if tgt is None:
        raise DataError(f"{source.path}: target column {source.target_column} out of range ({ncol} columns)")
    if source.input_columns is None:
        cols = [c for c in range(ncol) if c != tgt]
    else:
        cols = list(source.input_columns)
        bad = [c for c in cols if not -ncol <= c < ncol]
        if bad:
            raise DataError(f"{source.path}: input columns {bad} out of range ({ncol} columns)")
    return Dataset(T[:, cols], T[:, tgt])


def save_xy(dataset: Dataset, path) -> None:
    """Write the canonical delimited form: input columns then the target, one row per point."""
    with open(path, "w") as fh:
        for x, y in zip(dataset.X, dataset.y):
            fh.write(",".join(repr(float(v)) for v in (*x, y)) + "\n")


def content_hash(dataset: Dataset) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(dataset.X).tobytes())
    h.update(np.ascontiguousarray(dataset.y).tobytes())
    return h.hexdigest()


def load_snelson(directory) -> Dataset:
    """The 1-D Snelson data from its distribution files ``train_inputs`` / ``train_outputs``."""
    directory = Path(directory)
    return load_xy(DataSource(inputs_path=str(directory / "train_inputs"), outputs_path=str(directory / "train_outputs")))


def snelson_surrogate(seed: int = 0, n: int = 200) -> Dataset:
    """Seeded stand-in for the Snelson data: 200 unsorted points on [0, 6], one GP draw plus noise.

    Used when the real files are unavailable. Generating hyperparameters are
    close to the usual exact-GP fit of the real data (lengthscale 0.6,
    signal std 0.8, noise std 0.27).
    """
    hyp = Hyperparameters.from_values(0.64, [0.6], 0.27**2)
    gen = rng(seed)
    X = gen.uniform(0.0, 6.0, size=(n, 1))
    f = _draw_latent(X, hyp, gen)
    y = f + np.sqrt(hyp.noise_variance) * gen.standard_normal(n)
    return Dataset(X, y)


def snelson(seed: int = 0) -> tuple[Dataset, str]:
    """The real Snelson data if ``$SNELSON_DIR`` points at it, else the seeded surrogate.

    Returns the dataset and a provenance label for manifests.
    """
    directory = os.environ.get(SNELSON_ENV)
    if directory and (Path(directory) / "train_inputs").is_file():
        return load_snelson(directory), f"snelson:{directory}"
    return snelson_surrogate(seed), f"snelson-surrogate:seed={seed}"


class SubsetRule(str, enum.Enum):
    FIRST = "FIRST"
    EVERY_OTHER = "EVERY_OTHER"
    SEEDED_RANDOM = "SEEDED_RANDOM"


def subset(dataset: Dataset, n: int, rule=SubsetRule.FIRST, seed: int = 0) -> Dataset:
    rule = SubsetRule(str(getattr(rule, "value", rule)).upper())
    if not 1 <= n <= dataset.N:
        raise ValueError(f"subset size {n} outside [1, {dataset.N}]")
    if rule is SubsetRule.FIRST:
        idx = np.arange(n)
    elif rule is SubsetRule.EVERY_OTHER:
        idx = np.arange(0, dataset.N, 2)
        if idx.size < n:
            idx = np.concatenate([idx, np.arange(1, dataset.N, 2)])
        idx = idx[:n]
    else:
        idx = np.sort(rng(seed).choice(dataset.N, size=n, replace=False))
    return Dataset(dataset.X[idx], dataset.y[idx])


class InputDistribution(str, enum.Enum):
    GAUSSIAN = "GAUSSIAN"
    UNIFORM = "UNIFORM"


@dataclass(frozen=True)
class SyntheticSpec:
    dim: int
    n_train: int
    n_test: int
    hyper: Hyperparameters
    input_distribution: InputDistribution = InputDistribution.GAUSSIAN
    input_scale: float = 1.0  # std for GAUSSIAN, half-width of the box for UNIFORM
    seed: int = 0

    def __post_init__(self):
        if self.dim < 1 or self.n_train < 1 or self.n_test < 1:
            raise ValueError("dim, n_train and n_test must be positive")
        object.__setattr__(self, "input_distribution", InputDistribution(str(getattr(self.input_distribution, "value", self.input_distribution)).upper()))


def _draw_latent(X, hyper, gen, jitter=JitterPolicy(1e-8, 10.0, 1e-2)) -> np.ndarray:
    K = kernel_matrix(X, X, hyper)
    L, _ = jittered_cholesky(K, jitter)
    return L @ gen.standard_normal(X.shape[0])


def sample_gp(spec: SyntheticSpec) -> tuple[Dataset, Dataset, Hyperparameters]:
    """One joint prior draw over train and test inputs, plus i.i.d. Gaussian noise."""
    gen = rng(spec.seed)
    n = spec.n_train + spec.n_test
    if spec.input_distribution is InputDistribution.GAUSSIAN:
        X = spec.input_scale * gen.standard_normal((n, spec.dim))
    else:
        X = gen.uniform(-spec.input_scale, spec.input_scale, size=(n, spec.dim))
    f = _draw_latent(X, spec.hyper, gen)
    y = f + np.sqrt(spec.hyper.noise_variance) * gen.standard_normal(n)
    tr = slice(0, spec.n_train)
    te = slice(spec.n_train, n)
    return Dataset(X[tr], y[tr]), Dataset(X[te], y[te]), spec.hyper


@dataclass(frozen=True)
class AffineTransform:
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float
    y_std: float

    def forward(self, dataset: Dataset) -> Dataset:
        return Dataset((dataset.X - self.x_mean) / self.x_std, (dataset.y - self.y_mean) / self.y_std)

    def inverse(self, dataset: Dataset) -> Dataset:
        return Dataset(dataset.X * self.x_std + self.x_mean, dataset.y * self.y_std + self.y_mean)

    def inputs(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.x_mean) / self.x_std

    def outputs_back(self, y) -> np.ndarray:
        return np.asarray(y) * self.y_std + self.y_mean

    def variance_back(self, v) -> np.ndarray:
        return np.asarray(v) * self.y_std**2


def standardize(dataset: Dataset) -> tuple[Dataset, AffineTransform]:
    """Shift and scale every input column and the target to zero mean, unit population variance."""
    x_mean = dataset.X.mean(0)
    x_std = dataset.X.std(0)
    y_mean = float(dataset.y.mean())
    y_std = float(dataset.y.std())
    for j, s in enumerate(x_std):
        if not s > 0:
            raise DataError(f"input column {j} has zero variance")
    if not y_std > 0:
        raise DataError("target column has zero variance")
    t = AffineTransform(x_mean, x_std, y_mean, y_std)
    return t.forward(dataset), t
