"""Sparse Gaussian-process regression: exact GP, FITC, VFE and DTC under one objective."""

__version__ = "0.1.0"

from .kernels import Hyperparameters, JitterPolicy, NotPositiveDefiniteError  # noqa: E402
from .models import Dataset, Method, NlmlBreakdown, PredictiveDistribution, SparseModel  # noqa: E402
