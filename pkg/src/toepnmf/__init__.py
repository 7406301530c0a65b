"""Factorize HRIR collections into a shared resonance filter and sparse
per-direction reflection filters, then render signals through the result."""

__version__ = "0.1.0"

from .errors import DataError, NumericalError, ToepnmfError
from .hrir_io import HrirBundle, Signal, load_bundle, preprocess, save_bundle
from .metrics import evaluate, rmse, spectral_distortion
from .seminmf import FactorizedModel, factorize, load_model, save_model, train
from .sparsify import ResidualTransform, SparseFilter, l1_nnls, sparsify_model, tune_sigma

__all__ = [
    "DataError",
    "NumericalError",
    "ToepnmfError",
    "HrirBundle",
    "Signal",
    "load_bundle",
    "save_bundle",
    "preprocess",
    "FactorizedModel",
    "factorize",
    "train",
    "save_model",
    "load_model",
    "ResidualTransform",
    "SparseFilter",
    "l1_nnls",
    "sparsify_model",
    "tune_sigma",
    "evaluate",
    "rmse",
    "spectral_distortion",
    "__version__",
]
