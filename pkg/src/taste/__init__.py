"""Joint nonnegative factorization of irregular temporal matrices with static side information.

An ordered collection of nonnegative matrices ``X_k`` (one per entity, with
varying row counts but a shared feature axis) is factorized together with a
static entity-by-feature matrix ``A`` into shared low-rank factors.  Each
slice is modeled as ``U_k S_k V^T`` with ``U_k`` tied to an orthonormal
``Q_k H`` to promote a unique, interpretable solution, while ``A`` is
modeled as ``W F^T`` with ``W(k, :) = diag(S_k)`` shared across both parts.
"""

from .data_model import (
    FactorSet,
    FitReport,
    Hyperparams,
    IrregularTensor,
    StaticMatrix,
    load_dataset,
    load_factors,
    save_dataset,
    save_factors,
)
from .errors import DataError, MetricError, NnlsError, SolverError, TasteError
from .solver import fit, init_factors, objective
from .baseline import fit_copa_plus
from .projection import project
from .metrics import cpi, factor_similarity, rmse, stability_dissimilarity
from .synthetic import SynthConfig, add_noise, generate

__version__ = "0.1.0"

__all__ = [
    "DataError",
    "FactorSet",
    "FitReport",
    "Hyperparams",
    "IrregularTensor",
    "MetricError",
    "NnlsError",
    "SolverError",
    "StaticMatrix",
    "SynthConfig",
    "TasteError",
    "add_noise",
    "cpi",
    "factor_similarity",
    "fit",
    "fit_copa_plus",
    "generate",
    "init_factors",
    "load_dataset",
    "load_factors",
    "objective",
    "project",
    "rmse",
    "save_dataset",
    "save_factors",
    "stability_dissimilarity",
]
