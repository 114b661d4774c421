"""Nonnegativity-constrained least squares on normal-equation form.

Every nonnegative factor update in the package funnels through
:func:`nnls_solve`, which runs block principal pivoting on ``(gram, cross)``
pairs.  A compiled kernel is preferred when the extension built; otherwise
the pure-NumPy twin is used.  Both implement identical pivoting rules.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _bpp_numpy
from .errors import NnlsError

try:
    from . import _bpp as _kernel
except ImportError:  # extension not built; fall back
    _kernel = _bpp_numpy

#: Name of the kernel backend selected at import ("compiled" or "numpy").
BACKEND: str = _kernel.BACKEND

SYMMETRY_TOL = 1e-12


def default_kkt_tol(gram: np.ndarray) -> float:
    """Scale-relative optimality tolerance for a given Gram matrix."""
    return 1e-10 * (1.0 + float(np.max(np.abs(gram), initial=0.0)))


@dataclass(frozen=True)
class NnlsNormalForm:
    """One NNLS problem batch in normal-equation form.

    ``gram`` is the R x R matrix ``B^T B`` (plus any additive regularizers)
    and ``cross`` the R x N matrix ``B^T A``; each of the N columns is an
    independent instance of ``min ||B c - a||^2, c >= 0``.
    """

    gram: np.ndarray
    cross: np.ndarray

    def __post_init__(self):
        gram = np.ascontiguousarray(np.asarray(self.gram, dtype=np.float64))
        cross = np.asarray(self.cross, dtype=np.float64)
        if cross.ndim == 1:
            cross = cross[:, None]
        cross = np.ascontiguousarray(cross)
        if gram.ndim != 2 or gram.shape[0] != gram.shape[1]:
            raise NnlsError(f"gram must be square, got shape {gram.shape}")
        if cross.ndim != 2 or cross.shape[0] != gram.shape[0]:
            raise NnlsError(
                f"cross shape {cross.shape} does not match gram of order {gram.shape[0]}"
            )
        if not np.isfinite(gram).all() or not np.isfinite(cross).all():
            raise NnlsError("non-finite values in NNLS input")
        scale = 1.0 + float(np.max(np.abs(gram), initial=0.0))
        if np.max(np.abs(gram - gram.T), initial=0.0) > SYMMETRY_TOL * scale:
            raise NnlsError("gram matrix is not symmetric")
        object.__setattr__(self, "gram", gram)
        object.__setattr__(self, "cross", cross)

    @property
    def order(self) -> int:
        return self.gram.shape[0]

    @property
    def n_columns(self) -> int:
        return self.cross.shape[1]


def nnls_solve(problem: NnlsNormalForm, kkt_tol: float | None = None) -> np.ndarray:
    """Solve every column of a normal-form NNLS batch.

    Returns the R x N matrix ``X >= 0`` whose columns satisfy the KKT
    conditions at ``kkt_tol``: for ``y = gram @ x - cross[:, col]``,
    ``y_i >= -kkt_tol`` wherever ``x_i == 0`` and ``|x_i * y_i| <= kkt_tol``
    everywhere.  The caller is responsible for a positive definite ``gram``
    (adding a ridge when needed); ill-conditioning surfaces as
    :class:`~taste.errors.NnlsError`.
    """
    if kkt_tol is None:
        kkt_tol = default_kkt_tol(problem.gram)
    if not np.isfinite(kkt_tol) or kkt_tol <= 0:
        raise NnlsError(f"kkt_tol must be positive and finite, got {kkt_tol}")
    return _kernel.solve_bpp(problem.gram, problem.cross, kkt_tol)


def nnls_from_design(
    design: np.ndarray, targets: np.ndarray, kkt_tol: float | None = None
) -> np.ndarray:
    """Solve ``min ||design @ X - targets||_F^2, X >= 0`` column by column.

    Equivalent to :func:`nnls_solve` on ``(design^T design, design^T targets)``.
    """
    design = np.asarray(design, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if design.ndim != 2 or design.shape[0] < 1:
        raise NnlsError(f"design must be a nonempty 2-d matrix, got shape {design.shape}")
    if targets.ndim == 1:
        targets = targets[:, None]
    if targets.shape[0] != design.shape[0]:
        raise NnlsError(
            f"targets have {targets.shape[0]} rows, design has {design.shape[0]}"
        )
    problem = NnlsNormalForm(design.T @ design, design.T @ targets)
    return nnls_solve(problem, kkt_tol)
