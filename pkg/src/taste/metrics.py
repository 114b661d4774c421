"""Evaluation metrics: RMSE, cross-product invariance, factor similarity, stability."""

from __future__ import annotations

import numpy as np

from .data_model import FactorSet, IrregularTensor, StaticMatrix
from .errors import MetricError


def reconstruct_slice(u_k: np.ndarray, w_row: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Dense model reconstruction ``U_k S_k V^T`` of one slice."""
    return u_k @ (v * w_row).T


def residual_sums(
    tensor: IrregularTensor, static: StaticMatrix, factors: FactorSet
) -> tuple[float, float]:
    """Squared Frobenius residuals of the temporal and static reconstructions."""
    factors.check_against(tensor, static)
    tensor_sq = 0.0
    for x, u_k, w_row in zip(tensor.slices, factors.u, factors.w):
        diff = x - reconstruct_slice(u_k, w_row, factors.v)
        tensor_sq += float(np.dot(diff.ravel(), diff.ravel()))
    diff = static.values - factors.w @ factors.f.T
    static_sq = float(np.dot(diff.ravel(), diff.ravel()))
    return tensor_sq, static_sq


def rmse(
    tensor: IrregularTensor,
    static: StaticMatrix,
    factors: FactorSet,
    lam: float,
    weighted: bool = True,
) -> float:
    """Root mean square reconstruction error over both inputs.

    The static residual enters the numerator with weight ``lam / 2`` (the
    weight it carries in the fitting objective); the denominator counts all
    ``sum_k I_k * J + K * P`` cells either way.  ``weighted=False`` drops the
    weight for a plain pooled residual, useful for diagnostics.
    """
    tensor_sq, static_sq = residual_sums(tensor, static, factors)
    static_weight = 0.5 * lam if weighted else 1.0
    denom = tensor.total_entries() + static.values.size
    return float(np.sqrt((tensor_sq + static_weight * static_sq) / denom))


def cpi(factors: FactorSet) -> float:
    """Cross-product invariance: 1 when every ``U_k^T U_k`` equals ``H^T H``.

    Ranges over ``(-inf, 1]``; values near 1 indicate the uniqueness-promoting
    constraint is preserved.
    """
    hth = factors.h.T @ factors.h
    ref = float(np.dot(hth.ravel(), hth.ravel()))
    if ref == 0.0:
        raise MetricError("cross-product invariance is undefined for H = 0")
    num = 0.0
    for u_k in factors.u:
        diff = u_k.T @ u_k - hth
        num += float(np.dot(diff.ravel(), diff.ravel()))
    return 1.0 - num / (len(factors.u) * ref)


def _cosine_cross(x: np.ndarray, y: np.ndarray, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise MetricError(
            f"{what}: arguments must share the row dimension, got {x.shape} and {y.shape}"
        )
    xn = np.linalg.norm(x, axis=0)
    yn = np.linalg.norm(y, axis=0)
    if (xn == 0).any() or (yn == 0).any():
        raise MetricError(f"{what}: zero column in input")
    return (x / xn).T @ (y / yn)


def factor_similarity(x: np.ndarray, y: np.ndarray) -> float:
    """Permutation-tolerant cosine similarity between two factor matrices.

    For each column of ``x`` take the best cosine match among columns of
    ``y`` and average.  1 means every column has an exact (scaled) match.
    """
    c = _cosine_cross(x, y, "factor similarity")
    return float(np.mean(np.max(c, axis=1)))


def stability_dissimilarity(v: np.ndarray, v_other: np.ndarray) -> float:
    """Symmetric dissimilarity between factor matrices from different runs.

    ``(2R - sum_i max_j C_ij - sum_j max_i C_ij) / (2R)`` for the cosine
    cross-correlation ``C``; 0 for matching (up to permutation and positive
    scale) factors, approaching 1 for orthogonal ones.
    """
    c = _cosine_cross(v, v_other, "stability dissimilarity")
    r = c.shape[0]
    if c.shape[1] != r:
        raise MetricError(
            f"stability dissimilarity needs equal column counts, got {c.shape}"
        )
    return float((2 * r - np.max(c, axis=1).sum() - np.max(c, axis=0).sum()) / (2 * r))
