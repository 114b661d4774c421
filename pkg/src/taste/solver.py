"""Alternating block updates for the coupled nonnegative factorization.

The objective being minimized is

    sum_k 1/2 ||X_k - U_k S_k V^T||_F^2          (temporal fit)
  + lam/2   ||A - W F^T||_F^2                    (static fit, W(k,:) = diag(S_k))
  + sum_k mu/2 ||U_k - Q_k H||_F^2               (uniqueness pull, Q_k^T Q_k = I)

subject to U_k, S_k, V, F >= 0.  One sweep updates the blocks in the fixed
order Q -> H -> U -> V -> W -> F.  Every block subproblem is solved exactly
(orthogonal Procrustes for Q, a weighted average for H, normal-form NNLS for
the rest), so the objective never increases.  All nonnegative updates avoid
forming stacked designs: each is expressed as a Gram/cross pair fed to the
shared pivoting kernel, with the Khatri-Rao product of the W step collapsed
to ``(V^T V) * (U_k^T U_k)`` and ``diag(U_k^T X_k V)``.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data_model import (
    FactorSet,
    FitReport,
    Hyperparams,
    IrregularTensor,
    StaticMatrix,
    SweepRecord,
)
from .errors import MetricError, SolverError
from .metrics import cpi as cpi_metric
from .metrics import reconstruct_slice
from .nnls import NnlsNormalForm, nnls_solve

OBJECTIVE_EPS = 1e-12
RANK_DEFICIENCY_RTOL = 1e-12


def ordered_map(fn, items, threads: int = 1) -> list:
    """Map preserving item order; thread count never changes the results."""
    if threads <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# Objective
# ---------------------------------------------------------------------------


def objective(
    tensor: IrregularTensor,
    static: StaticMatrix,
    factors: FactorSet,
    hyperparams: Hyperparams,
) -> float:
    """Evaluate the full fitting objective at the given factors."""
    factors.check_against(tensor, static)
    if factors.rank != hyperparams.rank:
        raise SolverError(
            f"factors have rank {factors.rank}, hyperparams say {hyperparams.rank}"
        )
    total = 0.0
    for x, u_k, w_row in zip(tensor.slices, factors.u, factors.w):
        diff = x - reconstruct_slice(u_k, w_row, factors.v)
        total += 0.5 * float(np.dot(diff.ravel(), diff.ravel()))
    diff = static.values - factors.w @ factors.f.T
    total += 0.5 * hyperparams.lam * float(np.dot(diff.ravel(), diff.ravel()))
    if hyperparams.mu > 0:
        for q_k, u_k in zip(factors.q, factors.u):
            diff = u_k - q_k @ factors.h
            total += 0.5 * hyperparams.mu * float(np.dot(diff.ravel(), diff.ravel()))
    if not np.isfinite(total):
        raise SolverError(f"objective is not finite: {total}")
    return total


# ---------------------------------------------------------------------------
# Block updates
# ---------------------------------------------------------------------------


def _polar(m: np.ndarray) -> tuple[np.ndarray, bool]:
    """Orthonormal polar factor of a tall matrix, and a rank-deficiency flag.

    When singular values vanish the SVD still supplies deterministic
    orthonormal directions (ordered by singular-vector index), so the result
    stays orthonormal; the flag reports that the factor was not unique.
    """
    b, s, ct = np.linalg.svd(m, full_matrices=False)
    deficient = bool(s[-1] <= RANK_DEFICIENCY_RTOL * max(s[0], 1e-300))
    return b @ ct, deficient


def update_q(u_k: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Closest orthonormal-column matrix to ``U_k H^T`` (orthogonal Procrustes).

    Maximizes ``trace(Q^T U_k H^T)``; any positive scalar on ``U_k H^T``
    leaves the polar factor unchanged.
    """
    q, _ = _polar(u_k @ h.T)
    return q


def update_h(
    q_list, u_list, mu_weights, fallback: np.ndarray | None = None
) -> np.ndarray:
    """Weighted average ``sum_k mu_k Q_k^T U_k / sum_k mu_k``.

    Exact minimizer of ``sum_k mu_k/2 ||Q_k H - U_k||_F^2``.  With all
    weights zero the term is inactive: returns ``fallback`` when supplied,
    raises otherwise.
    """
    mu_weights = np.asarray(mu_weights, dtype=np.float64)
    total = float(mu_weights.sum())
    if total <= 0.0:
        if fallback is not None:
            return fallback
        raise SolverError("all uniqueness weights are zero; H is unconstrained")
    rank = q_list[0].shape[1]
    acc = np.zeros((rank, rank))
    for q_k, u_k, mu_k in zip(q_list, u_list, mu_weights):
        if mu_k:
            acc += mu_k * (q_k.T @ u_k)
    return acc / total


def _prepare_gram(gram: np.ndarray, ridge_log: list | None = None) -> np.ndarray:
    """Return a positive definite version of a PSD Gram matrix.

    Adds a ridge of ``1e-12 * trace / R`` (with a tiny absolute floor for the
    all-zero case) when a Cholesky probe fails, recording the event.
    """
    try:
        np.linalg.cholesky(gram)
        return gram
    except np.linalg.LinAlgError:
        pass
    eps = 1e-12 * float(np.trace(gram)) / gram.shape[0]
    if eps <= 0.0:
        eps = 1e-12
    if ridge_log is not None:
        ridge_log.append(eps)
    return gram + eps * np.eye(gram.shape[0])


def update_u(
    x_k: np.ndarray,
    v: np.ndarray,
    s_k: np.ndarray,
    q_k: np.ndarray,
    h: np.ndarray,
    mu: float,
    *,
    vtv: np.ndarray | None = None,
    ridge_log: list | None = None,
) -> np.ndarray:
    """Nonnegative update of one temporal evolution matrix ``U_k``.

    Each row solves the NNLS with stacked design ``[V diag(s_k); sqrt(mu) I]``
    and targets ``[X_k^T; sqrt(mu) H^T Q_k^T]``, carried out on the normal
    form ``gram = diag(s_k) V^T V diag(s_k) + mu I``,
    ``cross = diag(s_k) V^T X_k^T + mu H^T Q_k^T``.
    """
    if vtv is None:
        vtv = v.T @ v
    gram = vtv * np.outer(s_k, s_k)
    cross = (v.T @ x_k.T) * s_k[:, None]
    if mu > 0:
        gram = gram + mu * np.eye(gram.shape[0])
        cross = cross + mu * (h.T @ q_k.T)
    gram = _prepare_gram(gram, ridge_log)
    return nnls_solve(NnlsNormalForm(gram, cross)).T


def update_v(
    tensor: IrregularTensor,
    u_list,
    w: np.ndarray,
    *,
    utu_list=None,
    ridge_log: list | None = None,
) -> np.ndarray:
    """Nonnegative update of the temporal feature factor ``V``.

    Solves the NNLS with design ``[U_1 S_1; ...; U_K S_K]`` stacked over
    entities and targets ``[X_1; ...; X_K]``, via
    ``gram = sum_k S_k U_k^T U_k S_k`` and ``cross = sum_k S_k U_k^T X_k``
    accumulated in entity order.
    """
    rank = w.shape[1]
    gram = np.zeros((rank, rank))
    cross = np.zeros((rank, tensor.n_features))
    for k, (x, u_k) in enumerate(zip(tensor.slices, u_list)):
        w_row = w[k]
        utu = u_k.T @ u_k if utu_list is None else utu_list[k]
        gram += utu * np.outer(w_row, w_row)
        cross += (u_k.T @ x) * w_row[:, None]
    gram = _prepare_gram(gram, ridge_log)
    return nnls_solve(NnlsNormalForm(gram, cross)).T


def update_w_row(
    x_k: np.ndarray,
    u_k: np.ndarray,
    v: np.ndarray,
    f: np.ndarray,
    a_k: np.ndarray,
    lam: float,
    *,
    vtv: np.ndarray | None = None,
    utu: np.ndarray | None = None,
    ftf: np.ndarray | None = None,
    ridge_log: list | None = None,
) -> np.ndarray:
    """Nonnegative update of one entity's phenotype scores ``diag(S_k)``.

    The stacked design is ``[V (x) U_k; sqrt(lam) F]`` against targets
    ``[vec(X_k); sqrt(lam) a_k]``; the Khatri-Rao product is never formed:
    ``gram = (V^T V) * (U_k^T U_k) + lam F^T F`` and
    ``cross = diag(U_k^T X_k V) + lam F^T a_k``.
    """
    if vtv is None:
        vtv = v.T @ v
    if utu is None:
        utu = u_k.T @ u_k
    gram = vtv * utu
    cross = np.sum(u_k * (x_k @ v), axis=0)
    if lam > 0:
        if ftf is None:
            ftf = f.T @ f
        gram = gram + lam * ftf
        cross = cross + lam * (f.T @ a_k)
    gram = _prepare_gram(gram, ridge_log)
    return nnls_solve(NnlsNormalForm(gram, cross[:, None]))[:, 0]


def update_f(
    w: np.ndarray, a: np.ndarray, lam: float, *, ridge_log: list | None = None
) -> np.ndarray:
    """Nonnegative update of the static feature factor ``F``.

    Solves ``min ||W F^T - A||_F^2, F >= 0`` via ``gram = W^T W``,
    ``cross = W^T A``; the positive weight on the static term scales the
    subproblem without moving its minimizer.
    """
    if lam <= 0:
        raise SolverError("the static factor update requires lam > 0")
    gram = _prepare_gram(w.T @ w, ridge_log)
    return nnls_solve(NnlsNormalForm(gram, w.T @ a)).T


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


def init_factors(
    tensor: IrregularTensor,
    static: StaticMatrix,
    hyperparams: Hyperparams,
    rng: np.random.Generator | None = None,
) -> FactorSet:
    """Random starting point: uniform(0,1) nonnegative factors, orthonormal Q.

    Draw order is fixed (H, V, W, F, then per-entity U and Q), so a given
    seed always produces the same factors.
    """
    hyperparams.check_against(tensor)
    static.check_aligned(tensor)
    if rng is None:
        rng = np.random.default_rng(hyperparams.seed)
    rank = hyperparams.rank
    h = rng.random((rank, rank))
    v = rng.random((tensor.n_features, rank))
    w = rng.random((tensor.n_entities, rank))
    f = rng.random((static.n_static_features, rank))
    u = tuple(rng.random((n, rank)) for n in tensor.n_rows)
    q = tuple(
        np.linalg.qr(rng.standard_normal((n, rank)))[0] for n in tensor.n_rows
    )
    return FactorSet(
        q=q, h=h, u=u, w=w, v=v, f=f,
        lam=hyperparams.lam, mu=hyperparams.mu, entity_ids=tensor.entity_ids,
    )


# ---------------------------------------------------------------------------
# Sweep loop
# ---------------------------------------------------------------------------


@dataclass
class SweepState:
    """Mutable working state of a fit, with per-sweep Gram caches."""

    q: list
    h: np.ndarray
    u: list
    w: np.ndarray
    v: np.ndarray
    f: np.ndarray
    utu: list = field(default_factory=list)
    vtv: np.ndarray | None = None
    ftf: np.ndarray | None = None
    wtw: np.ndarray | None = None
    prev_objective: float = np.inf

    @classmethod
    def from_factors(cls, factors: FactorSet) -> "SweepState":
        state = cls(
            q=[np.array(m) for m in factors.q],
            h=np.array(factors.h),
            u=[np.array(m) for m in factors.u],
            w=np.array(factors.w),
            v=np.array(factors.v),
            f=np.array(factors.f),
        )
        state.refresh_caches()
        return state

    def refresh_caches(self) -> None:
        self.utu = [u_k.T @ u_k for u_k in self.u]
        self.vtv = self.v.T @ self.v
        self.ftf = self.f.T @ self.f
        self.wtw = self.w.T @ self.w

    def cache_gap(self) -> float:
        """Largest relative deviation between caches and fresh products."""
        gap = 0.0
        pairs = [(self.vtv, self.v.T @ self.v), (self.ftf, self.f.T @ self.f),
                 (self.wtw, self.w.T @ self.w)]
        pairs += [(c, u_k.T @ u_k) for c, u_k in zip(self.utu, self.u)]
        for cached, fresh in pairs:
            scale = max(float(np.max(np.abs(fresh))), 1e-300)
            gap = max(gap, float(np.max(np.abs(cached - fresh))) / scale)
        return gap

    def to_factors(self, lam: float, mu: float, entity_ids) -> FactorSet:
        return FactorSet(
            q=tuple(self.q), h=self.h, u=tuple(self.u), w=self.w,
            v=self.v, f=self.f, lam=lam, mu=mu, entity_ids=entity_ids,
        )


def fit(
    tensor: IrregularTensor,
    static: StaticMatrix,
    hyperparams: Hyperparams,
    init: FactorSet | None = None,
    threads: int = 1,
) -> tuple[FactorSet, FitReport]:
    """Run block coordinate descent sweeps until the objective stalls.

    Stops when the relative objective change drops below ``hyperparams.tol``
    or after ``max_sweeps``.  Per-entity blocks (Q, U, W rows) may be
    evaluated on a thread pool; reductions always accumulate in entity
    order, so any thread count gives bitwise-identical results.
    """
    static.check_aligned(tensor)
    hyperparams.check_against(tensor)
    if init is None:
        init = init_factors(tensor, static, hyperparams)
    else:
        init.check_against(tensor, static)
        if init.rank != hyperparams.rank:
            raise SolverError(
                f"init factors have rank {init.rank}, hyperparams say {hyperparams.rank}"
            )

    state = SweepState.from_factors(init)
    report = FitReport()
    lam, mu = hyperparams.lam, hyperparams.mu
    a = static.values
    denom = tensor.total_entries() + a.size
    ks = range(tensor.n_entities)

    for sweep in range(1, hyperparams.max_sweeps + 1):
        t0 = time.perf_counter()
        ridge_log: list = []

        if mu > 0:
            polars = ordered_map(
                lambda k: _polar(state.u[k] @ state.h.T), ks, threads
            )
            for k, (q_k, deficient) in enumerate(polars):
                state.q[k] = q_k
                report.rank_warnings += int(deficient)
            state.h = update_h(state.q, state.u, np.full(tensor.n_entities, mu))

        new_us = ordered_map(
            lambda k: update_u(
                tensor.slices[k], state.v, state.w[k], state.q[k], state.h,
                mu, vtv=state.vtv, ridge_log=ridge_log,
            ),
            ks, threads,
        )
        state.u = list(new_us)
        state.utu = [u_k.T @ u_k for u_k in state.u]

        state.v = update_v(
            tensor, state.u, state.w, utu_list=state.utu, ridge_log=ridge_log
        )
        state.vtv = state.v.T @ state.v

        new_rows = ordered_map(
            lambda k: update_w_row(
                tensor.slices[k], state.u[k], state.v, state.f, a[k], lam,
                vtv=state.vtv, utu=state.utu[k], ftf=state.ftf,
                ridge_log=ridge_log,
            ),
            ks, threads,
        )
        state.w = np.vstack(new_rows)
        state.wtw = state.w.T @ state.w

        if lam > 0:
            state.f = update_f(state.w, a, lam, ridge_log=ridge_log)
            state.ftf = state.f.T @ state.f

        report.ridge_events += len(ridge_log)

        tensor_sq = 0.0
        for k in ks:
            diff = tensor.slices[k] - reconstruct_slice(state.u[k], state.w[k], state.v)
            tensor_sq += float(np.dot(diff.ravel(), diff.ravel()))
        diff = a - state.w @ state.f.T
        static_sq = float(np.dot(diff.ravel(), diff.ravel()))
        unique_sq = 0.0
        if mu > 0:
            for k in ks:
                diff = state.u[k] - state.q[k] @ state.h
                unique_sq += float(np.dot(diff.ravel(), diff.ravel()))
        obj = 0.5 * tensor_sq + 0.5 * lam * static_sq + 0.5 * mu * unique_sq
        if not np.isfinite(obj):
            raise SolverError(
                f"objective became non-finite at sweep {sweep}; "
                "check the inputs for extreme scales"
            )
        sweep_rmse = float(np.sqrt((tensor_sq + 0.5 * lam * static_sq) / denom))
        hth = state.h.T @ state.h
        ref = float(np.dot(hth.ravel(), hth.ravel()))
        if ref > 0:
            num = sum(
                float(np.dot((g - hth).ravel(), (g - hth).ravel()))
                for g in state.utu
            )
            sweep_cpi = 1.0 - num / (tensor.n_entities * ref)
        else:
            sweep_cpi = float("nan")
        report.records.append(
            SweepRecord(sweep, obj, sweep_rmse, sweep_cpi, time.perf_counter() - t0)
        )

        prev = state.prev_objective
        state.prev_objective = obj
        if prev is not np.inf and np.isfinite(prev):
            if abs(prev - obj) / max(prev, OBJECTIVE_EPS) < hyperparams.tol:
                report.termination = "converged"
                break
    else:
        report.termination = "sweep-cap"
    if report.termination == "error":
        report.termination = "converged"

    factors = state.to_factors(lam, mu, tensor.entity_ids)
    return factors, report
