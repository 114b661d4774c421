"""Block principal pivoting NNLS kernel, pure NumPy backend.

Solves, column by column, ``min_x 0.5 x^T G x - c^T x  s.t. x >= 0`` for a
shared symmetric positive definite Gram matrix ``G`` (R x R) and a matrix of
cross terms ``c`` (R x N).  Columns are independent; they are processed
together, grouped by identical passive sets so each group costs a single
linear solve.  The grouping is a pure function of the inputs, so results do
not depend on how columns are batched.

The pivoting strategy: start with every variable passive (the unconstrained
solve), exchange the full infeasible set each iteration, and when the
infeasible count fails to shrink for three consecutive full exchanges fall
back to exchanging only the largest-index infeasible variable until the
count drops again.
"""

import numpy as np

from .errors import NnlsError

FULL_EXCHANGE_SLACK = 3
BACKUP_ITERATION_FACTOR = 5

BACKEND = "numpy"


def solve_bpp(gram: np.ndarray, cross: np.ndarray, kkt_tol: float) -> np.ndarray:
    """Return the R x N nonnegative solution matrix for the normal-form NNLS."""
    n_vars, n_cols = cross.shape
    x = np.zeros((n_vars, n_cols))
    y = np.zeros((n_vars, n_cols))
    passive = np.ones((n_vars, n_cols), dtype=bool)

    slack = np.full(n_cols, FULL_EXCHANGE_SLACK, dtype=np.int64)
    best = np.full(n_cols, n_vars + 1, dtype=np.int64)
    # -1 until the backup rule engages for a column; afterwards counts every
    # further pivoting iteration of that column.
    backup = np.full(n_cols, -1, dtype=np.int64)
    max_backup = BACKUP_ITERATION_FACTOR * n_vars

    live = np.arange(n_cols)
    while live.size:
        _solve_passive_groups(gram, cross, passive, x, y, live)

        is_live = np.zeros(n_cols, dtype=bool)
        is_live[live] = True
        infeasible = is_live & ((passive & (x < -kkt_tol)) | (~passive & (y < -kkt_tol)))
        counts = infeasible.sum(axis=0)

        finished = live[counts[live] == 0]
        if finished.size:
            x[:, finished] = np.maximum(x[:, finished], 0.0)
            live = live[counts[live] > 0]
            if not live.size:
                break

        engaged = backup[live] >= 0
        backup[live[engaged]] += 1
        if np.any(backup[live] > max_backup):
            raise NnlsError(
                "block pivoting failed to terminate within "
                f"{max_backup} iterations after the backup rule engaged; "
                "the Gram matrix is likely ill-conditioned"
            )

        improved = counts[live] < best[live]
        cols = live[improved]
        best[cols] = counts[cols]
        slack[cols] = FULL_EXCHANGE_SLACK

        retry = live[~improved & (slack[live] > 0)]
        slack[retry] -= 1

        full_cols = np.concatenate([cols, retry])
        if full_cols.size:
            passive[:, full_cols] ^= infeasible[:, full_cols]

        single_cols = live[~improved & (slack[live] <= 0)]
        for col in single_cols:
            if backup[col] < 0:
                backup[col] = 0
            idx = np.flatnonzero(infeasible[:, col])[-1]
            passive[idx, col] = not passive[idx, col]

    return x


def _solve_passive_groups(gram, cross, passive, x, y, live):
    """Solve the passive subsystems of the live columns, grouped by pattern."""
    patterns = passive[:, live]
    _, first, inverse = np.unique(
        patterns, axis=1, return_index=True, return_inverse=True
    )
    inverse = inverse.ravel()
    for g, rep in enumerate(first):
        cols = live[inverse == g]
        p_idx = np.flatnonzero(patterns[:, rep])
        a_idx = np.flatnonzero(~patterns[:, rep])
        if p_idx.size == 0:
            x[:, cols] = 0.0
            y[np.ix_(a_idx, cols)] = -cross[np.ix_(a_idx, cols)]
            continue
        sub = gram[np.ix_(p_idx, p_idx)]
        rhs = cross[np.ix_(p_idx, cols)]
        try:
            sol = np.linalg.solve(sub, rhs)
        except np.linalg.LinAlgError as exc:
            raise NnlsError(
                "singular passive subsystem during block pivoting; "
                "the Gram matrix is not positive definite"
            ) from exc
        x[np.ix_(p_idx, cols)] = sol
        x[np.ix_(a_idx, cols)] = 0.0
        y[np.ix_(p_idx, cols)] = 0.0
        if a_idx.size:
            y[np.ix_(a_idx, cols)] = (
                gram[np.ix_(a_idx, p_idx)] @ sol - cross[np.ix_(a_idx, cols)]
            )
