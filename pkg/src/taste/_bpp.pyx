# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Block principal pivoting NNLS kernel, compiled backend.

Same contract and pivoting rules as ``_bpp_numpy.solve_bpp``: shared SPD
Gram matrix, independent columns, all-passive start, full exchanges with a
three-strike fallback to single-variable exchanges.  Columns are processed
one at a time with an in-place Cholesky solve of the passive subsystem.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport sqrt

from .errors import NnlsError

cnp.import_array()

FULL_EXCHANGE_SLACK = 3
BACKUP_ITERATION_FACTOR = 5

BACKEND = "compiled"


def solve_bpp(double[:, ::1] gram, double[:, ::1] cross, double kkt_tol):
    """Return the R x N nonnegative solution matrix for the normal-form NNLS."""
    cdef Py_ssize_t n_vars = gram.shape[0]
    cdef Py_ssize_t n_cols = cross.shape[1]
    out = np.zeros((n_vars, n_cols))
    cdef double[:, ::1] x = out

    chol_arr = np.empty((n_vars, n_vars))
    rhs_arr = np.empty(n_vars)
    xcol_arr = np.empty(n_vars)
    ycol_arr = np.empty(n_vars)
    pidx_arr = np.empty(n_vars, dtype=np.intp)
    passive_arr = np.empty(n_vars, dtype=np.uint8)
    infeas_arr = np.empty(n_vars, dtype=np.uint8)

    cdef double[:, ::1] chol = chol_arr
    cdef double[::1] rhs = rhs_arr
    cdef double[::1] xcol = xcol_arr
    cdef double[::1] ycol = ycol_arr
    cdef Py_ssize_t[::1] pidx = pidx_arr
    cdef unsigned char[::1] passive = passive_arr
    cdef unsigned char[::1] infeas = infeas_arr

    cdef Py_ssize_t col, i, j, a, b, p, n_inf, last_inf
    cdef long slack, best, backup, max_backup
    cdef double acc, pivot
    max_backup = 5 * n_vars

    for col in range(n_cols):
        for i in range(n_vars):
            passive[i] = 1
        slack = 3
        best = n_vars + 1
        backup = -1

        while True:
            p = 0
            for i in range(n_vars):
                if passive[i]:
                    pidx[p] = i
                    p += 1

            if p > 0:
                # Pack the passive subsystem (lower triangle) and factorize.
                for a in range(p):
                    for b in range(a + 1):
                        chol[a, b] = gram[pidx[a], pidx[b]]
                    rhs[a] = cross[pidx[a], col]
                for j in range(p):
                    acc = chol[j, j]
                    for b in range(j):
                        acc -= chol[j, b] * chol[j, b]
                    if acc <= 0.0:
                        raise NnlsError(
                            "nonpositive pivot in the passive subsystem; "
                            "the Gram matrix is not positive definite"
                        )
                    pivot = sqrt(acc)
                    chol[j, j] = pivot
                    for a in range(j + 1, p):
                        acc = chol[a, j]
                        for b in range(j):
                            acc -= chol[a, b] * chol[j, b]
                        chol[a, j] = acc / pivot
                # Forward then backward substitution, in place on rhs.
                for a in range(p):
                    acc = rhs[a]
                    for b in range(a):
                        acc -= chol[a, b] * rhs[b]
                    rhs[a] = acc / chol[a, a]
                for a in range(p - 1, -1, -1):
                    acc = rhs[a]
                    for b in range(a + 1, p):
                        acc -= chol[b, a] * rhs[b]
                    rhs[a] = acc / chol[a, a]

            for i in range(n_vars):
                xcol[i] = 0.0
            for a in range(p):
                xcol[pidx[a]] = rhs[a]
            for i in range(n_vars):
                if passive[i]:
                    ycol[i] = 0.0
                else:
                    acc = -cross[i, col]
                    for a in range(p):
                        acc += gram[i, pidx[a]] * rhs[a]
                    ycol[i] = acc

            n_inf = 0
            last_inf = -1
            for i in range(n_vars):
                if passive[i]:
                    infeas[i] = xcol[i] < -kkt_tol
                else:
                    infeas[i] = ycol[i] < -kkt_tol
                if infeas[i]:
                    n_inf += 1
                    last_inf = i

            if n_inf == 0:
                for i in range(n_vars):
                    x[i, col] = xcol[i] if xcol[i] > 0.0 else 0.0
                break

            if backup >= 0:
                backup += 1
                if backup > max_backup:
                    raise NnlsError(
                        "block pivoting failed to terminate within "
                        f"{max_backup} iterations after the backup rule "
                        "engaged; the Gram matrix is likely ill-conditioned"
                    )

            if n_inf < best:
                best = n_inf
                slack = 3
                for i in range(n_vars):
                    if infeas[i]:
                        passive[i] = not passive[i]
            elif slack > 0:
                slack -= 1
                for i in range(n_vars):
                    if infeas[i]:
                        passive[i] = not passive[i]
            else:
                if backup < 0:
                    backup = 0
                passive[last_inf] = not passive[last_inf]

    return out
