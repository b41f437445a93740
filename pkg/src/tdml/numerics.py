"""Shared float64 matrix kernels.

All public functions compute in 64-bit regardless of input dtype and raise
:class:`~tdml.errors.InvalidArgumentError` instead of guessing on bad input.
Distances use direct row differences (never the expanded norm identity), so
the diagonal of a self-distance matrix is exactly zero and the matrix is
exactly symmetric.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DegenerateInputError, InvalidArgumentError

# Row norms at or below this are treated as zero when normalizing.
NORM_EPS = 1e-12


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce ``x`` to a non-empty 2-D float64 array with finite entries."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise InvalidArgumentError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.size == 0:
        raise InvalidArgumentError(f"{name} must be non-empty")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError(f"{name} contains non-finite entries")
    return arr


def pairwise_sq_dist(x) -> np.ndarray:
    """Squared Euclidean distances between all row pairs of ``x``.

    Returns an (n, n) matrix with an exactly-zero diagonal. Rows are
    processed one at a time so no (n, n, d) intermediate is ever built.
    """
    arr = as_matrix(x, "x")
    n = arr.shape[0]
    out = np.empty((n, n), dtype=np.float64)
    for i in range(n):
        diff = arr - arr[i]
        out[i] = np.einsum("jk,jk->j", diff, diff)
        out[i, i] = 0.0
    # Row-difference squares cannot go negative, but keep the guard cheap
    # and explicit in case a caller feeds in subnormal garbage.
    np.maximum(out, 0.0, out=out)
    # d(i,j) and d(j,i) come from the same |x_i - x_j| entries summed in the
    # same index order, so mirroring the upper triangle costs nothing and
    # makes symmetry exact by construction.
    iu = np.triu_indices(n, k=1)
    out[(iu[1], iu[0])] = out[iu]
    return out


def sq_dist_to(x, q) -> np.ndarray:
    """Squared Euclidean distance from every row of ``x`` to vector ``q``."""
    arr = as_matrix(x, "x")
    qv = np.asarray(q, dtype=np.float64)
    if qv.ndim != 1 or qv.shape[0] != arr.shape[1]:
        raise InvalidArgumentError(
            f"query must be 1-D of length {arr.shape[1]}, got shape {qv.shape}"
        )
    if not np.all(np.isfinite(qv)):
        raise InvalidArgumentError("query contains non-finite entries")
    diff = arr - qv
    return np.einsum("jk,jk->j", diff, diff)


def l2_normalize_rows(x) -> np.ndarray:
    """Scale every row of ``x`` to unit Euclidean norm.

    Raises DegenerateInputError naming the first offending row index if a
    row norm is at or below ``NORM_EPS``.
    """
    arr = as_matrix(x, "x")
    norms = np.sqrt(np.einsum("ij,ij->i", arr, arr))
    bad = np.flatnonzero(norms <= NORM_EPS)
    if bad.size:
        raise DegenerateInputError(
            f"row {int(bad[0])} has near-zero norm ({norms[bad[0]]:.3e}); cannot normalize"
        )
    return arr / norms[:, None]


def sym_eig(a, *, sweep_limit: int = 100, off_diag_tol: float = 1e-12):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns ``(eigenvalues, eigenvectors)`` with eigenvalues sorted in
    descending order and eigenvectors as the corresponding columns of an
    orthonormal matrix V, so ``a @ V = V @ diag(eigenvalues)``.

    Sweeps stop once the off-diagonal Frobenius norm drops to
    ``off_diag_tol`` relative to ||a||_F, or after ``sweep_limit`` sweeps.
    """
    arr = as_matrix(a, "a")
    d = arr.shape[0]
    if arr.shape[1] != d:
        raise InvalidArgumentError(f"matrix must be square, got shape {arr.shape}")
    scale = float(np.abs(arr).max())
    if float(np.abs(arr - arr.T).max()) > 1e-9 * max(1.0, scale):
        raise InvalidArgumentError("matrix is not symmetric within 1e-9")

    b = (arr + arr.T) / 2.0
    v = np.eye(d)
    fro = float(np.linalg.norm(b))
    if d == 1 or fro == 0.0:
        w = np.diag(b).copy()
        order = np.argsort(-w, kind="stable")
        return w[order], v[:, order]

    for _ in range(sweep_limit):
        off = math.sqrt(max(float(np.sum(b * b) - np.sum(np.diag(b) ** 2)), 0.0))
        if off <= off_diag_tol * fro:
            break
        for p in range(d - 1):
            for q in range(p + 1, d):
                apq = float(b[p, q])
                if apq == 0.0:
                    continue
                # Pick the smaller-angle root of t^2 + 2*tau*t - 1 = 0; an
                # overflowing tau degrades to t = 0 (a harmless no-op).
                tau = (float(b[q, q]) - float(b[p, p])) / (2.0 * apq)
                if tau >= 0.0:
                    t = 1.0 / (tau + math.sqrt(1.0 + tau * tau))
                else:
                    t = -1.0 / (-tau + math.sqrt(1.0 + tau * tau))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = t * c

                bp = b[:, p].copy()
                bq = b[:, q].copy()
                b[:, p] = c * bp - s * bq
                b[:, q] = s * bp + c * bq
                bp = b[p, :].copy()
                bq = b[q, :].copy()
                b[p, :] = c * bp - s * bq
                b[q, :] = s * bp + c * bq
                b[p, q] = 0.0
                b[q, p] = 0.0

                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq

    w = np.diag(b).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], v[:, order]
