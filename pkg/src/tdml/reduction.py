"""PCA fitting and projection for embedding dimension reduction.

The covariance eigenproblem is solved with the in-house Jacobi routine, so
results are identical across BLAS builds. Component signs are fixed by
making each component's largest-magnitude entry positive, which removes
the sign ambiguity of eigenvectors and keeps fits reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError
from .numerics import as_matrix, l2_normalize_rows, sym_eig


@dataclass(frozen=True)
class PcaModel:
    """Fitted projection: y = components @ (x - mean)."""

    mean: np.ndarray          # (d,)
    components: np.ndarray    # (k, d), orthonormal rows, descending variance
    eigenvalues: np.ndarray   # (k,), non-negative, descending

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        comps = np.asarray(self.components, dtype=np.float64)
        eigs = np.asarray(self.eigenvalues, dtype=np.float64)
        if mean.ndim != 1 or comps.ndim != 2 or comps.shape[1] != mean.shape[0]:
            raise InvalidArgumentError(
                f"inconsistent PCA shapes: mean {mean.shape}, components {comps.shape}"
            )
        if eigs.shape != (comps.shape[0],):
            raise InvalidArgumentError(
                f"expected {comps.shape[0]} eigenvalues, got shape {eigs.shape}"
            )
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "eigenvalues", eigs)

    @property
    def input_dim(self) -> int:
        return self.mean.shape[0]

    @property
    def output_dim(self) -> int:
        return self.components.shape[0]


def pca_fit(embeddings, k: int) -> PcaModel:
    """Fit a k-component PCA on rows of ``embeddings``.

    Requires n >= 2 rows and 1 <= k <= min(n - 1, d); with fewer rows than
    that the top-k subspace is not determined by the data.
    """
    x = as_matrix(embeddings, "embeddings")
    n, d = x.shape
    if n < 2:
        raise InvalidArgumentError(f"PCA needs at least 2 rows, got {n}")
    k_max = min(n - 1, d)
    if not 1 <= k <= k_max:
        raise InvalidArgumentError(
            f"k must satisfy 1 <= k <= min(n-1, d) = {k_max}, got {k}"
        )
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (n - 1)
    cov = (cov + cov.T) / 2.0
    eigenvalues, eigenvectors = sym_eig(cov)
    comps = eigenvectors[:, :k].T.copy()
    # Covariance is PSD; tiny negative eigenvalues are rounding noise.
    eigs = np.maximum(eigenvalues[:k], 0.0)
    for row in comps:
        j = int(np.argmax(np.abs(row)))
        if row[j] < 0:
            np.negative(row, out=row)
    return PcaModel(mean=mean, components=comps, eigenvalues=eigs)


def pca_transform(model: PcaModel, embeddings, renormalize: bool = True) -> np.ndarray:
    """Project rows onto the fitted components, optionally re-unit-normalized."""
    x = as_matrix(embeddings, "embeddings")
    if x.shape[1] != model.input_dim:
        raise InvalidArgumentError(
            f"embeddings have dim {x.shape[1]}, PCA model expects {model.input_dim}"
        )
    y = (x - model.mean) @ model.components.T
    if renormalize:
        y = l2_normalize_rows(y)
    return y
