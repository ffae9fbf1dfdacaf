"""Weighted PCA core shared by the shape model and the image PCA model."""
from __future__ import annotations

import numpy as np

from .exceptions import InsufficientSamples, NonpositiveWeights

NOISE_FLOOR = 1e-12


def weighted_pca(X: np.ndarray, metric: np.ndarray | None, variance_fraction: float):
    """PCA of the rows of ``X`` under the diagonal metric ``diag(metric)``.

    Eigendecomposition of ``W^1/2 Xc^T Xc W^1/2 / (n - 1)`` via an SVD of the
    weighted data; components are mapped back with ``W^-1/2`` so that
    ``V^T W V = I``.  Keeps the smallest M whose cumulative normalized variance
    reaches ``variance_fraction``; eigenvalues below ``1e-12 * lambda_1`` are
    dropped first.  Sign convention: the largest-magnitude entry of each
    component is positive.

    Returns ``(mean, components (d, M), eigenvalues (M,), explained_ratio (M,))``.
    """
    X = np.asarray(X, dtype=float)
    n, d = X.shape
    if n < 2:
        raise InsufficientSamples(f"need at least 2 samples, got {n}")
    if metric is None:
        sw = np.ones(d)
    else:
        metric = np.asarray(metric, dtype=float)
        if metric.shape != (d,) or not np.all(metric > 0) or not np.all(np.isfinite(metric)):
            raise NonpositiveWeights("metric weights must be finite and strictly positive")
        sw = np.sqrt(metric)
    mean = X.mean(axis=0)
    _, s, vt = np.linalg.svd((X - mean) * sw, full_matrices=False)
    eig = s**2 / (n - 1)
    total = eig.sum()
    if total == 0:
        return mean, np.zeros((d, 0)), np.zeros(0), np.zeros(0)
    n_keep = int(np.sum(eig > NOISE_FLOOR * eig[0]))
    ratio = np.cumsum(eig) / total
    m = min(int(np.searchsorted(ratio, variance_fraction - 1e-12)) + 1, n_keep)
    comps = vt[:m].T / sw[:, None]
    idx = np.argmax(np.abs(comps), axis=0)
    signs = np.where(comps[idx, np.arange(m)] < 0, -1.0, 1.0)
    comps = comps * signs
    return mean, comps, eig[:m], eig[:m] / total
