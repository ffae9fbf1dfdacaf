"""Per-class statistical shape model with area-weighted PCA."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import serialization
from ._pca import weighted_pca
from ._validation import check_fraction
from .exceptions import DimensionMismatch, InsufficientSamples, ValidationError
from .geometry import TriangleMesh, vertex_area_weights


def _stack_shapes(meshes):
    if isinstance(meshes, np.ndarray):
        arr = np.asarray(meshes, dtype=float)
        if arr.ndim == 3:
            arr = arr.reshape(len(arr), -1)
        return arr, None
    meshes = list(meshes)
    if not meshes:
        raise InsufficientSamples("no shapes given")
    tri = meshes[0].triangles
    n_pts = meshes[0].point_count
    for m in meshes[1:]:
        if m.point_count != n_pts or not np.array_equal(m.triangles, tri):
            raise ValidationError("meshes are not in dense correspondence")
    return np.stack([m.vertices.ravel() for m in meshes]), tri


class ShapeModel(BaseEstimator):
    """Statistical shape model ``s = mean + V diag(sqrt(eigenvalues)) alpha``.

    ``fit`` takes GPA-aligned meshes in dense correspondence (or an
    ``(n, N, 3)`` array plus ``triangles``).  Per-vertex weights default to
    the area weights of the mean shape; they are rescaled to mean 1 so
    eigenvalues stay in mm^2 and a uniform weighting reduces to ordinary PCA.

    Attributes after fitting: ``mean_`` (3N,), ``components_`` (3N, M) with
    ``components_.T @ diag(metric_) @ components_ = I``, ``eigenvalues_`` (M,),
    ``weights_`` (N,), ``triangles_`` and ``landmark_vertices_``.
    """

    def __init__(self, variance_fraction=0.95, class_label=None):
        self.variance_fraction = variance_fraction
        self.class_label = class_label

    def fit(self, meshes, weights=None, triangles=None, landmark_vertices=None):
        frac = check_fraction(self.variance_fraction)
        X, tri = _stack_shapes(meshes)
        if tri is None:
            tri = np.zeros((0, 3), dtype=np.int64) if triangles is None else np.asarray(triangles, dtype=np.int64)
        if X.shape[1] % 3:
            raise DimensionMismatch("shape vectors must have length 3N")
        n_pts = X.shape[1] // 3
        if weights is None:
            weights = vertex_area_weights(TriangleMesh(X.mean(axis=0).reshape(-1, 3), tri))
        w = np.asarray(weights, dtype=float)
        if w.shape != (n_pts,):
            raise DimensionMismatch(f"expected {n_pts} vertex weights, got {w.shape}")
        if np.all(w > 0):
            w = w / w.mean()
        mean, comps, eig, ratio = weighted_pca(X, np.repeat(w, 3), frac)
        self.mean_ = mean
        self.components_ = comps
        self.eigenvalues_ = eig
        self.explained_variance_ratio_ = ratio
        self.weights_ = w
        self.triangles_ = tri
        self.landmark_vertices_ = dict(landmark_vertices or {})
        self.n_samples_ = len(X)
        return self

    @property
    def n_components_(self) -> int:
        return len(self.eigenvalues_)

    @property
    def metric_(self) -> np.ndarray:
        return np.repeat(self.weights_, 3)

    def _check_alpha(self, alpha):
        check_is_fitted(self, "components_")
        a = np.atleast_2d(np.asarray(alpha, dtype=float))
        if a.shape[1] != self.n_components_:
            raise DimensionMismatch(f"expected {self.n_components_} coefficients, got {a.shape[1]}")
        return a

    def transform(self, meshes) -> np.ndarray:
        """Standardized coefficients ``alpha`` of the given shapes."""
        check_is_fitted(self, "components_")
        X, _ = _stack_shapes(meshes)
        proj = (X - self.mean_) * self.metric_ @ self.components_
        return proj / np.sqrt(self.eigenvalues_)

    def inverse_transform(self, alpha) -> np.ndarray:
        a = self._check_alpha(alpha)
        return self.mean_ + (a * np.sqrt(self.eigenvalues_)) @ self.components_.T

    def synthesize(self, alpha) -> TriangleMesh:
        return TriangleMesh(self.inverse_transform(alpha)[0].reshape(-1, 3), self.triangles_)

    def sample_coefficients(self, n: int, seed) -> np.ndarray:
        if n < 1:
            raise ValidationError("n must be >= 1")
        return np.random.default_rng(seed).standard_normal((n, self.n_components_))

    def sample(self, n: int, seed) -> list:
        check_is_fitted(self, "components_")
        shapes = self.inverse_transform(self.sample_coefficients(n, seed))
        return [TriangleMesh(s.reshape(-1, 3), self.triangles_) for s in shapes]

    def save(self, path) -> None:
        check_is_fitted(self, "components_")
        meta = {
            "modality": "ssm",
            "class_label": self.class_label,
            "variance_fraction": self.variance_fraction,
            "n_points": len(self.weights_),
            "n_components": self.n_components_,
            "n_samples": self.n_samples_,
            "eigenvalues": [float(e) for e in self.eigenvalues_],
            "explained_variance_ratio": [float(r) for r in self.explained_variance_ratio_],
            "weights": [float(w) for w in self.weights_],
            "landmark_vertices": {k: _anchor_json(v) for k, v in sorted(self.landmark_vertices_.items())},
        }
        serialization.save(path, "ssm", meta, {
            "mean": self.mean_.astype("<f8"),
            "components": self.components_.astype("<f8"),
            "triangles": self.triangles_.astype("<i8"),
        })

    @classmethod
    def load(cls, path) -> "ShapeModel":
        _, meta, arrays = serialization.load(path, "ssm")
        model = cls(variance_fraction=meta["variance_fraction"], class_label=meta["class_label"])
        model.mean_ = arrays["mean"]
        model.components_ = arrays["components"].reshape(len(model.mean_), meta["n_components"])
        model.eigenvalues_ = np.array(meta["eigenvalues"], dtype=float)
        model.weights_ = np.array(meta["weights"], dtype=float)
        model.triangles_ = arrays["triangles"].reshape(-1, 3)
        model.landmark_vertices_ = dict(meta["landmark_vertices"])
        model.n_samples_ = meta["n_samples"]
        model.explained_variance_ratio_ = np.array(meta["explained_variance_ratio"], dtype=float)
        return model


def _anchor_json(anchor):
    if np.ndim(anchor) == 0:
        return int(anchor)
    return [[int(i), float(w)] for i, w in anchor]


def fit_ssm(corresponded, weights=None, variance_fraction=0.95, class_label=None) -> ShapeModel:
    return ShapeModel(variance_fraction, class_label).fit(corresponded, weights)


def synthesize_shape(model: ShapeModel, alpha) -> TriangleMesh:
    return model.synthesize(alpha)


def sample_shapes(model: ShapeModel, n: int, seed) -> list:
    return model.sample(n, seed)
