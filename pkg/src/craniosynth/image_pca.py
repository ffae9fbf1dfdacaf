"""Per-class ordinary PCA on vectorized 28x28 distance maps."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import serialization
from ._pca import weighted_pca
from ._validation import MAP_SIZE, check_fraction, check_maps
from .exceptions import DimensionMismatch, InsufficientSamples, ValidationError


class ImagePCA(TransformerMixin, BaseEstimator):
    """Image-space generator ``i = mean + V diag(sqrt(eigenvalues)) alpha``.

    ``transform`` returns standardized coefficients, ``inverse_transform``
    the unclamped vectorized images; ``sample`` draws standard-normal
    coefficients and clamps the synthesized maps to [0, 1].
    """

    def __init__(self, variance_fraction=0.95, class_label=None):
        self.variance_fraction = variance_fraction
        self.class_label = class_label

    def fit(self, X, y=None):
        frac = check_fraction(self.variance_fraction)
        maps = check_maps(X)
        if len(maps) < 2:
            raise InsufficientSamples("image PCA needs at least 2 images")
        mean, comps, eig, ratio = weighted_pca(maps.reshape(len(maps), -1), None, frac)
        self.mean_ = mean
        self.components_ = comps
        self.eigenvalues_ = eig
        self.explained_variance_ratio_ = ratio
        self.n_samples_ = len(maps)
        return self

    @property
    def n_components_(self) -> int:
        return len(self.eigenvalues_)

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "components_")
        flat = check_maps(X).reshape(-1, MAP_SIZE * MAP_SIZE)
        return (flat - self.mean_) @ self.components_ / np.sqrt(self.eigenvalues_)

    def inverse_transform(self, alpha) -> np.ndarray:
        """Unclamped vectorized images (n, 784); linear in ``alpha``."""
        check_is_fitted(self, "components_")
        a = np.atleast_2d(np.asarray(alpha, dtype=float))
        if a.shape[1] != self.n_components_:
            raise DimensionMismatch(f"expected {self.n_components_} coefficients, got {a.shape[1]}")
        return self.mean_ + (a * np.sqrt(self.eigenvalues_)) @ self.components_.T

    def sample_coefficients(self, n: int, seed) -> np.ndarray:
        if n < 1:
            raise ValidationError("n must be >= 1")
        return np.random.default_rng(seed).standard_normal((n, self.n_components_))

    def sample(self, n: int, seed, clip: bool = True) -> np.ndarray:
        check_is_fitted(self, "components_")
        imgs = self.inverse_transform(self.sample_coefficients(n, seed)).reshape(-1, MAP_SIZE, MAP_SIZE)
        return np.clip(imgs, 0.0, 1.0) if clip else imgs

    def save(self, path) -> None:
        check_is_fitted(self, "components_")
        meta = {
            "modality": "image_pca",
            "class_label": self.class_label,
            "variance_fraction": self.variance_fraction,
            "n_components": self.n_components_,
            "n_samples": self.n_samples_,
            "eigenvalues": [float(e) for e in self.eigenvalues_],
            "explained_variance_ratio": [float(r) for r in self.explained_variance_ratio_],
        }
        serialization.save(path, "image_pca", meta, {
            "mean": self.mean_.astype("<f8"),
            "components": self.components_.astype("<f8"),
        })

    @classmethod
    def load(cls, path) -> "ImagePCA":
        _, meta, arrays = serialization.load(path, "image_pca")
        model = cls(variance_fraction=meta["variance_fraction"], class_label=meta["class_label"])
        model.mean_ = arrays["mean"]
        model.components_ = arrays["components"].reshape(MAP_SIZE * MAP_SIZE, meta["n_components"])
        model.eigenvalues_ = np.array(meta["eigenvalues"], dtype=float)
        model.explained_variance_ratio_ = np.array(meta["explained_variance_ratio"], dtype=float)
        model.n_samples_ = meta["n_samples"]
        return model


def fit_image_pca(images, variance_fraction=0.95, class_label=None) -> ImagePCA:
    return ImagePCA(variance_fraction, class_label).fit(images)


def sample_images(model: ImagePCA, n: int, seed) -> np.ndarray:
    return model.sample(n, seed)
