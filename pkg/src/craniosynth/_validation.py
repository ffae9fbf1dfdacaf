"""Input validation helpers shared by the estimators."""
from __future__ import annotations

import numpy as np

from .exceptions import BadLabel, DimensionMismatch, EmptyDataset, ValidationError

MAP_SIZE = 28
N_CLASSES = 4
CLASS_NAMES = ("control", "coronal", "metopic", "sagittal")


def check_maps(X, *, allow_empty=False) -> np.ndarray:
    """Coerce to a float64 (n, 28, 28) stack; accepts (28, 28), (n, 784) or (n, 1, 28, 28)."""
    a = np.asarray(X, dtype=float)
    if a.ndim == 2 and a.shape == (MAP_SIZE, MAP_SIZE):
        a = a[None]
    elif a.ndim == 2 and a.shape[1] == MAP_SIZE * MAP_SIZE:
        a = a.reshape(-1, MAP_SIZE, MAP_SIZE)
    elif a.ndim == 4 and a.shape[1] == 1:
        a = a[:, 0]
    if a.ndim != 3 or a.shape[1:] != (MAP_SIZE, MAP_SIZE):
        raise DimensionMismatch(f"expected distance maps of shape (n, 28, 28), got {np.shape(X)}")
    if not allow_empty and len(a) == 0:
        raise EmptyDataset("no images given")
    if not np.all(np.isfinite(a)):
        raise ValidationError("distance maps contain non-finite values")
    return a


def check_labels(y, n=None, n_classes=N_CLASSES) -> np.ndarray:
    lab = np.asarray(y)
    if lab.ndim != 1:
        raise BadLabel("labels must be one-dimensional")
    if lab.size and (not np.issubdtype(lab.dtype, np.integer)):
        if not np.all(np.mod(lab, 1) == 0):
            raise BadLabel("labels must be integers")
    lab = lab.astype(np.int64)
    if lab.size and (lab.min() < 0 or lab.max() >= n_classes):
        raise BadLabel(f"labels must lie in 0..{n_classes - 1}")
    if n is not None and len(lab) != n:
        raise DimensionMismatch(f"{len(lab)} labels for {n} samples")
    return lab


def check_fraction(value, name="variance_fraction") -> float:
    v = float(value)
    if not 0 < v <= 1:
        raise ValidationError(f"{name} must lie in (0, 1], got {value}")
    return v
