"""Structural similarity between distance maps and the similarity-to-reference score.

The Gaussian window is separable, so local moments of a whole stack are two
matrix products with a banded (valid-region) filter matrix.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from ._validation import check_labels, check_maps
from .exceptions import EmptyClass, EmptyReference, ShapeMismatch, ValidationError

AGGREGATES = ("min", "max")


@dataclass(frozen=True)
class SsimParams:
    window_size: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 1.0

    def __post_init__(self):
        if self.window_size < 1 or self.sigma <= 0:
            raise ValidationError("window_size must be >= 1 and sigma > 0")
        if self.k1 <= 0 or self.k2 <= 0 or self.data_range <= 0:
            raise ValidationError("SSIM constants must be positive")

    @property
    def c1(self) -> float:
        return (self.k1 * self.data_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.data_range) ** 2

    def kernel_1d(self) -> np.ndarray:
        x = np.arange(self.window_size) - (self.window_size - 1) / 2
        g = np.exp(-(x**2) / (2 * self.sigma**2))
        return g / g.sum()

    def window(self) -> np.ndarray:
        g = self.kernel_1d()
        return np.outer(g, g)

    def filter_matrix(self, n: int) -> np.ndarray:
        """(n - w + 1, n) matrix whose rows are the shifted 1-D kernel."""
        w = self.window_size
        if n < w:
            raise ShapeMismatch(f"images smaller than the {w}x{w} window")
        g = self.kernel_1d()
        out = np.zeros((n - w + 1, n))
        for i in range(n - w + 1):
            out[i, i:i + w] = g
        return out


DEFAULT_PARAMS = SsimParams()


def _stack(x) -> np.ndarray:
    a = np.asarray(x, dtype=float)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3 or not np.all(np.isfinite(a)):
        raise ShapeMismatch(f"expected finite images of shape (h, w) or (n, h, w), got {np.shape(x)}")
    return a


def _ssim_from_moments(mu_a, mu_b, e_aa, e_bb, e_ab, p: SsimParams) -> np.ndarray:
    var_a = e_aa - mu_a * mu_a
    var_b = e_bb - mu_b * mu_b
    cov = e_ab - mu_a * mu_b
    num = (2 * mu_a * mu_b + p.c1) * (2 * cov + p.c2)
    den = (mu_a * mu_a + mu_b * mu_b + p.c1) * (var_a + var_b + p.c2)
    return (num / den).mean(axis=(-2, -1))


def ssim(a, b, params: SsimParams = DEFAULT_PARAMS) -> float:
    """Mean SSIM over all valid-region windows; exact 1.0 for identical inputs."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeMismatch(f"images must be 2-D with equal shapes, got {a.shape} and {b.shape}")
    return float(ssim_matrix(a, b, params)[0, 0])


def ssim_matrix(A, B, params: SsimParams = DEFAULT_PARAMS, chunk: int = 64) -> np.ndarray:
    """Pairwise SSIM, shape (len(A), len(B))."""
    A, B = _stack(A), _stack(B)
    if A.shape[1:] != B.shape[1:]:
        raise ShapeMismatch(f"image shapes differ: {A.shape[1:]} vs {B.shape[1:]}")
    gr, gc = params.filter_matrix(A.shape[1]), params.filter_matrix(A.shape[2])

    def filt(x):
        return gr @ x @ gc.T

    mu_a, mu_b = filt(A), filt(B)
    e_aa, e_bb = filt(A * A), filt(B * B)
    out = np.empty((len(A), len(B)))
    for s in range(0, len(A), chunk):
        a = A[s:s + chunk]
        e_ab = filt(a[:, None] * B[None])
        out[s:s + chunk] = _ssim_from_moments(mu_a[s:s + chunk, None], mu_b[None], e_aa[s:s + chunk, None],
                                              e_bb[None], e_ab, params)
    return out


def contrast_structure(a, b, params: SsimParams = DEFAULT_PARAMS) -> float:
    """Mean of the contrast-structure factor ``(2 cov + C2) / (var_a + var_b + C2)``.

    Unlike the full index it does not see the local means, so adding one
    constant to both images leaves it unchanged.
    """
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeMismatch(f"images must be 2-D with equal shapes, got {a.shape} and {b.shape}")
    gr, gc = params.filter_matrix(a.shape[0]), params.filter_matrix(a.shape[1])
    ma, mb = gr @ a @ gc.T, gr @ b @ gc.T
    var_a = gr @ (a * a) @ gc.T - ma * ma
    var_b = gr @ (b * b) @ gc.T - mb * mb
    cov = gr @ (a * b) @ gc.T - ma * mb
    return float(((2 * cov + params.c2) / (var_a + var_b + params.c2)).mean())


def _aggregate(values: np.ndarray, how: str, axis=-1):
    if how not in AGGREGATES:
        raise ValidationError(f"aggregate must be one of {AGGREGATES}")
    return values.min(axis=axis) if how == "min" else values.max(axis=axis)


def ssim_cc(synthetic, references, params: SsimParams = DEFAULT_PARAMS, aggregate: str = "min") -> float:
    """Minimum (or, with ``aggregate="max"``, maximum) SSIM of one map against same-class references."""
    refs = _stack(references) if np.size(references) else np.zeros((0, 0, 0))
    if len(refs) == 0:
        raise EmptyReference("no reference images")
    return float(_aggregate(ssim_matrix(synthetic, refs, params)[0], aggregate))


def ssim_cc_batch(synthetic, references, params: SsimParams = DEFAULT_PARAMS, aggregate: str = "min") -> np.ndarray:
    """Score per synthetic map against one shared reference set."""
    refs = _stack(references) if np.size(references) else np.zeros((0, 0, 0))
    if len(refs) == 0:
        raise EmptyReference("no reference images")
    return _aggregate(ssim_matrix(synthetic, refs, params), aggregate)


@dataclass(frozen=True)
class SsimCcSummary:
    generator: str
    class_label: int
    min: float
    q1: float
    median: float
    q3: float
    max: float
    n: int

    def row(self) -> list:
        return [self.generator, self.class_label, *(repr(float(v)) for v in
                (self.min, self.q1, self.median, self.q3, self.max)), self.n]


def five_number_summary(values) -> tuple:
    """``(min, q1, median, q3, max)`` with linear interpolation between order statistics."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise EmptyClass("no values to summarize")
    q = np.quantile(v, [0.0, 0.25, 0.5, 0.75, 1.0], method="linear")
    return tuple(float(x) for x in q)


def ssim_cc_summary(synthetic, synthetic_labels, references, reference_labels,
                    params: SsimParams = DEFAULT_PARAMS, generator: str = "", aggregate: str = "min") -> list:
    """One :class:`SsimCcSummary` per class present in the synthetic set, sorted by class."""
    syn = check_maps(synthetic)
    ref = check_maps(references)
    ys = check_labels(synthetic_labels, len(syn))
    yr = check_labels(reference_labels, len(ref))
    out = []
    for k in np.unique(ys):
        refs = ref[yr == k]
        if len(refs) == 0:
            raise EmptyClass(f"class {k} has no reference images")
        scores = ssim_cc_batch(syn[ys == k], refs, params, aggregate)
        out.append(SsimCcSummary(generator, int(k), *five_number_summary(scores), int(len(scores))))
    return out


CSV_HEADER = ["generator", "class", "min", "q1", "median", "q3", "max", "n"]


def write_summary_csv(path, summaries) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for s in summaries:
            w.writerow(s.row())
