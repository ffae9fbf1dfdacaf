import csv

import numpy as np
import pytest
from hypothesis import given, strategies as st

from craniosynth.exceptions import EmptyClass, EmptyReference, ShapeMismatch, ValidationError
from craniosynth.ssim_eval import (DEFAULT_PARAMS, SsimParams, contrast_structure, five_number_summary, ssim,
                                   ssim_cc, ssim_cc_batch, ssim_cc_summary, ssim_matrix, write_summary_csv)

seeds = st.integers(0, 2**32 - 1)


def window_loop_ssim(a, b, p=DEFAULT_PARAMS):
    """Direct loop over every valid 11x11 window with the 2-D Gaussian weights."""
    w = p.window()
    k = p.window_size
    vals = []
    for i in range(a.shape[0] - k + 1):
        for j in range(a.shape[1] - k + 1):
            x, y = a[i:i + k, j:j + k], b[i:i + k, j:j + k]
            mx, my = (w * x).sum(), (w * y).sum()
            vx = (w * (x - mx) ** 2).sum()
            vy = (w * (y - my) ** 2).sum()
            cxy = (w * (x - mx) * (y - my)).sum()
            vals.append((2 * mx * my + p.c1) * (2 * cxy + p.c2) / ((mx**2 + my**2 + p.c1) * (vx + vy + p.c2)))
    return float(np.mean(vals))


def smooth_images(rng, n):
    base = rng.random((n, 28, 28))
    kern = np.ones(5) / 5
    for ax in (1, 2):
        base = np.apply_along_axis(lambda r: np.convolve(r, kern, mode="same"), ax, base)
    return np.clip(base, 0, 1)


class TestParams:
    def test_window(self):
        w = DEFAULT_PARAMS.window()
        assert w.shape == (11, 11)
        assert w.sum() == pytest.approx(1.0, abs=1e-15)
        assert DEFAULT_PARAMS.c1 == pytest.approx(1e-4) and DEFAULT_PARAMS.c2 == pytest.approx(9e-4)

    def test_invalid(self):
        with pytest.raises(ValidationError):
            SsimParams(sigma=0.0)
        with pytest.raises(ValidationError):
            SsimParams(k1=-0.1)


class TestSsim:
    def test_identity_exact(self, rng):
        a = rng.random((28, 28))
        assert ssim(a, a) == 1.0

    def test_symmetry(self, rng):
        a, b = rng.random((2, 28, 28))
        assert abs(ssim(a, b) - ssim(b, a)) < 1e-12

    def test_constant_images(self):
        expected = (2 * 0.4 * 0.6 + 1e-4) / (0.4**2 + 0.6**2 + 1e-4)
        assert abs(ssim(np.full((28, 28), 0.4), np.full((28, 28), 0.6)) - expected) < 1e-9

    def test_matches_window_loop(self, rng):
        a, b = smooth_images(rng, 2)
        assert ssim(a, b) == pytest.approx(window_loop_ssim(a, b), abs=1e-12)

    def test_matches_scikit_image(self, rng):
        metrics = pytest.importorskip("skimage.metrics")
        a, b = smooth_images(rng, 2)
        ref = metrics.structural_similarity(a, b, gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
                                            data_range=1.0)
        # the reference crops a 5-pixel border of its full-size map, leaving exactly the valid windows
        assert ssim(a, b) == pytest.approx(ref, abs=1e-10)

    @given(seeds)
    def test_range(self, seed):
        a, b = np.random.default_rng(seed).random((2, 28, 28))
        assert -1.0 <= ssim(a, b) <= 1.0

    @given(seeds, st.floats(-0.2, 0.2))
    def test_contrast_structure_ignores_common_offset(self, seed, c):
        rng = np.random.default_rng(seed)
        a, b = 0.3 + 0.4 * rng.random((2, 28, 28))
        assert abs(contrast_structure(a + c, b + c) - contrast_structure(a, b)) < 1e-9

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            ssim(np.zeros((28, 28)), np.zeros((28, 27)))
        with pytest.raises(ShapeMismatch):
            ssim_matrix(np.zeros((2, 8, 8)), np.zeros((2, 8, 8)))

    def test_matrix_matches_pairwise(self, rng):
        A, B = smooth_images(rng, 4), smooth_images(rng, 3)
        M = ssim_matrix(A, B, chunk=2)
        for i in range(4):
            for j in range(3):
                assert M[i, j] == pytest.approx(ssim(A[i], B[j]), abs=1e-14)


class TestSsimCc:
    def test_single_identical_reference(self, rng):
        a = rng.random((28, 28))
        assert ssim_cc(a, [a]) == 1.0

    def test_min_semantics(self, rng):
        a = rng.random((28, 28))
        other = 1 - a
        assert ssim_cc(a, [a, other]) == ssim(a, other)
        assert ssim_cc(a, [a, other], aggregate="max") == 1.0

    def test_exhaustive_oracle(self, rng):
        refs = smooth_images(rng, 5)
        syn = smooth_images(rng, 5)
        batch = ssim_cc_batch(syn, refs)
        for s, got in zip(syn, batch):
            brute = min(window_loop_ssim(s, r) for r in refs)
            assert abs(got - brute) < 1e-12
            assert ssim_cc(s, refs) == got

    def test_empty_reference(self, rng):
        with pytest.raises(EmptyReference):
            ssim_cc(rng.random((28, 28)), [])
        with pytest.raises(ValidationError):
            ssim_cc(rng.random((28, 28)), [rng.random((28, 28))], aggregate="mean")

    @given(seeds, st.integers(1, 4), st.integers(1, 4))
    def test_monotone_under_growth(self, seed, n1, n2):
        rng = np.random.default_rng(seed)
        s = rng.random((28, 28))
        small = rng.random((n1, 28, 28))
        big = np.concatenate([small, rng.random((n2, 28, 28))])
        assert ssim_cc(s, big) <= ssim_cc(s, small)
        assert ssim_cc(s, np.concatenate([small, s[None]])) <= ssim_cc(s, small)
        assert all(ssim_cc(s, small) <= ssim(s, r) for r in small)


class TestSummary:
    def test_quartiles_linear_rule(self):
        mn, q1, med, q3, mx = five_number_summary([0.8, 0.2, 0.6, 0.4])
        assert (mn, mx) == (0.2, 0.8)
        assert med == pytest.approx(0.5, abs=1e-15)
        # positions 0.75 and 2.25 between sorted values
        assert q1 == pytest.approx(0.35, abs=1e-15) and q3 == pytest.approx(0.65, abs=1e-15)

    def test_identical_sets(self, rng):
        img = rng.random((28, 28))
        syn = np.stack([img] * 3)
        out = ssim_cc_summary(syn, [1, 1, 1], syn, [1, 1, 1], generator="PCA")
        assert len(out) == 1
        s = out[0]
        assert (s.min, s.q1, s.median, s.q3, s.max, s.n, s.class_label) == (1.0, 1.0, 1.0, 1.0, 1.0, 3, 1)

    def test_ordered_statistics(self, rng):
        syn, ref = smooth_images(rng, 12), smooth_images(rng, 8)
        out = ssim_cc_summary(syn, np.arange(12) % 4, ref, np.arange(8) % 4, generator="GAN")
        assert [s.class_label for s in out] == [0, 1, 2, 3]
        for s in out:
            assert s.min <= s.q1 <= s.median <= s.q3 <= s.max and s.n == 3

    def test_empty_class(self, rng):
        syn = smooth_images(rng, 2)
        with pytest.raises(EmptyClass):
            ssim_cc_summary(syn, [0, 2], syn, [0, 0])
        with pytest.raises(EmptyClass):
            five_number_summary([])

    def test_csv(self, rng, tmp_path):
        syn = smooth_images(rng, 4)
        out = ssim_cc_summary(syn, [0, 0, 1, 1], syn, [0, 0, 1, 1], generator="SSM")
        write_summary_csv(tmp_path / "s.csv", out)
        rows = list(csv.reader(open(tmp_path / "s.csv")))
        assert rows[0] == ["generator", "class", "min", "q1", "median", "q3", "max", "n"]
        assert rows[1][0] == "SSM" and rows[1][1] == "0" and rows[1][-1] == "2"
        assert float(rows[1][2]) == out[0].min
