import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mpdl.eigenimage import (
    DegenerateSignatureError,
    apply_filter,
    compute_filter,
    otsu_threshold,
    threshold_mask,
)
from mpdl.volume import ChannelKind, ChannelMeta, MultiparametricVolume


def volume_of(signatures):
    data = np.asarray(signatures, dtype=np.float64).T.reshape(-1, 1, 1, len(signatures))
    chans = [ChannelMeta(f"c{i}", ChannelKind.OTHER) for i in range(data.shape[0])]
    return MultiparametricVolume((len(signatures), 1, 1), (1, 1, 1), chans, data)


class TestComputeFilter:
    def test_axis_aligned(self):
        f = compute_filter([1, 0], [[0, 1]])
        np.testing.assert_allclose(f.weights, [1, 0], atol=1e-15)

    def test_two_by_two_solve(self):
        f = compute_filter([1, 1], [[1, -1]])
        # direct solve of [[1, 1], [1, -1]] w = [1, 0]
        np.testing.assert_allclose(f.weights, np.linalg.solve([[1, 1], [1, -1]], [1, 0]), atol=1e-15)
        np.testing.assert_allclose(f.weights, [0.5, 0.5], atol=1e-15)

    def test_parallel_is_degenerate(self):
        with pytest.raises(DegenerateSignatureError):
            compute_filter([1, 0], [[2, 0]])

    def test_in_span_is_degenerate(self):
        with pytest.raises(DegenerateSignatureError):
            compute_filter([1, 1, 0], [[1, 0, 0], [0, 1, 0]])

    def test_zero_and_repeated_undesired_are_harmless(self):
        f = compute_filter([1, 2, 3], [[0, 0, 0], [1, 0, 0], [1, 0, 0]])
        assert np.all(np.abs(f.residuals()) < 1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            compute_filter([1, 0], [[1, 0, 0]])

    @settings(max_examples=60, deadline=None)
    @given(st.integers(2, 7), st.integers(0, 5), st.integers(0, 2**31))
    def test_constraints_and_minimum_norm(self, n, k, seed):
        k = min(k, n - 1)
        rng = np.random.default_rng(seed)
        a = rng.normal(size=(k + 1, n))
        f = compute_filter(a[0], a[1:])
        assert np.all(np.abs(f.residuals()) < 1e-9)
        # any other feasible w = w* + null-space direction has a larger norm
        _, s, vt = np.linalg.svd(a)
        null = vt[k + 1 :]
        if len(null):
            for _ in range(5):
                other = f.weights + null.T @ rng.normal(size=len(null))
                assert np.linalg.norm(other) >= np.linalg.norm(f.weights) - 1e-12
        # independent closed form via lstsq (minimum-norm for underdetermined systems)
        e1 = np.zeros(k + 1)
        e1[0] = 1
        np.testing.assert_allclose(f.weights, np.linalg.lstsq(a, e1, rcond=None)[0], atol=1e-8)


class TestApply:
    def test_gain_and_nulling(self):
        d, u1, u2 = np.array([3.0, 1, 2]), np.array([1.0, 4, 0]), np.array([0.0, 1, 5])
        f = compute_filter(d, [u1, u2])
        out = apply_filter(volume_of([d, u1, u2, d + u1, 2 * u2]), f).ravel()
        np.testing.assert_allclose(out, [1, 0, 0, 1, 0], atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(-5, 5), st.floats(-5, 5), st.integers(0, 1000))
    def test_linearity(self, alpha, beta, seed):
        rng = np.random.default_rng(seed)
        x, y = rng.normal(size=(2, 4))
        f = compute_filter(rng.normal(size=4), [rng.normal(size=4)])
        out = apply_filter(volume_of([x, y, alpha * x + beta * y]), f).ravel()
        assert abs(out[2] - (alpha * out[0] + beta * out[1])) < 1e-9

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            apply_filter(volume_of([[1, 2, 3]]), compute_filter([1, 0], [[0, 1]]))


def exhaustive_otsu(values, bins=256):
    """Loop over all 255 histogram cuts; first strict maximum of w0*w1*(mu0-mu1)^2 wins."""
    lo, hi = values.min(), values.max()
    width = (hi - lo) / bins
    counts = [0] * bins
    for v in values:
        counts[min(int((v - lo) / width), bins - 1)] += 1
    centers = [lo + (i + 0.5) * width for i in range(bins)]
    best, best_k = -1.0, None
    for k in range(bins - 1):
        n0 = sum(counts[: k + 1])
        n1 = len(values) - n0
        if n0 == 0 or n1 == 0:
            continue
        mu0 = sum(c * x for c, x in zip(counts[: k + 1], centers)) / n0
        mu1 = sum(c * x for c, x in zip(counts[k + 1 :], centers[k + 1 :])) / n1
        score = (n0 / len(values)) * (n1 / len(values)) * (mu0 - mu1) ** 2
        if score > best * (1 + 1e-12):
            best, best_k = score, k
    return lo + (best_k + 1) * width, best


class TestOtsu:
    def test_bimodal_exact(self):
        img = np.zeros(100)
        img[:40] = 1.0
        np.random.default_rng(0).shuffle(img)
        t = otsu_threshold(img)
        np.testing.assert_array_equal(threshold_mask(img), img == 1.0)
        ref_t, best = exhaustive_otsu(img)
        # every separating cut scores 0.6 * 0.4 * (255/256)^2 on bin centres; the earliest is kept
        assert best == pytest.approx(0.24 * (255 / 256) ** 2, abs=1e-12)
        assert t == pytest.approx(ref_t, abs=1e-12) == pytest.approx(1 / 256)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_matches_exhaustive_search_score(self, seed):
        rng = np.random.default_rng(seed)
        img = np.concatenate([rng.normal(0, 1, 300), rng.normal(rng.uniform(2, 6), 1, 200)])
        ref_t, _ = exhaustive_otsu(img)
        assert otsu_threshold(img) == pytest.approx(ref_t, rel=1e-12, abs=1e-12)

    def test_fixed_threshold(self):
        img = np.array([0.0, 1.0, 1.0, 0.0])
        np.testing.assert_array_equal(threshold_mask(img, 0.5), [False, True, True, False])

    def test_constant_image(self):
        with pytest.raises(ValueError):
            threshold_mask(np.full(10, 3.0), "otsu")

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            threshold_mask(np.arange(3.0), "median")
