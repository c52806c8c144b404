from __future__ import annotations

import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hetdetect.errors import KTooSmall, MissingFit, NonPositiveVariance, SplitTooSmall
from hetdetect.glm_core import BlockData, LocalFit
from hetdetect.inference import (
    CombinedOutcome,
    DimensionSlice,
    EctOutcome,
    LargeKWarning,
    WaldOutcome,
    combine,
    combined_statistic,
    combined_weight,
    decide,
    ect_from_arrays,
    ect_statistic,
    evaluate_dimensions,
    first_part_size,
    pairwise_weights,
    split_block,
    wald_quad_form,
    wald_statistic,
)


def contrast_matrix(K: int) -> np.ndarray:
    """R_K = [I_{K-1} | -1]: R theta = 0 iff all components are equal."""
    return np.hstack([np.eye(K - 1), -np.ones((K - 1, 1))])


def dense_projection(variances) -> np.ndarray:
    R = contrast_matrix(len(variances))
    M = R @ np.diag(variances) @ R.T
    return R.T @ np.linalg.solve(M, R)


def dense_quad_form(est, var) -> float:
    return float(est @ dense_projection(var) @ est)


def make_fit(block_id, theta, sigma, n, split="full"):
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    sigma = np.atleast_1d(np.asarray(sigma, dtype=float))
    return LocalFit(theta, np.diag(sigma**2), sigma, n, True, 1, block_id, split)


class TestPairwiseWeights:
    def test_two_blocks(self):
        w = pairwise_weights([0.25, 0.25])
        assert w(1, 2) == pytest.approx(2.0, rel=1e-15)

    def test_equal_variances(self):
        w = pairwise_weights([1.0, 1.0, 1.0])
        for a, b in [(1, 2), (1, 3), (2, 3)]:
            assert w(a, b) == pytest.approx(1 / 3, rel=1e-15)

    def test_matches_dense_off_diagonal(self):
        # the dense matrix carries -r off the diagonal; its rows sum to zero
        rng = np.random.default_rng(0)
        for K in range(2, 9):
            var = rng.uniform(0.1, 3.0, size=K)
            P = dense_projection(var)
            w = pairwise_weights(var)
            for a in range(1, K + 1):
                for b in range(1, K + 1):
                    if a != b:
                        assert w(a, b) == pytest.approx(-P[a - 1, b - 1], rel=1e-10)
                        assert w(a, b) == w(b, a)
            assert np.allclose(P.sum(axis=1), 0.0, atol=1e-10)

    def test_errors(self):
        with pytest.raises(NonPositiveVariance):
            pairwise_weights([1.0, 0.0])
        with pytest.raises(KTooSmall):
            pairwise_weights([1.0])


class TestWald:
    def test_hand_example(self):
        out = wald_statistic(DimensionSlice(1, [0.0, 1.0], [0.25, 0.25]))
        assert out.quad_form == pytest.approx(2.0, rel=1e-14)
        assert out.statistic == pytest.approx(1 / math.sqrt(2), rel=1e-14)
        assert out.df_equiv == 1
        assert out.quad_form == pytest.approx(dense_quad_form(np.array([0.0, 1.0]), [0.25, 0.25]))

    def test_all_equal(self):
        K = 6
        out = wald_statistic(DimensionSlice(1, [0.3] * K, np.linspace(0.1, 1, K)))
        assert out.quad_form == pytest.approx(0.0, abs=1e-14)
        assert out.statistic == pytest.approx(-(K - 1) / math.sqrt(2 * K - 2))

    def test_equal_variance_special_case(self):
        rng = np.random.default_rng(1)
        K, n = 7, 40
        est = rng.normal(size=K)
        q = wald_quad_form(est, np.full(K, 1 / n))
        pairs = sum((est[a] - est[b]) ** 2 for a in range(K) for b in range(a + 1, K))
        assert q == pytest.approx(n / K * pairs, rel=1e-12)

    def test_dense_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            K = int(rng.integers(2, 9))
            est = rng.normal(size=K) * rng.uniform(0.1, 5)
            var = rng.uniform(0.01, 4.0, size=K)
            assert wald_quad_form(est, var) == pytest.approx(dense_quad_form(est, var), rel=1e-10)

    def test_vectorized_last_axis(self):
        rng = np.random.default_rng(3)
        est = rng.normal(size=(4, 5))
        var = rng.uniform(0.5, 1.5, size=(4, 5))
        q = wald_quad_form(est, var)
        for i in range(4):
            assert q[i] == pytest.approx(wald_quad_form(est[i], var[i]), rel=1e-14)

    @settings(max_examples=100, deadline=None)
    @given(
        st.lists(st.floats(-10, 10), min_size=2, max_size=12),
        st.floats(-100, 100),
        st.floats(0.01, 100),
        st.integers(0, 2**32 - 1),
    )
    def test_shift_and_scale_invariance(self, est, c, s, seed):
        est = np.array(est)
        var = np.random.default_rng(seed).uniform(0.05, 2.0, size=est.size)
        base = wald_quad_form(est, var)
        shifted = wald_quad_form(est + c, var)
        scaled = wald_quad_form(s * est, s * s * var)
        tol = 1e-8 * (1 + base) + 1e-9 * (abs(c) + 1) ** 2 * np.sum(1 / var)
        assert abs(shifted - base) <= tol
        assert scaled == pytest.approx(base, rel=1e-9, abs=1e-9)

    def test_large_k_warning(self):
        sl = DimensionSlice(1, np.zeros(10), np.ones(10))
        with pytest.warns(LargeKWarning):
            wald_statistic(sl, n_min=5)
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            wald_statistic(sl, n_min=500)

    def test_slice_from_fits(self):
        fits = [make_fit(k, [k, 2 * k], [1.0, 2.0], 4) for k in (1, 2)]
        sl = DimensionSlice.from_fits(fits, 2)
        assert np.allclose(sl.estimates, [2, 4])
        assert np.allclose(sl.variances, [1.0, 1.0])

    def test_non_positive_variance(self):
        with pytest.raises(NonPositiveVariance):
            wald_quad_form([0.0, 1.0], [1.0, -1.0])


class TestSplit:
    def _block(self, n, p=1):
        X = np.arange(n * p, dtype=float).reshape(n, p)
        return BlockData(1, X, np.arange(n, dtype=float))

    def test_nine_rows(self):
        a, b = split_block(self._block(9), 2 / 3)
        assert (a.n, b.n) == (3, 6)
        assert np.array_equal(a.response, [0, 1, 2])
        assert np.array_equal(b.response, np.arange(3, 9))

    def test_two_rows(self):
        a, b = split_block(self._block(2), 0.5, p=1)
        assert (a.n, b.n) == (1, 1)

    def test_too_small(self):
        with pytest.raises(SplitTooSmall):
            split_block(self._block(4, p=2), 2 / 3)

    def test_floor_tolerates_representation_error(self):
        assert first_part_size(10, 0.9) == 1
        assert first_part_size(500, 2 / 3) == 166

    @settings(max_examples=200, deadline=None)
    @given(st.integers(2, 400), st.floats(0.05, 0.95))
    def test_bookkeeping(self, n, gamma):
        n1 = first_part_size(n, gamma)
        if n1 < 1 or n - n1 < 1:
            with pytest.raises(SplitTooSmall):
                split_block(self._block(n), gamma, p=1)
            return
        a, b = split_block(self._block(n), gamma, p=1)
        assert a.n == math.floor((1 - gamma) * n + 1e-9)
        assert a.n + b.n == n
        assert sorted(np.concatenate([a.response, b.response])) == list(range(n))

    def test_shuffle_is_seeded(self):
        blk = self._block(30)
        a1, b1 = split_block(blk, 2 / 3, "seeded-shuffle", seed=5)
        a2, b2 = split_block(blk, 2 / 3, "seeded-shuffle", seed=5)
        a3, _ = split_block(blk, 2 / 3, "seeded-shuffle", seed=6)
        assert np.array_equal(a1.response, a2.response) and np.array_equal(b1.response, b2.response)
        assert not np.array_equal(a1.response, a3.response)
        assert sorted(np.concatenate([a1.response, b1.response])) == list(range(30))

    def test_shuffle_needs_seed(self):
        with pytest.raises(ValueError):
            split_block(self._block(30), 2 / 3, "seeded-shuffle")


class TestEct:
    def _fits(self, first, second, se2=0.2, n2=None):
        first_fits = [make_fit(k + 1, v, 1.0, 10, "first") for k, v in enumerate(first)]
        n2 = n2 or 25
        sigma = se2 * math.sqrt(n2)
        second_fits = [make_fit(k + 1, v, sigma, n2, "second") for k, v in enumerate(second)]
        return first_fits, second_fits

    def test_extremes_and_statistic(self):
        first, second = self._fits([0.1, 0.5, -0.2], [0.0, 0.4, -0.1])
        out = ect_statistic(first, second, 1)
        assert (out.k_max, out.k_min) == (2, 3)
        assert out.statistic == pytest.approx(0.5 / math.sqrt(0.08), rel=1e-12)
        assert out.p_value == pytest.approx(0.5 * math.erfc(out.statistic / math.sqrt(2)))

    def test_ties_go_to_lowest_label(self):
        first, second = self._fits([0.5, 0.5, 0.1], [0.0, 0.0, 0.0])
        out = ect_statistic(first, second, 1)
        assert out.k_max == 1 and out.k_min == 3

    def test_all_tied(self):
        first, second = self._fits([0.2, 0.2, 0.2], [0.3, 0.1, 0.0])
        out = ect_statistic(first, second, 1)
        assert (out.k_max, out.k_min) == (1, 2)

    def test_second_split_only(self):
        first, second = self._fits([0.1, 0.5, -0.2], [0.0, 0.4, -0.1])
        first_changed = [make_fit(f.block_id, f.theta_hat + 100 * (f.block_id == 1), 1.0, 10) for f in first]
        out = ect_statistic(first, second, 1)
        moved = ect_statistic(first_changed, second, 1)
        assert moved.k_max == 1
        assert out.statistic != moved.statistic

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-5, 5), min_size=2, max_size=10, unique=True), st.floats(-50, 50))
    def test_selection_shift_invariance(self, vals, c):
        a = np.array(vals)
        _, i1, j1 = ect_from_arrays(a, np.zeros_like(a), np.ones_like(a))
        _, i2, j2 = ect_from_arrays(a + c, np.zeros_like(a), np.ones_like(a))
        if np.unique(a + c).size == a.size:  # shifting can merge values only by rounding
            assert (i1, j1) == (i2, j2)

    def test_matches_array_form(self):
        rng = np.random.default_rng(4)
        a, b, s = rng.normal(size=6), rng.normal(size=6), rng.uniform(0.1, 1, size=6)
        first = [make_fit(k + 1, a[k], 1.0, 10) for k in range(6)]
        second = [make_fit(k + 1, b[k], s[k] * 5, 25) for k in range(6)]
        stat, i, j = ect_from_arrays(a, b, s)
        out = ect_statistic(first, second, 1)
        assert out.statistic == pytest.approx(float(stat), rel=1e-12)
        assert (out.k_max, out.k_min) == (i + 1, j + 1)

    def test_missing_fit(self):
        first, second = self._fits([0.1, 0.5], [0.0, 0.4])
        with pytest.raises(MissingFit):
            ect_statistic(first, second[:1], 1)

    def test_k_too_small(self):
        first, second = self._fits([0.1], [0.0])
        with pytest.raises(KTooSmall):
            ect_statistic(first, second, 1)


class TestCombined:
    def test_weight_presets(self):
        assert combined_weight(500, 100) == 1.0
        assert combined_weight(500, 1000) == pytest.approx(500 / (1000 * math.log(1000)), rel=1e-12)
        assert combined_weight(500, 1000) == pytest.approx(0.07238, abs=5e-6)
        assert combined_weight(10**9, 2) == 1.0
        assert combined_weight(500, 250, "simulation") == 1.0
        assert combined_weight(500, 1000, "simulation") == pytest.approx(500 / 1000**1.1)

    def test_examples(self):
        w = WaldOutcome(1.2, 0.0, 0.0, 1)
        e = EctOutcome(0.8, 0.0, 1, 2, 2 / 3)
        assert combined_statistic(w, e, 1.0).statistic == pytest.approx(2.0 / math.sqrt(2))
        e2 = EctOutcome(0.37, 0.0, 1, 2, 2 / 3)
        assert combined_statistic(WaldOutcome(55.0, 0, 0, 1), e2, 1e-8).statistic == pytest.approx(0.37, abs=1e-6)
        zero = combined_statistic(WaldOutcome(0.0, 0, 0, 1), EctOutcome(0.0, 0, 1, 2, 0.5), 0.3)
        assert zero.statistic == 0.0 and zero.p_value == 0.5

    @settings(max_examples=200, deadline=None)
    @given(st.floats(-20, 20), st.floats(-20, 20), st.floats(1e-3, 1), st.floats(1e-3, 5))
    def test_monotone(self, w, t, r, d):
        base = combine(w, t, r)
        assert combine(w + d, t, r) > base
        assert combine(w, t + d, r) > base

    def test_rejects_bad_weight(self):
        with pytest.raises(ValueError):
            combined_statistic(WaldOutcome(0, 0, 0, 1), EctOutcome(0, 0, 1, 2, 0.5), 0.0)


class _P:
    def __init__(self, p):
        self.p_value = p


class TestDecide:
    def test_example(self):
        rep = decide({1: {"wald": _P(0.001)}, 2: {"wald": _P(0.02)}, 3: {"wald": _P(0.5)}}, 0.05)
        assert rep.rejected["wald"] == [1]
        assert rep.p_threshold == pytest.approx(0.05 / 3)
        assert rep.critical_value == pytest.approx(2.12805, abs=5e-6)

    def test_strict_inequality(self):
        rep = decide({1: {"ect": _P(0.05 / 2)}, 2: {"ect": _P(0.0)}}, 0.05)
        assert rep.rejected["ect"] == [2]

    def test_none_rejected(self):
        rep = decide({j: {f: _P(1.0) for f in ("wald", "ect", "combined")} for j in (1, 2)}, 0.05)
        assert rep.rejected == {"wald": [], "ect": [], "combined": []}

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=1, max_size=8), st.floats(0.001, 0.5))
    def test_rejection_iff_below_threshold(self, pvals, alpha):
        rep = decide({j + 1: {"combined": _P(v)} for j, v in enumerate(pvals)}, alpha)
        for j, v in enumerate(pvals):
            assert ((j + 1) in rep.rejected["combined"]) == (v < alpha / len(pvals))

    def test_bad_alpha(self):
        with pytest.raises(ValueError):
            decide({1: {"wald": _P(0.1)}}, 1.5)


class TestEvaluateDimensions:
    def test_end_to_end(self):
        K = 5
        full = [make_fit(k, [1.0, 1.0 + (k == 3) * 2.0], [1.0, 1.0], 500) for k in range(1, K + 1)]
        first = [make_fit(k, [1.0 + 0.01 * k, 1.0 + (k == 3) * 2.0], [1.0, 1.0], 166) for k in range(1, K + 1)]
        second = [make_fit(k, [1.0, 1.0 + (k == 3) * 2.0], [1.0, 1.0], 334) for k in range(1, K + 1)]
        rep = evaluate_dimensions(full, first, second)
        assert rep.rejected == {"wald": [2], "ect": [2], "combined": [2]}
        assert isinstance(rep.per_dim[1]["combined"], CombinedOutcome)
        assert rep.per_dim[2]["ect"].k_max == 3
        assert rep.warnings == []

    def test_large_k_note(self):
        K = 4
        fits = [make_fit(k, [float(k)], [1.0], 3) for k in range(1, K + 1)]
        rep = evaluate_dimensions(fits, fits, fits)
        assert any("n_min" in w for w in rep.warnings)
