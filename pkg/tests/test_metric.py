import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose
from scipy import integrate
from scipy.stats import norm

from surprisalknn.data import FeatureKind, FeatureSchema
from surprisalknn.errors import InfeasibleError, UsageError
from surprisalknn.metric import (
    DeviationMode,
    DeviationVector,
    MetricConfig,
    case_distance,
    combine,
    combine_leave_one_out,
    feature_difference,
    generalized_mean,
    lk_expected_distance_normal,
    residual_norm,
)


def lk_quadrature(mu, sigma):
    """E|X - Y| for X ~ N(0, sigma), Y ~ N(mu, sigma) by nested adaptive quadrature."""
    lo, hi = -10 * sigma, mu + 10 * sigma

    def inner(x):
        f = lambda y: abs(x - y) * norm.pdf(y, mu, sigma)
        pts = [x] if lo < x < hi else None
        return integrate.quad(f, mu - 10 * sigma, mu + 10 * sigma, points=pts, limit=200)[0]

    return integrate.quad(lambda x: inner(x) * norm.pdf(x, 0, sigma), -10 * sigma, 10 * sigma, limit=200)[0]


def deviations(residuals, confusion=None):
    r = np.asarray(residuals, dtype=float)
    conf = confusion if confusion is not None else (None,) * r.size
    return DeviationVector(r, conf, r.copy())


class TestLK:
    def test_identical_means(self):
        assert lk_expected_distance_normal(0.0, 10.0) == pytest.approx(20 / math.sqrt(math.pi), abs=1e-12)
        assert lk_expected_distance_normal(0.0, 10.0) == pytest.approx(11.2838, abs=1e-3)

    def test_vanishing_sigma(self):
        assert lk_expected_distance_normal(3.0, 1e-9) == pytest.approx(3.0, rel=1e-12)

    def test_five_two_against_quadrature(self):
        assert lk_expected_distance_normal(5.0, 2.0) == pytest.approx(lk_quadrature(5.0, 2.0), rel=1e-4)

    def test_random_pairs_against_quadrature(self):
        rng = np.random.default_rng(7)
        for mu, sigma in zip(rng.uniform(0, 10, 8), rng.uniform(0.1, 5, 8)):
            assert lk_expected_distance_normal(mu, sigma) == pytest.approx(lk_quadrature(mu, sigma), rel=1e-4)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(0, 1e3), st.floats(1e-3, 1e3))
    def test_exceeds_mu(self, mu, sigma):
        # the excess vanishes below double precision once mu is many sigmas out
        value = lk_expected_distance_normal(mu, sigma)
        if mu <= 8 * sigma:
            assert value > mu
        else:
            assert value >= mu

    @settings(max_examples=100, deadline=None)
    @given(st.floats(0, 100), st.floats(0.01, 100), st.floats(0.01, 10))
    def test_monotone_in_both_arguments(self, mu, sigma, step):
        base = lk_expected_distance_normal(mu, sigma)
        assert lk_expected_distance_normal(mu + step, sigma) >= base
        assert lk_expected_distance_normal(mu, sigma + step) >= base

    def test_rejects_bad_sigma(self):
        with pytest.raises(UsageError):
            lk_expected_distance_normal(1.0, 0.0)

    def test_vectorized(self):
        out = lk_expected_distance_normal(np.array([0.0, 1.0]), 1.0)
        assert out.shape == (2,)


class TestGeneralizedMean:
    def test_geometric(self):
        assert generalized_mean([4, 9], [0.5, 0.5], 0) == pytest.approx(6.0, rel=1e-15)

    def test_arithmetic(self):
        assert generalized_mean([4, 9], [0.5, 0.5], 1) == pytest.approx(6.5, rel=1e-15)

    def test_quadratic(self):
        assert generalized_mean([3, 4], [0.5, 0.5], 2) == pytest.approx(math.sqrt(12.5), rel=1e-15)

    def test_small_p_limit(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            x = rng.uniform(0.01, 100, size=rng.integers(1, 10))
            w = rng.uniform(0.1, 1, size=x.size)
            w /= w.sum()
            geo = float(np.exp(np.sum(w * np.log(x))))
            assert generalized_mean(x, w, 1e-6) == pytest.approx(geo, rel=1e-5)
            assert generalized_mean(x, w, 0) == pytest.approx(geo, rel=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0.01, 100), min_size=2, max_size=6), st.floats(0, 3), st.floats(0, 3))
    def test_power_mean_inequality(self, xs, p, q):
        w = np.full(len(xs), 1 / len(xs))
        lo, hi = sorted((p, q))
        assert generalized_mean(xs, w, lo) <= generalized_mean(xs, w, hi) * (1 + 1e-12)

    def test_zero_value_at_p0(self):
        assert generalized_mean([0.0, 5.0], [0.5, 0.5], 0) == 0.0

    def test_negative_rejected(self):
        with pytest.raises(UsageError):
            generalized_mean([-1.0, 2.0], [0.5, 0.5], 1)

    def test_combine_skips_missing(self):
        d = np.array([[4.0, np.nan, 9.0], [np.nan, np.nan, np.nan]])
        out = combine(d, np.array([0.25, 0.5, 0.25]), 0.0)
        assert out[0] == pytest.approx(6.0)
        assert math.isnan(out[1])

    def test_leave_one_out_matches_direct(self):
        rng = np.random.default_rng(3)
        d = rng.uniform(0.1, 5, size=(6, 4))
        d[2, 1] = np.nan
        w = np.array([0.1, 0.2, 0.3, 0.4])
        for p in (0.0, 0.5, 2.0):
            loo = combine_leave_one_out(d, w, p)
            for j in range(4):
                keep = [c for c in range(4) if c != j]
                assert_allclose(loo[:, j], combine(d[:, keep], w[keep], p), rtol=1e-12)


class TestFeatureDifference:
    def test_nominal_unequal(self):
        f = FeatureSchema("c", FeatureKind.NOMINAL)
        assert feature_difference(f, 0.0, 1.0) == 1.0

    def test_nominal_equal_under_uncertainty(self):
        f = FeatureSchema("c", FeatureKind.NOMINAL)
        conf = np.array([[0.8, 0.2], [0.1, 0.9]])
        assert feature_difference(f, 0.0, 0.0, confusion=conf, mode="lk-normal") == pytest.approx(0.2)
        assert feature_difference(f, 1.0, 1.0, confusion=np.eye(2), mode="lk-normal") == 1e-6
        assert feature_difference(f, 1.0, 1.0) == 0.0

    def test_cyclic_wraparound(self):
        f = FeatureSchema("h", FeatureKind.CYCLIC, period=24)
        assert feature_difference(f, 23.0, 1.0) == pytest.approx(2.0)

    def test_ordinal_rank_distance(self):
        f = FeatureSchema("o", FeatureKind.ORDINAL, levels=("a", "b", "c", "d"))
        assert feature_difference(f, 0.0, 3.0) == 3.0

    def test_continuous_lk(self):
        f = FeatureSchema("v")
        assert feature_difference(f, 100.0, 100.0, deviation=10.0, mode="lk-normal") == pytest.approx(11.2838, abs=1e-3)


class TestCaseDistance:
    schema = [FeatureSchema("a", weight=0.5), FeatureSchema("b", weight=0.5)]

    def test_identical_mode_none(self):
        cfg = MetricConfig(p=0.0, mode="none")
        assert case_distance([1.0, 2.0], [1.0, 2.0], self.schema, cfg, None) == 0.0

    def test_lk_strictly_positive(self):
        cfg = MetricConfig(p=0.0)
        assert case_distance([1.0, 2.0], [1.0, 2.0], self.schema, cfg, deviations([0.1, 0.2])) > 0

    def test_uncertainty_changes_nearest(self):
        x, y, z = np.array([1.1, 100.0]), np.array([1.2, 10.0]), np.array([1.1, 10.01])
        none = MetricConfig(p=0.0, mode="none")
        assert case_distance(z, x, self.schema, none, None) == 0.0
        assert case_distance(z, x, self.schema, none, None) < case_distance(z, y, self.schema, none, None)
        lk = MetricConfig(p=0.0)
        dev = deviations([10.0, 0.01])
        assert case_distance(z, y, self.schema, lk, dev) < case_distance(z, x, self.schema, lk, dev)

    def test_scaling_identity_at_p0(self):
        rng = np.random.default_rng(5)
        cfg = MetricConfig(p=0.0, mode="none")
        schema = [FeatureSchema("a", weight=0.2), FeatureSchema("b", weight=0.3), FeatureSchema("c", weight=0.5)]
        for _ in range(20):
            x, y = rng.uniform(-5, 5, 3), rng.uniform(-5, 5, 3)
            scale = np.array([1.0, 1000.0, 1.0])
            d0 = case_distance(x, y, schema, cfg, None)
            d1 = case_distance(x * scale, y * scale, schema, cfg, None)
            assert d1 == pytest.approx(d0 * 1000.0 ** 0.3, rel=1e-10)

    def test_missing_intersection_renormalizes(self):
        cfg = MetricConfig(p=1.0, mode="none")
        assert case_distance([1.0, np.nan], [3.0, 5.0], self.schema, cfg, None) == pytest.approx(2.0)

    def test_no_shared_feature(self):
        cfg = MetricConfig(p=1.0, mode="none")
        with pytest.raises(InfeasibleError):
            case_distance([1.0, np.nan], [np.nan, 5.0], self.schema, cfg, None)

    def test_negative_p_rejected(self):
        with pytest.raises(UsageError):
            MetricConfig(p=-1.0)


class TestDeviationVector:
    def test_positive_required(self):
        with pytest.raises(ValueError):
            deviations([0.0, 1.0])

    def test_confusion_rows(self):
        with pytest.raises(ValueError):
            DeviationVector(np.array([1.0]), (np.array([[0.5, 0.4], [0.0, 1.0]]),), np.array([1.0]))

    def test_residual_norm_homogeneous(self):
        r = np.array([0.5, 2.0])
        w = np.array([0.5, 0.5])
        assert residual_norm(2 * r, w, 0.0) == pytest.approx(2 * residual_norm(r, w, 0.0))
