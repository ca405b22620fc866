import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pcqa import diffcore as dc
from pcqa.alignment import OpinionScoreDistribution
from pcqa.losses import (
    AxisMismatch,
    DegenerateBatch,
    LossWeights,
    ThetaOutOfRange,
    cdf_from_osd,
    contrastive_loss,
    emd_loss,
    quantile,
    quantile_loss,
    total_loss,
)

ASC = np.arange(1.0, 6.0)
Q_DESC = np.array([5.0, 4.0, 3.0, 2.0, 1.0])


def osd(p, anchors=ASC):
    return OpinionScoreDistribution(np.asarray(p, float), anchors)


def naive_quantile(xs, cdf, theta):
    """Walk the knots left to right and interpolate the first crossing."""
    prev_x, prev_c = xs[0] - (xs[1] - xs[0]), 0.0
    for x, c in zip(xs, cdf):
        if c >= theta:
            return prev_x + (theta - prev_c) / (c - prev_c) * (x - prev_x)
        prev_x, prev_c = x, c
    return xs[-1]


simplex5 = st.lists(st.floats(0.01, 1.0), min_size=5, max_size=5).map(lambda v: np.array(v) / sum(v))


class TestCdf:
    def test_point_mass_at_top(self):
        c = cdf_from_osd(osd([0, 0, 0, 0, 1]))
        np.testing.assert_array_equal(c.cumulative, [0, 0, 0, 0, 1])

    def test_uniform(self):
        c = cdf_from_osd(osd(np.full(5, 0.2)))
        np.testing.assert_allclose(c.cumulative, [0.2, 0.4, 0.6, 0.8, 1.0], atol=1e-15)

    def test_descending_anchors_are_sorted(self):
        c = cdf_from_osd(osd([1, 0, 0, 0, 0], Q_DESC))
        np.testing.assert_array_equal(c.scores, ASC)
        np.testing.assert_array_equal(c.cumulative, [0, 0, 0, 0, 1])

    def test_prefix_sum_oracle(self, rng):
        p = rng.dirichlet(np.ones(5))
        c = cdf_from_osd(osd(p))
        acc, expect = 0.0, []
        for v in p:
            acc += v
            expect.append(acc)
        np.testing.assert_allclose(c.cumulative, expect, atol=1e-15)


class TestEmd:
    def test_adjacent_point_masses(self):
        # CDFs (1,1,1,1,1) vs (0,1,1,1,1)
        val = emd_loss(osd([1, 0, 0, 0, 0]), osd([0, 1, 0, 0, 0]))
        assert abs(val - math.sqrt(1 / 5)) < 1e-9
        assert abs(val - 0.447214) < 1e-6

    def test_identical_is_zero(self, rng):
        p = rng.dirichlet(np.ones(5))
        assert emd_loss(osd(p), osd(p)) == 0.0

    def test_prediction_order_follows_anchors(self):
        # the same distribution stated over descending anchors
        assert emd_loss(osd([0, 0, 0, 0, 1], Q_DESC), osd([1, 0, 0, 0, 0])) == 0.0

    def test_truth_beyond_anchor_range(self):
        with pytest.raises(AxisMismatch):
            emd_loss(osd([0.2] * 5), osd([0.2] * 5, ASC + 1))

    def test_truth_on_finer_option_grid(self):
        # options 0.5 and 1 both fall at or below anchor 1
        truth = OpinionScoreDistribution(np.array([0.5, 0.5]), np.array([0.5, 1.0]))
        assert emd_loss(osd([1, 0, 0, 0, 0]), truth) == 0.0

    @settings(max_examples=1000)
    @given(simplex5, simplex5)
    def test_symmetric(self, a, b):
        assert abs(emd_loss(osd(a), osd(b)) - emd_loss(osd(b), osd(a))) < 1e-12

    @settings(max_examples=1000)
    @given(simplex5, simplex5)
    def test_identity_of_indiscernibles(self, a, b):
        d = emd_loss(osd(a), osd(b))
        assert d >= 0.0
        same_cdf = np.allclose(np.cumsum(a), np.cumsum(b), atol=0, rtol=0)
        assert (d == 0.0) == same_cdf


class TestQuantile:
    def test_point_mass_at_top(self):
        # knots (0,0)..(4,0),(5,1): theta 0.5 lands mid final segment
        assert quantile(cdf_from_osd(osd([0, 0, 0, 0, 1])), 0.5) == pytest.approx(4.5, abs=1e-12)

    def test_uniform_median(self):
        # prefix CDF 0.4 at 2 and 0.6 at 3
        assert quantile(cdf_from_osd(osd(np.full(5, 0.2))), 0.5) == pytest.approx(2.5, abs=1e-12)

    def test_leftmost_crossing(self):
        # plateau at 0.5 from anchor 2 to 4: the leftmost score is 2
        c = cdf_from_osd(osd([0.25, 0.25, 0.0, 0.0, 0.5]))
        assert quantile(c, 0.5) == pytest.approx(2.0, abs=1e-12)

    def test_first_segment_uses_left_knot(self):
        # mass 0.4 at anchor 1 rises from (0, 0)
        assert quantile(cdf_from_osd(osd([0.4, 0.6, 0, 0, 0])), 0.2) == pytest.approx(0.5, abs=1e-12)

    def test_theta_to_one(self, rng):
        c = cdf_from_osd(osd(rng.dirichlet(np.ones(5))))
        assert quantile(c, 1 - 1e-12) == pytest.approx(5.0, abs=1e-6)

    @pytest.mark.parametrize("theta", [0.0, 1.0, -0.1, 1.5])
    def test_theta_outside_open_interval(self, theta):
        with pytest.raises(ThetaOutOfRange):
            quantile(cdf_from_osd(osd(np.full(5, 0.2))), theta)

    @settings(max_examples=300)
    @given(simplex5, st.floats(0.01, 0.99))
    def test_matches_knot_walk(self, p, theta):
        c = cdf_from_osd(osd(p))
        expect = naive_quantile(ASC, np.cumsum(p), theta)
        assert quantile(c, theta) == pytest.approx(expect, abs=1e-9)


class TestQuantileLoss:
    def test_translated_by_one_step(self):
        truth = osd([0.1, 0.3, 0.4, 0.2, 0.0])
        pred = osd([0.0, 0.1, 0.3, 0.4, 0.2])
        assert abs(quantile_loss(pred, truth) - 1.0) < 1e-9

    def test_translated_on_half_step_grid(self):
        grid = np.array([1.0, 1.5, 2.0, 2.5, 3.0])
        truth = osd([0.2, 0.5, 0.3, 0.0, 0.0], grid)
        pred = osd([0.0, 0.2, 0.5, 0.3, 0.0], grid)
        assert abs(quantile_loss(pred, truth) - 0.5) < 1e-9

    def test_identical_is_zero(self, rng):
        p = rng.dirichlet(np.ones(5))
        assert quantile_loss(osd(p), osd(p)) == 0.0

    @settings(max_examples=200)
    @given(simplex5, simplex5)
    def test_non_negative(self, a, b):
        assert quantile_loss(osd(a), osd(b)) >= 0.0


class TestContrastive:
    def test_two_anchor_oracle(self):
        # positives at cosine 1, negatives at cosine -1, tau 1
        c = np.array([[1.0, 0.0], [-1.0, 0.0]])
        loss = contrastive_loss(c, c.copy(), tau1=1.0).item()
        expect = -math.log(math.e / (math.e + math.exp(-1)))
        assert abs(loss - expect) < 1e-9
        assert abs(loss - 0.126928) < 1e-6

    @pytest.mark.parametrize("n", [2, 3, 8])
    def test_identical_features_give_log_n(self, n):
        f = np.tile([[0.3, -1.2, 0.5]], (n, 1))
        assert contrastive_loss(f, f, tau1=0.5).item() == pytest.approx(math.log(n), abs=1e-12)

    def test_batched_views_equal_flat(self, rng):
        c, d = rng.normal(size=(2, 3, 6)), rng.normal(size=(2, 3, 6))
        a = contrastive_loss(c, d).item()
        b = contrastive_loss(c.reshape(6, 6), d.reshape(6, 6)).item()
        assert a == b

    def test_stronger_positive_lowers_loss(self, rng):
        c = rng.normal(size=(4, 5))
        d = rng.normal(size=(4, 5))
        before = contrastive_loss(c, d, tau1=0.3).item()
        d2 = d.copy()
        d2[0] = 0.5 * d[0] + 0.5 * c[0] / np.linalg.norm(c[0]) * np.linalg.norm(d[0])
        assert np.dot(c[0], d2[0]) / np.linalg.norm(d2[0]) > np.dot(c[0], d[0]) / np.linalg.norm(d[0])
        assert contrastive_loss(c, d2, tau1=0.3).item() < before

    def test_exclude_positive_reading(self):
        c = np.array([[1.0, 0.0], [-1.0, 0.0]])
        # only the negative remains in the denominator
        assert contrastive_loss(c, c, tau1=1.0, exclude_positive=True).item() == pytest.approx(-2.0, abs=1e-12)

    def test_single_pair_rejected(self):
        with pytest.raises(DegenerateBatch):
            contrastive_loss(np.ones((1, 3)), np.ones((1, 3)))

    def test_shape_mismatch(self):
        with pytest.raises(dc.ShapeMismatch):
            contrastive_loss(np.ones((2, 3)), np.ones((2, 4)))


class TestTotal:
    def test_default_weights(self):
        assert total_loss(1.0, 1.0, 1.0, LossWeights(alpha=1 / 5)) == pytest.approx(1.28, abs=1e-12)

    def test_beta_zero_drops_contrastive(self):
        assert total_loss(1.0, 1.0, 123.0, LossWeights(alpha=0.2, beta=0.0)) == pytest.approx(1.2)

    def test_all_zero(self):
        assert total_loss(0.0, 0.0, 0.0) == 0.0

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(beta=-0.1)
