"""Tests for Rubin's-rules pooling."""

import math
from dataclasses import dataclass, field

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as hs

from oracles import rubin_pool_reference
from recurmi.errors import PoolingError
from recurmi.pooling import PooledFit, pool_rubin, pooled_from_single

Z975 = 1.959963984540054


@dataclass
class FakeFit:
    beta: tuple
    se: tuple
    converged: bool = True


def fits_from_columns(estimates, ses):
    """Build m fits from per-imputation rows of estimates and ses."""
    return [FakeFit(tuple(q), tuple(s)) for q, s in zip(estimates, ses)]


class TestPoolRubin:
    def test_hand_example(self):
        # m=3, estimates {0.4, 0.5, 0.6}, all variances 0.01
        p = pool_rubin([FakeFit((q,), (0.1,)) for q in (0.4, 0.5, 0.6)])
        assert p.qbar[0] == pytest.approx(0.5, abs=1e-15)
        assert p.within_var[0] == pytest.approx(0.01, abs=1e-15)
        assert p.between_var[0] == pytest.approx(0.01, abs=1e-15)
        assert p.total_var[0] == pytest.approx(0.01 + (4.0 / 3.0) * 0.01, abs=1e-15)
        assert p.df[0] == pytest.approx(6.125, abs=1e-12)

    def test_df_formula_is_exact_on_exact_inputs(self):
        # the float noise in the hand example above comes only from
        # representing 0.4 and 0.6; the formula itself is exact
        m, w, b = 3, 0.01, 0.01
        assert (m - 1) * (1 + w / ((1 + 1 / m) * b)) ** 2 == 6.125

    def test_degenerate_identical_fits(self):
        p = pool_rubin([FakeFit((0.5,), (0.2,)) for _ in range(5)])
        assert p.between_var[0] == 0.0
        assert p.total_var[0] == pytest.approx(0.04, abs=1e-15)
        assert math.isinf(p.df[0])
        assert p.ci_low[0] == pytest.approx(0.5 - Z975 * 0.2, abs=1e-12)
        assert p.ci_high[0] == pytest.approx(0.5 + Z975 * 0.2, abs=1e-12)

    def test_matches_reference_implementation(self):
        rng = np.random.default_rng(4)
        est = rng.normal(0.3, 0.2, size=(7, 3))
        ses = rng.uniform(0.05, 0.3, size=(7, 3))
        p = pool_rubin(fits_from_columns(est, ses))
        for j in range(3):
            qbar, w, b, t, df = rubin_pool_reference(
                list(est[:, j]), list(ses[:, j] ** 2)
            )
            assert p.qbar[j] == pytest.approx(qbar, rel=1e-12)
            assert p.within_var[j] == pytest.approx(w, rel=1e-12)
            assert p.between_var[j] == pytest.approx(b, rel=1e-10)
            assert p.total_var[j] == pytest.approx(t, rel=1e-10)
            assert p.df[j] == pytest.approx(df, rel=1e-9)

    @given(
        hs.integers(min_value=2, max_value=12),
        hs.integers(min_value=1, max_value=4),
        hs.integers(min_value=0, max_value=10**6),
    )
    @settings(max_examples=60, deadline=None)
    def test_total_variance_identity(self, m, p_dim, seed):
        rng = np.random.default_rng(seed)
        est = rng.normal(0.0, 1.0, size=(m, p_dim))
        ses = rng.uniform(0.01, 2.0, size=(m, p_dim))
        p = pool_rubin(fits_from_columns(est, ses))
        lhs = p.total_var
        rhs = p.within_var + (1 + 1 / m) * p.between_var
        np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-15)
        assert np.all(p.ci_low < p.ci_high)

    def test_pooled_interval_wider_than_complete_data(self):
        varied = pool_rubin(
            [FakeFit((0.4,), (0.1,)), FakeFit((0.5,), (0.1,)), FakeFit((0.6,), (0.1,))]
        )
        single = pooled_from_single(FakeFit((0.5,), (0.1,)))
        assert varied.total_var[0] > varied.within_var[0]
        pooled_len = varied.ci_high[0] - varied.ci_low[0]
        single_len = single.ci_high[0] - single.ci_low[0]
        assert pooled_len > single_len

    def test_needs_at_least_two_fits(self):
        with pytest.raises(PoolingError):
            pool_rubin([FakeFit((0.5,), (0.1,))])

    def test_unconverged_fits_listed(self):
        fits = [
            FakeFit((0.5,), (0.1,)),
            FakeFit((0.5,), (0.1,), converged=False),
            FakeFit((0.5,), (0.1,)),
            FakeFit((0.5,), (0.1,), converged=False),
        ]
        with pytest.raises(PoolingError) as exc:
            pool_rubin(fits)
        assert exc.value.failed_indices == (2, 4)

    def test_mismatched_coefficient_sets(self):
        with pytest.raises(PoolingError):
            pool_rubin([FakeFit((0.5,), (0.1,)), FakeFit((0.5, 0.2), (0.1, 0.1))])


class TestPooledFromSingle:
    def test_wraps_fit_with_normal_interval(self):
        p = pooled_from_single(FakeFit((0.3, -0.2), (0.05, 0.4)))
        assert p.m == 1
        np.testing.assert_array_equal(p.between_var, 0.0)
        np.testing.assert_array_equal(p.total_var, p.within_var)
        assert np.all(np.isinf(p.df))
        assert p.ci_high[0] == pytest.approx(0.3 + Z975 * 0.05, abs=1e-12)

    def test_rejects_unconverged(self):
        with pytest.raises(PoolingError):
            pooled_from_single(FakeFit((0.5,), (0.1,), converged=False))


class TestPooledFitValidation:
    def test_identity_violation_rejected(self):
        ones = np.ones(1)
        with pytest.raises(ValueError):
            PooledFit(ones, ones, ones, 5.0 * ones, ones, -ones, ones, m=3)

    def test_unordered_interval_rejected(self):
        ones = np.ones(1)
        total = ones + (1 + 1 / 3) * ones
        with pytest.raises(ValueError):
            PooledFit(ones, ones, ones, total, ones, ones, ones, m=3)
