"""Tests for haversine, OLS, information criteria and tail probabilities."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from breaknet.statutil import (
    EARTH_RADIUS_KM, aic, aicc, chi_sq_upper_tail, haversine, normal_upper_tail, ols,
)

# Reference tails computed with mpmath at 40 significant digits
# (regularized upper incomplete gamma, complementary error function).
CHI_SQ_ORACLE = [
    (0.5, 1, 0.47950012218695346),
    (1.0, 1, 0.3173105078629141),
    (3.841459, 1, 0.049999994653195766),
    (10.0, 1, 0.0015654022580025497),
    (2.0, 2, 0.36787944117144232),
    (5.0, 3, 0.17179714429673314),
    (20.0, 4, 0.00049939922738733337),
    (0.1, 5, 0.99983768338807738),
    (30.0, 10, 0.00085664121077530039),
    (50.0, 1, 1.5374597944280349e-12),
]
NORMAL_ORACLE = [
    (0.0, 0.5),
    (0.5, 0.3085375387259869),
    (1.0, 0.15865525393145705),
    (1.959964, 0.024999999096442402),
    (3.0, 0.0013498980316300945),
    (5.0, 2.8665157187919391e-7),
    (8.0, 6.2209605742717841e-16),
]
# Spherical law of cosines at 40 digits (mpmath), R = 6371 km.
NYC_LA_ORACLE_KM = 3935.74625460972

lat = st.floats(-90, 90, allow_nan=False)
lon = st.floats(-180, 180, allow_nan=False)


class TestHaversine:
    def test_identical_points(self):
        assert haversine(12.5, -40.0, 12.5, -40.0) == 0.0

    def test_antipodal_poles(self):
        assert haversine(90, 0, -90, 0) == pytest.approx(math.pi * EARTH_RADIUS_KM, abs=1e-9)
        assert haversine(90, 0, -90, 0) == pytest.approx(20015.09, abs=0.01)

    def test_nyc_la_against_independent_oracle(self):
        d = haversine(40.7128, -74.0060, 34.0522, -118.2437)
        assert abs(d - NYC_LA_ORACLE_KM) / NYC_LA_ORACLE_KM < 0.005
        assert d == pytest.approx(3936, rel=0.005)

    @pytest.mark.parametrize("args", [(91, 0, 0, 0), (0, 0, -90.5, 0), (0, 181, 0, 0), (0, 0, 0, -200)])
    def test_out_of_range(self, args):
        with pytest.raises(ValueError):
            haversine(*args)

    @given(lat, lon, lat, lon)
    def test_symmetric_and_non_negative(self, a, b, c, d):
        assert haversine(a, b, c, d) >= 0
        assert haversine(a, b, c, d) == pytest.approx(haversine(c, d, a, b), abs=1e-9)

    @settings(max_examples=300)
    @given(lat, lon, lat, lon, lat, lon)
    def test_triangle_inequality(self, a1, o1, a2, o2, a3, o3):
        d12 = haversine(a1, o1, a2, o2)
        d23 = haversine(a2, o2, a3, o3)
        d13 = haversine(a1, o1, a3, o3)
        assert d13 <= d12 + d23 + 1e-9


class TestOls:
    def test_perfect_line(self):
        r = ols([0, 1, 2, 3], [1, 3, 5, 7])
        assert r.slope == pytest.approx(2.0)
        assert r.intercept == pytest.approx(1.0)
        assert r.r_squared == pytest.approx(1.0)

    def test_constant_y(self):
        r = ols([1, 2, 3, 4], [5, 5, 5, 5])
        assert r.slope == 0.0
        assert r.r_squared == 0.0

    def test_three_point_example(self):
        # slope 1/2, residual variance 1.5 on one dof, t = 1/sqrt(3), p = 2/3
        r = ols([1, 2, 3], [1, 3, 2])
        assert r.slope == pytest.approx(0.5, abs=1e-12)
        assert r.intercept == pytest.approx(1.0, abs=1e-12)
        assert r.r_squared == pytest.approx(0.25, abs=1e-12)
        assert r.p_value == pytest.approx(2 / 3, abs=1e-10)
        assert r.n == 3

    def test_constant_x_rejected(self):
        with pytest.raises(ValueError):
            ols([2, 2, 2], [1, 2, 3])

    def test_too_few_points(self):
        with pytest.raises(ValueError):
            ols([1, 2], [1, 2])

    @given(
        st.lists(st.floats(-100, 100), min_size=4, max_size=30),
        st.floats(0.1, 50), st.floats(-50, 50), st.floats(0.1, 50), st.floats(-50, 50),
    )
    def test_r_squared_affine_invariant(self, xs, a, b, c, d):
        x = np.asarray(xs)
        if np.ptp(x) < 1e-3:
            return
        y = np.sin(x) + 0.1 * x
        if np.ptp(y) < 1e-3:
            return
        base = ols(x, y).r_squared
        assert 0.0 <= base <= 1.0
        assert ols(a * x + b, c * y + d).r_squared == pytest.approx(base, abs=1e-7)


class TestInformationCriteria:
    def test_aic(self):
        assert aic(-10.0, 3) == 26.0

    def test_aicc_without_parameters(self):
        assert aicc(-42.5, 0, 7) == 85.0

    def test_aicc_example(self):
        assert aicc(-100.0, 2, 10) == pytest.approx(204 + 12 / 7, abs=1e-12)
        assert aicc(-100.0, 2, 10) == pytest.approx(205.7142857, abs=1e-7)

    @pytest.mark.parametrize("k,n", [(2, 3), (2, 2), (0, 1)])
    def test_aicc_domain(self, k, n):
        with pytest.raises(ValueError):
            aicc(-1.0, k, n)

    @pytest.mark.parametrize("k", range(11))
    def test_aicc_converges_to_aic(self, k):
        assert abs(aicc(-123.4, k, 10**9) - aic(-123.4, k)) < 1e-6


class TestTails:
    def test_chi_sq_at_zero(self):
        for df in (1, 2, 7):
            assert chi_sq_upper_tail(0.0, df) == 1.0

    def test_chi_sq_critical_value(self):
        assert chi_sq_upper_tail(3.841459, 1) == pytest.approx(0.05, abs=1e-7)

    @pytest.mark.parametrize("x,df,expected", CHI_SQ_ORACLE)
    def test_chi_sq_oracle(self, x, df, expected):
        got = chi_sq_upper_tail(x, df)
        assert abs(got - expected) < 1e-8
        assert got == pytest.approx(expected, rel=1e-8)

    @pytest.mark.parametrize("z,expected", NORMAL_ORACLE)
    def test_normal_oracle(self, z, expected):
        got = normal_upper_tail(z)
        assert abs(got - expected) < 1e-8
        assert got == pytest.approx(expected, rel=1e-8)

    def test_normal_symmetry(self):
        assert normal_upper_tail(0.0) == 0.5
        assert normal_upper_tail(-1.3) == pytest.approx(1 - normal_upper_tail(1.3), abs=1e-15)

    @pytest.mark.parametrize("df", [0, -1, 1.5])
    def test_invalid_df(self, df):
        with pytest.raises(ValueError):
            chi_sq_upper_tail(1.0, df)

    @given(st.floats(0, 200), st.floats(0, 200), st.integers(1, 20))
    def test_chi_sq_monotone(self, a, b, df):
        lo, hi = sorted((a, b))
        assert chi_sq_upper_tail(lo, df) >= chi_sq_upper_tail(hi, df)

    @given(st.floats(-30, 30), st.floats(-30, 30))
    def test_normal_monotone(self, a, b):
        lo, hi = sorted((a, b))
        assert normal_upper_tail(lo) >= normal_upper_tail(hi)
