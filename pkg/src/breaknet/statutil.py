"""
Shared numerical statistics: great-circle distance, simple linear
regression, information criteria and tail probabilities.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy import special, stats

EARTH_RADIUS_KM = 6371.0


def haversine(lat1, lon1, lat2, lon2):
    """
    Great-circle distance between two points on a sphere of radius 6371 km.

    Parameters
    ----------
    lat1, lon1, lat2, lon2 : float
        Coordinates in decimal degrees.

    Returns
    -------
    float
        Distance in kilometres.
    """
    for lat in (lat1, lat2):
        if not -90.0 <= lat <= 90.0:
            raise ValueError(f"latitude out of range: {lat}")
    for lon in (lon1, lon2):
        if not -180.0 <= lon <= 180.0:
            raise ValueError(f"longitude out of range: {lon}")
    phi1, phi2 = math.radians(lat1), math.radians(lat2)
    dphi = phi2 - phi1
    dlam = math.radians(lon2 - lon1)
    a = math.sin(dphi / 2) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlam / 2) ** 2
    # clamp guards asin against a rounding to 1 + eps at antipodes
    return 2 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(a)))


@dataclass(frozen=True)
class OlsResult:
    slope: float
    intercept: float
    r_squared: float
    p_value: float
    n: int


def ols(x, y):
    """Simple least-squares regression of y on x with a two-sided slope test."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-d sequences of equal length")
    n = x.size
    if n < 3:
        raise ValueError("need at least 3 points")
    if np.ptp(x) == 0:
        raise ValueError("x is constant; slope undefined")
    xm, ym = x.mean(), y.mean()
    sxx = np.sum((x - xm) ** 2)
    sxy = np.sum((x - xm) * (y - ym))
    syy = np.sum((y - ym) ** 2)
    slope = sxy / sxx
    intercept = ym - slope * xm
    if syy == 0:
        return OlsResult(0.0, float(ym), 0.0, 1.0, n)
    r2 = min(1.0, max(0.0, sxy * sxy / (sxx * syy)))
    dof = n - 2
    sse = max(syy - slope * sxy, 0.0)
    if sse == 0:
        p = 0.0
    else:
        se = math.sqrt(sse / dof / sxx)
        p = 2 * stats.t.sf(abs(slope / se), dof)
    return OlsResult(float(slope), float(intercept), float(r2), float(p), n)


def aic(log_likelihood, k):
    return -2.0 * log_likelihood + 2.0 * k


def aicc(log_likelihood, k, n):
    """Small-sample corrected AIC; undefined when ``n <= k + 1``."""
    if n <= k + 1:
        raise ValueError(f"AICc undefined for n={n}, k={k} (need n > k + 1)")
    return -2.0 * log_likelihood + 2.0 * k + 2.0 * k * (k + 1) / (n - k - 1)


def chi_sq_upper_tail(x, df):
    """P(X > x) for X ~ chi-square(df), via the regularized upper gamma."""
    if df < 1 or int(df) != df:
        raise ValueError(f"df must be a positive integer, got {df}")
    if x < 0:
        raise ValueError("chi-square statistic must be non-negative")
    if x == 0:
        return 1.0
    return float(special.gammaincc(df / 2.0, x / 2.0))


def normal_upper_tail(z):
    """P(Z > z) for a standard normal Z."""
    return float(0.5 * special.erfc(z / math.sqrt(2.0)))
