"""Chi-square CDF and quantiles from the regularized incomplete gamma function.

The series / continued-fraction split follows the classic Numerical
Recipes scheme: the series for ``x < a + 1`` and Lentz's continued
fraction for the upper tail otherwise.
"""

from __future__ import annotations

import math

from scipy.optimize import brentq

from .errors import InputError, NumericError

_EPS = 1e-16
_TINY = 1e-300
_MAX_ITER = 10_000


def _gamma_series(a, x):
    term = 1.0 / a
    total = term
    ap = a
    for _ in range(_MAX_ITER):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _EPS:
            return total * math.exp(-x + a * math.log(x) - math.lgamma(a))
    raise NumericError(f"incomplete gamma series failed for a={a}, x={x}", residual=abs(term))


def _gamma_continued_fraction(a, x):
    b = x + 1.0 - a
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, _MAX_ITER):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _TINY:
            d = _TINY
        c = b + an / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h
    raise NumericError(
        f"incomplete gamma continued fraction failed for a={a}, x={x}",
        residual=abs(delta - 1.0),
    )


def regularized_gamma_p(a, x):
    """Lower regularized incomplete gamma ``P(a, x)``."""
    if a <= 0:
        raise InputError("shape parameter must be positive")
    if x < 0:
        raise InputError("x must be non-negative")
    if x == 0:
        return 0.0
    if math.isinf(x):
        return 1.0
    if x < a + 1.0:
        return min(1.0, _gamma_series(a, x))
    return max(0.0, 1.0 - _gamma_continued_fraction(a, x))


def regularized_gamma_q(a, x):
    """Upper regularized incomplete gamma ``Q(a, x) = 1 - P(a, x)``."""
    if a <= 0:
        raise InputError("shape parameter must be positive")
    if x < 0:
        raise InputError("x must be non-negative")
    if x == 0:
        return 1.0
    if x < a + 1.0:
        return max(0.0, 1.0 - _gamma_series(a, x))
    return _gamma_continued_fraction(a, x)


def _check_df(k):
    if int(k) != k or k < 1:
        raise InputError(f"degrees of freedom must be a positive integer, got {k!r}")
    return int(k)


def chi_square_cdf(k, x):
    """CDF of the chi-square distribution with ``k`` degrees of freedom."""
    k = _check_df(k)
    if x < 0:
        raise InputError("chi-square CDF is defined for x >= 0")
    return regularized_gamma_p(k / 2.0, x / 2.0)


def chi_square_pdf(k, x):
    k = _check_df(k)
    if x <= 0:
        return 0.5 if (k == 2 and x == 0) else 0.0
    a = k / 2.0
    return math.exp((a - 1) * math.log(x) - x / 2 - a * math.log(2.0) - math.lgamma(a))


def chi_square_quantile(k, prob):
    """Inverse of :func:`chi_square_cdf` by bracketed root finding."""
    k = _check_df(k)
    if not 0.0 < prob < 1.0:
        raise InputError(f"probability must lie in (0, 1), got {prob!r}")
    # bracket [0, hi] with CDF(hi) > prob
    hi = max(1.0, 2.0 * k)
    while chi_square_cdf(k, hi) < prob:
        hi *= 2.0
    upper_tail = prob > 0.5
    if upper_tail:
        # the upper tail keeps relative precision near prob -> 1
        q = 1.0 - prob
        f = lambda x: q - regularized_gamma_q(k / 2.0, x / 2.0)  # noqa: E731
    else:
        f = lambda x: chi_square_cdf(k, x) - prob  # noqa: E731
    return brentq(f, 0.0, hi, xtol=1e-13, rtol=4 * 2.220446049250313e-16, maxiter=500)
