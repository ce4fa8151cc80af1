"""Spherically symmetric kernels, their moment constants and local weights.

Two families are provided:

``gaussian``
    The standard multivariate normal density,
    ``K(u) = (2 pi)^(-p/2) exp(-|u|^2 / 2)``.
``epanechnikov``
    The spherical Epanechnikov density ``K(u) = c_p (1 - |u|^2)`` on the
    unit ball, zero outside. Rows outside the support get exactly zero
    weight.

Every kernel is written as ``K(u) = k(|u|)`` so moments reduce to one
dimensional radial integrals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import integrate

from .errors import InputError, NumericError

FAMILIES = ("gaussian", "epanechnikov")

_ALIASES = {
    "gaussian": "gaussian",
    "normal": "gaussian",
    "epanechnikov": "epanechnikov",
    "epanechnikov-spherical": "epanechnikov",
}


def _unit_ball_volume(p):
    return math.pi ** (p / 2) / math.gamma(p / 2 + 1)


def _sphere_area(p):
    # surface area of the unit sphere in R^p
    return 2 * math.pi ** (p / 2) / math.gamma(p / 2)


@dataclass(frozen=True)
class KernelSpec:
    """A kernel family in a fixed dimension ``p``."""

    family: str = "gaussian"
    p: int = 1

    def __post_init__(self):
        family = _ALIASES.get(str(self.family).lower())
        if family is None:
            raise InputError(
                f"unknown kernel family {self.family!r}; expected one of {FAMILIES}"
            )
        object.__setattr__(self, "family", family)
        if int(self.p) != self.p or self.p < 1:
            raise InputError(f"kernel dimension must be a positive integer, got {self.p!r}")
        object.__setattr__(self, "p", int(self.p))

    @property
    def support_radius(self):
        return 1.0 if self.family == "epanechnikov" else math.inf

    def radial(self, r):
        """Profile ``k(r)`` with ``K(u) = k(|u|)``; vectorized over ``r``."""
        r = np.asarray(r, dtype=float)
        if self.family == "gaussian":
            return (2 * math.pi) ** (-self.p / 2) * np.exp(-0.5 * r * r)
        c = (self.p + 2) / (2 * _unit_ball_volume(self.p))
        return np.where(r <= 1.0, c * (1.0 - r * r), 0.0)

    def radial_sq(self, r2):
        """Profile evaluated at squared radius; avoids a square root."""
        r2 = np.asarray(r2, dtype=float)
        if self.family == "gaussian":
            return (2 * math.pi) ** (-self.p / 2) * np.exp(-0.5 * r2)
        c = (self.p + 2) / (2 * _unit_ball_volume(self.p))
        return np.where(r2 <= 1.0, c * (1.0 - r2), 0.0)


@dataclass(frozen=True)
class KernelMoments:
    """Moment constants of a kernel.

    ``mu2 = int u_1^2 K``, ``mu4 = int u_1^4 K``, ``J0 = int K^2`` and
    ``J2 = int u_1^2 K^2``.
    """

    mu2: float
    J0: float
    J2: float
    p: int
    mu4: float


def kernel_eval(spec, u):
    """Evaluate ``K(u)``.

    ``u`` may be a single ``p``-vector or an ``(m, p)`` array of points,
    in which case an ``m``-vector is returned.
    """
    u = np.asarray(u, dtype=float)
    if u.shape[-1:] != (spec.p,) or u.ndim > 2:
        raise InputError(f"expected points of dimension {spec.p}, got shape {u.shape}")
    r2 = np.einsum("...i,...i->...", u, u)
    out = spec.radial_sq(r2)
    return float(out) if u.ndim == 1 else out


def _radial_integral(func, spec, power):
    """``S_p * int_0^R r^(p-1+power) func(r) dr`` with adaptive quadrature."""
    upper = spec.support_radius
    value, abserr = integrate.quad(
        lambda r: r ** (spec.p - 1 + power) * func(r),
        0.0,
        upper,
        epsabs=0.0,
        epsrel=1e-10,
        limit=200,
    )
    if not math.isfinite(value) or abserr > 1e-8 * max(abs(value), 1e-300):
        raise NumericError(
            f"radial quadrature did not converge (value={value}, error={abserr})",
            residual=abserr,
        )
    return _sphere_area(spec.p) * value


@lru_cache(maxsize=64)
def compute_moments(spec):
    """Moment constants of ``spec``.

    Closed forms are used for the gaussian family; any other family goes
    through radial quadrature (relative tolerance 1e-8).
    """
    p = spec.p
    if spec.family == "gaussian":
        j0 = (4 * math.pi) ** (-p / 2)
        return KernelMoments(mu2=1.0, J0=j0, J2=0.5 * j0, p=p, mu4=3.0)
    return quadrature_moments(spec)


def quadrature_moments(spec):
    """Moments by radial quadrature, for any spherical kernel."""
    p = spec.p
    k = lambda r: float(spec.radial(r))  # noqa: E731
    k2 = lambda r: float(spec.radial(r)) ** 2  # noqa: E731
    mu2 = _radial_integral(k, spec, 2) / p
    mu4 = 3.0 * _radial_integral(k, spec, 4) / (p * (p + 2))
    j0 = _radial_integral(k2, spec, 0)
    j2 = _radial_integral(k2, spec, 2) / p
    return KernelMoments(mu2=mu2, J0=j0, J2=j2, p=p, mu4=mu4)


def check_bandwidth(h):
    h = float(h)
    if not (h > 0 and math.isfinite(h)):
        raise InputError(f"bandwidth must be a positive finite number, got {h!r}")
    return h


def weight_vector(X, x, h, spec):
    """Kernel weights ``K((X_i - x) / h)`` for every row of ``X``."""
    h = check_bandwidth(h)
    X = np.asarray(X, dtype=float)
    x = np.asarray(x, dtype=float)
    if X.ndim != 2 or x.ndim != 1 or X.shape[1] != x.shape[0]:
        raise InputError(f"feature matrix {X.shape} does not match target {x.shape}")
    if x.shape[0] != spec.p:
        raise InputError(f"kernel dimension {spec.p} does not match target length {x.shape[0]}")
    d = (X - x) / h
    return spec.radial_sq(np.einsum("ij,ij->i", d, d))


def default_bandwidth(n, p, scale=1.0):
    """Rule-of-thumb bandwidth ``scale * n^(-1/(p+4))``."""
    if n < 1 or p < 1 or not scale > 0:
        raise InputError("default_bandwidth needs n >= 1, p >= 1 and scale > 0")
    return float(scale) * float(n) ** (-1.0 / (p + 4))
