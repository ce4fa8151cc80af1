"""Bootstrap covariance, confidence sets, bias correction and coverage formulas."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from statistics import NormalDist

import numpy as np

from .chisq import chi_square_cdf, chi_square_quantile
from .errors import (
    DegenerateResampling,
    InputError,
    NotPositiveDefinite,
    PluginUnavailable,
    SingularDesign,
)
from .kernels import KernelSpec, check_bandwidth, compute_moments, weight_vector

MAX_FAILED_FRACTION = 0.2

BIAS_FORMULAS = ("half", "theorem")


def normal_quantile(prob):
    return NormalDist().inv_cdf(prob)


def _check_alpha(alpha):
    if not 0.0 < alpha < 1.0:
        raise InputError(f"alpha must lie in (0, 1), got {alpha!r}")
    return float(alpha)


@dataclass(frozen=True, eq=False)
class CovarianceEstimate:
    """Covariance of the stacked ``(m_hat, grad_hat)`` estimate."""

    matrix: np.ndarray
    n_boot: int
    method: str = "bootstrap"
    n_failed: int = 0

    def __post_init__(self):
        M = np.asarray(self.matrix, dtype=float)
        if M.ndim != 2 or M.shape[0] != M.shape[1]:
            raise InputError(f"covariance must be square, got shape {M.shape}")
        M = (M + M.T) / 2
        ev = np.linalg.eigvalsh(M)
        if ev[0] < -1e-8 * max(np.trace(M), 0.0):
            raise NotPositiveDefinite("covariance is not positive semi-definite", float(ev[0]))
        M.setflags(write=False)
        object.__setattr__(self, "matrix", M)

    @property
    def se_value(self):
        return math.sqrt(max(self.matrix[0, 0], 0.0))

    @property
    def gradient_block(self):
        return self.matrix[1:, 1:]


def _replicate(fit_fn, labeled, unlabeled, x, seed, index):
    rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
    lab = labeled.take(rng.integers(0, labeled.n, labeled.n))
    unl = None if unlabeled is None else unlabeled.take(rng.integers(0, unlabeled.n, unlabeled.n))
    try:
        return fit_fn(lab, unl, x).theta
    except SingularDesign:
        return None


def bootstrap_covariance(fit_fn, labeled, unlabeled, x, n_boot=200, seed=0, jobs=1):
    """Covariance of ``fit_fn`` over bootstrap resamples.

    Labeled and unlabeled rows are resampled independently with
    replacement, each at its original size. Replicate ``b`` draws from a
    stream seeded by ``(seed, b)``, so the result does not depend on
    ``jobs``. Replicates raising :class:`SingularDesign` are dropped; more
    than 20% dropped raises :class:`DegenerateResampling`.
    """
    if n_boot < 2:
        raise InputError("bootstrap needs n_boot >= 2")
    x = np.asarray(x, dtype=float)
    work = lambda b: _replicate(fit_fn, labeled, unlabeled, x, seed, b)  # noqa: E731
    if jobs and jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            thetas = list(pool.map(work, range(n_boot)))
    else:
        thetas = [work(b) for b in range(n_boot)]
    kept = [t for t in thetas if t is not None]
    n_failed = n_boot - len(kept)
    if n_failed > MAX_FAILED_FRACTION * n_boot or len(kept) < 2:
        raise DegenerateResampling(
            f"{n_failed} of {n_boot} bootstrap replicates had a singular design",
            n_failed,
            n_boot,
        )
    T = np.vstack(kept)
    cov = np.atleast_2d(np.cov(T, rowvar=False, ddof=1))
    return CovarianceEstimate(cov, n_boot=n_boot, method="bootstrap", n_failed=n_failed)


def plugin_covariance(n, h, density, noise_var, moments):
    """Leading-order conditional covariance of the conventional fit.

    Needs the true design density at the target and the noise variance,
    so it is only usable as a simulation-side oracle.
    """
    h = check_bandwidth(h)
    p = moments.p
    scale = noise_var / (n * h**p * density)
    diag = np.r_[moments.J0, np.full(p, moments.J2 / (moments.mu2**2 * h**2))]
    return CovarianceEstimate(scale * np.diag(diag), n_boot=0, method="plugin_asymptotic")


@dataclass(frozen=True, eq=False)
class BiasTerms:
    """Leading smoothing-bias terms at one target.

    ``b1`` is a coefficient: the value interval is shifted by ``h**2 * b1``.
    ``b2`` is the full gradient bias vector (the ``h**2`` is already in it).
    """

    b1: float
    b2: np.ndarray
    h: float
    source: str
    formula: str = "half"

    @property
    def value_shift(self):
        return self.h**2 * self.b1


@dataclass(frozen=True)
class ConfidenceInterval:
    lower: float
    upper: float
    alpha: float
    bias_corrected: bool
    center: float
    degenerate: bool = False

    def contains(self, value):
        return self.lower <= value <= self.upper

    @property
    def width(self):
        return self.upper - self.lower


@dataclass(frozen=True, eq=False)
class ConfidenceRegion:
    """Ellipsoid ``{v : (v - c - s)^T S (v - c - s) <= r2}``."""

    center: np.ndarray
    shape: np.ndarray
    radius_sq: float
    alpha: float
    bias_shift: np.ndarray | None = None

    def distance_sq(self, v):
        d = np.asarray(v, dtype=float) - self.center
        if self.bias_shift is not None:
            d = d - self.bias_shift
        return float(d @ self.shape @ d)

    def contains(self, v):
        return self.distance_sq(v) <= self.radius_sq

    def boundary_points(self, directions):
        """Map unit ``directions`` (rows) onto the ellipsoid surface."""
        directions = np.atleast_2d(directions)
        L = np.linalg.cholesky(np.linalg.inv(self.shape))
        pts = math.sqrt(self.radius_sq) * directions @ L.T + self.center
        if self.bias_shift is not None:
            pts = pts + self.bias_shift
        return pts


def ci_value(fit, cov, alpha=0.05, bias=None):
    """Normal interval for ``m(x)``, optionally shifted by the value bias."""
    alpha = _check_alpha(alpha)
    M = cov.matrix if isinstance(cov, CovarianceEstimate) else np.atleast_2d(cov)
    var = float(M[0, 0])
    if var < 0:
        raise InputError(f"negative variance {var}")
    shift = 0.0 if bias is None else bias.value_shift
    mid = fit.m_hat - shift
    if var == 0:
        return ConfidenceInterval(mid, mid, alpha, bias is not None, fit.m_hat, degenerate=True)
    half = normal_quantile(1 - alpha / 2) * math.sqrt(var)
    return ConfidenceInterval(mid - half, mid + half, alpha, bias is not None, fit.m_hat)


def region_gradient(fit, cov_grad, alpha=0.05, bias=None):
    """Chi-square ellipsoid for the gradient."""
    alpha = _check_alpha(alpha)
    if isinstance(cov_grad, CovarianceEstimate):
        cov_grad = cov_grad.gradient_block
    C = np.atleast_2d(np.asarray(cov_grad, dtype=float))
    C = (C + C.T) / 2
    ev = np.linalg.eigvalsh(C)
    if ev[0] <= 0:
        raise NotPositiveDefinite(
            f"gradient covariance is not positive definite (smallest eigenvalue {ev[0]:.3g})",
            float(ev[0]),
        )
    p = C.shape[0]
    shape = np.linalg.inv(C)
    shape = (shape + shape.T) / 2
    return ConfidenceRegion(
        center=np.array(fit.grad_hat, dtype=float),
        shape=shape,
        radius_sq=chi_square_quantile(p, 1 - alpha),
        alpha=alpha,
        # the estimate is biased by +b2, so the corrected set sits at center - b2
        bias_shift=None if bias is None else -np.asarray(bias.b2, dtype=float),
    )


def gradient_bias_coefficient(hessian, density, density_grad, moments, third=None):
    """Coefficient of ``h**2`` in the gradient bias.

    ``third`` is the kernel-weighted third-derivative term; zero when
    omitted. The fourth-moment integral of a spherical kernel reduces to
    ``mu4 / 3 * (tr(H) g + 2 H g)`` with ``g`` the density gradient.
    """
    H = np.atleast_2d(np.asarray(hessian, dtype=float))
    g = np.asarray(density_grad, dtype=float)
    tr = float(np.trace(H))
    b1m = moments.mu4 / 3.0 * (tr * g + 2.0 * H @ g) - moments.mu2**2 * tr * g
    out = b1m / (2.0 * moments.mu2 * density)
    if third is not None:
        out = out + np.asarray(third, dtype=float) / (6.0 * moments.mu2)
    return out


def _value_coefficient(trace, moments, density, formula):
    if formula == "half":
        return 0.5 * moments.mu2 * trace
    if formula == "theorem":
        if density is None:
            raise InputError("the 'theorem' bias formula needs the design density")
        return density * moments.mu2 * trace
    raise InputError(f"unknown bias formula {formula!r}; expected one of {BIAS_FORMULAS}")


def oracle_bias_terms(hessian, h, kernel, density=None, density_grad=None, third=None,
                      formula="half"):
    """Bias terms from a known Hessian (simulation mode).

    The gradient term needs ``density`` and ``density_grad``; without them
    ``b2`` carries only the third-derivative part.
    """
    h = check_bandwidth(h)
    mom = compute_moments(kernel)
    H = np.atleast_2d(np.asarray(hessian, dtype=float))
    b1 = _value_coefficient(float(np.trace(H)), mom, density, formula)
    if density is not None and density_grad is not None:
        coef = gradient_bias_coefficient(H, density, density_grad, mom, third)
    elif third is not None:
        coef = np.asarray(third, dtype=float) / (6.0 * mom.mu2)
    else:
        coef = np.zeros(H.shape[0])
    return BiasTerms(b1=b1, b2=h**2 * coef, h=h, source="oracle", formula=formula)


def kde(X, x, h, kernel):
    X = np.asarray(X, dtype=float)
    return float(weight_vector(X, x, h, kernel).sum() / (X.shape[0] * h ** X.shape[1]))


def _quadratic_design(D):
    n, p = D.shape
    iu, ju = np.triu_indices(p)
    return np.hstack([np.ones((n, 1)), D, D[:, iu] * D[:, ju]]), iu, ju


def plugin_bias_terms(labeled, x, h, kernel=None, formula="half", min_ess=None):
    """Bias terms estimated from the labeled data.

    The Hessian comes from a kernel-weighted local quadratic fit, the
    design density and its gradient from a kernel density estimate with
    the same kernel and bandwidth (gradient by central differences).
    Third-derivative terms are set to zero.
    """
    labeled.require("labels", role="labeled")
    h = check_bandwidth(h)
    p = labeled.p
    kernel = kernel or KernelSpec("gaussian", p)
    x = np.asarray(x, dtype=float)
    X = labeled.features
    w = weight_vector(X, x, h, kernel)
    n_coef = (p + 1) * (p + 2) // 2
    ess = float(w.sum() ** 2 / (w @ w)) if w.any() else 0.0
    if ess < (n_coef if min_ess is None else min_ess):
        raise PluginUnavailable(
            f"effective sample size {ess:.1f} is too small for a local quadratic fit "
            f"({n_coef} coefficients)"
        )
    Q, iu, ju = _quadratic_design(X - x)
    G = (Q * w[:, None]).T @ Q
    ev = np.linalg.eigvalsh(G)
    if ev[0] <= 0 or ev[-1] / ev[0] > 1e12:
        raise PluginUnavailable("local quadratic design is singular")
    coef = np.linalg.solve(G, (Q * w[:, None]).T @ labeled.labels)
    quad = coef[1 + p:]
    H = np.zeros((p, p))
    for c, i, j in zip(quad, iu, ju):
        if i == j:
            H[i, i] = 2 * c
        else:
            H[i, j] = H[j, i] = c
    density = kde(X, x, h, kernel)
    if density <= 0:
        raise PluginUnavailable("density estimate at the target is zero")
    step = 1e-3 * h
    grad = np.empty(p)
    for k in range(p):
        e = np.zeros(p)
        e[k] = step
        grad[k] = (kde(X, x + e, h, kernel) - kde(X, x - e, h, kernel)) / (2 * step)
    terms = oracle_bias_terms(H, h, kernel, density, grad, None, formula)
    return BiasTerms(terms.b1, terms.b2, h, "plugin", formula)


def theoretical_coverage_single(alpha, h, sigma11, b1):
    """Leading-order coverage of the uncorrected value interval."""
    alpha = _check_alpha(alpha)
    if not sigma11 > 0:
        raise InputError("sigma11 must be positive")
    return (1 - alpha) * (1 - h**4 * b1**2 / (8 * sigma11**2))


def c1_constant(p, alpha):
    """Mass of the chi-square(p+2) law between the (1-alpha) quantiles of
    chi-square(p) and chi-square(p+2)."""
    alpha = _check_alpha(alpha)
    lo = chi_square_quantile(p, 1 - alpha)
    return (1 - alpha) - chi_square_cdf(p + 2, lo)


def theoretical_coverage_multi(alpha, p, b):
    """Leading-order coverage of the uncorrected gradient region.

    ``b`` is the standardized bias ``Cov^(-1/2) B2``.
    """
    b = np.asarray(b, dtype=float).reshape(-1)
    c1 = c1_constant(p, alpha)
    return (1 - alpha) * (1 + (0.5 - c1) * float(b @ b))


__all__ = [
    "BiasTerms",
    "ConfidenceInterval",
    "ConfidenceRegion",
    "CovarianceEstimate",
    "bootstrap_covariance",
    "c1_constant",
    "chi_square_cdf",
    "chi_square_quantile",
    "ci_value",
    "kde",
    "normal_quantile",
    "oracle_bias_terms",
    "plugin_bias_terms",
    "plugin_covariance",
    "region_gradient",
    "theoretical_coverage_multi",
    "theoretical_coverage_single",
]
