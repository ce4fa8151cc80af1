"""Local linear estimators of a function value and its gradient.

Three estimators share one weighted least squares core:

* :func:`conventional_fit` uses the labeled responses only.
* :func:`ppi_fit` fits predictor outputs on the unlabeled set and subtracts
  a rectifier estimated on the labeled set (:func:`compute_rectifier`).
* :func:`hd_fit` does the same with the regularized rectifier of
  :func:`hd_rectifier`, which stays defined when the labeled Gram matrix is
  singular.

The augmented design row for sample ``i`` is ``(1, X_i - x)``; the first
coefficient estimates ``m(x)`` and the rest estimate the gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import EmptyNeighborhood, InputError, SingularDesign
from .kernels import KernelSpec, check_bandwidth, weight_vector

CONDITION_THRESHOLD = 1e12
MIN_WEIGHT_MASS = 1e-12

METHODS = ("conventional", "ppi", "ppi_hd")


def _frozen(a):
    if a is None:
        return None
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Feature matrix with optional labels and predictor outputs.

    Arrays are copied and made read-only on construction. ``provenance``
    is a free-form tag used to keep predictor training data apart from
    inference data.
    """

    features: np.ndarray
    labels: np.ndarray | None = None
    predictions: np.ndarray | None = None
    provenance: str | None = None

    def __post_init__(self):
        X = np.asarray(self.features, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2:
            raise InputError(f"features must be a 2-D matrix, got shape {X.shape}")
        object.__setattr__(self, "features", _frozen(X))
        n = X.shape[0]
        for name in ("labels", "predictions"):
            v = getattr(self, name)
            if v is None:
                continue
            v = _frozen(np.asarray(v, dtype=float).reshape(-1))
            if v.shape[0] != n:
                raise InputError(f"{name} has {v.shape[0]} entries but features have {n} rows")
            object.__setattr__(self, name, v)

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def p(self):
        return self.features.shape[1]

    def __len__(self):
        return self.n

    def take(self, index):
        """Row subset (or resample, when ``index`` repeats rows)."""
        index = np.asarray(index)
        return Dataset(
            self.features[index],
            None if self.labels is None else self.labels[index],
            None if self.predictions is None else self.predictions[index],
            self.provenance,
        )

    def with_predictions(self, predictions):
        return Dataset(self.features, self.labels, predictions, self.provenance)

    def with_labels(self, labels):
        return Dataset(self.features, labels, self.predictions, self.provenance)

    def require(self, *names, role="dataset"):
        for name in names:
            if getattr(self, name) is None:
                raise InputError(f"{role} dataset carries no {name}")


@dataclass(frozen=True, eq=False)
class LocalFit:
    """Estimated ``m(x)`` and gradient at one target point."""

    m_hat: float
    grad_hat: np.ndarray
    target: np.ndarray
    method: str
    effective_weight_mass: float
    rectifier: "Rectifier | None" = field(default=None, repr=False)

    @property
    def theta(self):
        """The stacked ``(m_hat, grad_hat)`` vector."""
        return np.concatenate([[self.m_hat], self.grad_hat])


@dataclass(frozen=True, eq=False)
class Rectifier:
    """Local fit of predictor residuals ``F(X) - Y``."""

    delta: np.ndarray
    n_used: int
    t: float | None = None


def augmented_design(X, x):
    """Rows ``(1, X_i - x)`` as an ``(n, p+1)`` matrix."""
    X = np.asarray(X, dtype=float)
    return np.hstack([np.ones((X.shape[0], 1)), X - np.asarray(x, dtype=float)])


def weighted_gram(X, x, h, kernel):
    """Return ``(A, w, G)``: augmented design, weights and ``A^T W A``."""
    A = augmented_design(X, x)
    w = weight_vector(X, x, h, kernel)
    G = (A * w[:, None]).T @ A
    return A, w, G


def gram_condition(G):
    """Ratio of extreme eigenvalues of a symmetric PSD matrix."""
    ev = np.linalg.eigvalsh((G + G.T) / 2)
    if ev[0] <= 0 or not np.isfinite(ev).all():
        return float("inf")
    return float(ev[-1] / ev[0])


def solve_gram(G, rhs, condition_threshold=CONDITION_THRESHOLD):
    """Solve ``G z = rhs`` for a symmetric PSD Gram matrix.

    Raises :class:`SingularDesign` when the condition estimate exceeds the
    threshold. Cholesky is tried first, LU with partial pivoting second.
    """
    cond = gram_condition(G)
    if not cond <= condition_threshold:
        raise SingularDesign(
            f"weighted Gram matrix is ill-conditioned (condition {cond:.3g})", cond
        )
    try:
        factor = scipy.linalg.cho_factor(G, lower=True, check_finite=False)
        return scipy.linalg.cho_solve(factor, rhs, check_finite=False)
    except np.linalg.LinAlgError:
        return scipy.linalg.solve(G, rhs, check_finite=False)


def _check_target(data, x, kernel):
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape[0] != data.p:
        raise InputError(f"target has length {x.shape[0]} but features have {data.p} columns")
    if kernel.p != data.p:
        raise InputError(f"kernel dimension {kernel.p} does not match features ({data.p})")
    return x


def local_linear(X, response, x, h, kernel, *, condition_threshold=CONDITION_THRESHOLD,
                 min_mass=MIN_WEIGHT_MASS):
    """Weighted least squares of ``response`` on the augmented design.

    Returns ``(theta, weight_mass)``.
    """
    h = check_bandwidth(h)
    A, w, G = weighted_gram(X, x, h, kernel)
    mass = float(w.sum())
    if not mass >= min_mass:
        raise EmptyNeighborhood(
            f"total kernel weight {mass:.3g} is below {min_mass:g}", mass
        )
    if A.shape[0] < A.shape[1]:
        raise SingularDesign(
            f"{A.shape[0]} samples cannot determine {A.shape[1]} local coefficients"
        )
    rhs = (A * w[:, None]).T @ np.asarray(response, dtype=float)
    return solve_gram(G, rhs, condition_threshold), mass


def _to_fit(theta, x, method, mass, rectifier=None):
    return LocalFit(
        m_hat=float(theta[0]),
        grad_hat=_frozen(theta[1:]),
        target=_frozen(x),
        method=method,
        effective_weight_mass=mass,
        rectifier=rectifier,
    )


def conventional_fit(labeled, x, h, kernel=None, **options):
    """Local linear fit on the labeled responses alone."""
    labeled.require("labels", role="labeled")
    kernel = kernel or KernelSpec("gaussian", labeled.p)
    x = _check_target(labeled, x, kernel)
    theta, mass = local_linear(labeled.features, labeled.labels, x, h, kernel, **options)
    return _to_fit(theta, x, "conventional", mass)


def compute_rectifier(labeled, x, h, kernel=None, **options):
    """Local fit of ``F(X_i) - Y_i`` over the labeled set."""
    labeled.require("labels", "predictions", role="labeled")
    kernel = kernel or KernelSpec("gaussian", labeled.p)
    x = _check_target(labeled, x, kernel)
    resid = labeled.predictions - labeled.labels
    delta, _ = local_linear(labeled.features, resid, x, h, kernel, **options)
    return Rectifier(delta=_frozen(delta), n_used=labeled.n)


def pseudo_label_fit(unlabeled, x, h, kernel, **options):
    """Local fit of the predictor outputs on the unlabeled set; ``(theta, mass)``."""
    unlabeled.require("predictions", role="unlabeled")
    x = _check_target(unlabeled, x, kernel)
    try:
        return local_linear(unlabeled.features, unlabeled.predictions, x, h, kernel, **options)
    except SingularDesign as err:
        raise err.tagged("unlabeled") from err


def ppi_fit(labeled, unlabeled, x, h, kernel=None, **options):
    """Prediction-powered local fit: pseudo-label fit minus rectifier."""
    kernel = kernel or KernelSpec("gaussian", labeled.p)
    x = _check_target(labeled, x, kernel)
    theta_u, mass = pseudo_label_fit(unlabeled, x, h, kernel, **options)
    try:
        rect = compute_rectifier(labeled, x, h, kernel, **options)
    except SingularDesign as err:
        raise err.tagged("labeled") from err
    return _to_fit(theta_u - rect.delta, x, "ppi", mass, rect)


def default_t(n, N):
    """Regularization weight with ``t N / n = 0.01``."""
    return 0.01 * n / N


def hd_rectifier(labeled, unlabeled, x, h, kernel=None, t=None, *,
                 condition_threshold=CONDITION_THRESHOLD):
    """Rectifier with Gram matrix ``G_L + t G_U``, rescaled by ``1 + t N / n``."""
    labeled.require("labels", "predictions", role="labeled")
    kernel = kernel or KernelSpec("gaussian", labeled.p)
    x = _check_target(labeled, x, kernel)
    _check_target(unlabeled, x, kernel)
    n, N = labeled.n, unlabeled.n
    t = default_t(n, N) if t is None else float(t)
    if not t > 0:
        raise InputError(f"regularization weight t must be positive, got {t}")
    h = check_bandwidth(h)
    A, w, G_l = weighted_gram(labeled.features, x, h, kernel)
    _, _, G_u = weighted_gram(unlabeled.features, x, h, kernel)
    rhs = (A * w[:, None]).T @ (labeled.predictions - labeled.labels)
    try:
        z = solve_gram(G_l + t * G_u, rhs, condition_threshold)
    except SingularDesign as err:
        raise err.tagged("combined") from err
    return Rectifier(delta=_frozen((1.0 + t * N / n) * z), n_used=n, t=t)


def hd_fit(labeled, unlabeled, x, h, kernel=None, t=None, **options):
    """Prediction-powered local fit using :func:`hd_rectifier`."""
    kernel = kernel or KernelSpec("gaussian", labeled.p)
    x = _check_target(labeled, x, kernel)
    theta_u, mass = pseudo_label_fit(unlabeled, x, h, kernel, **options)
    opts = {k: v for k, v in options.items() if k == "condition_threshold"}
    rect = hd_rectifier(labeled, unlabeled, x, h, kernel, t, **opts)
    return _to_fit(theta_u - rect.delta, x, "ppi_hd", mass, rect)


def make_fit_fn(method, h, kernel=None, t=None, **options):
    """Curry one estimator into ``fn(labeled, unlabeled, x) -> LocalFit``.

    ``method`` accepts the short CLI names ``con``, ``ppi`` and ``hd``.
    """
    method = {"con": "conventional", "hd": "ppi_hd"}.get(method, method)
    if method not in METHODS:
        raise InputError(f"unknown method {method!r}")

    def fit(labeled, unlabeled, x):
        k = kernel or KernelSpec("gaussian", labeled.p)
        if method == "conventional":
            return conventional_fit(labeled, x, h, k, **options)
        if method == "ppi":
            return ppi_fit(labeled, unlabeled, x, h, k, **options)
        return hd_fit(labeled, unlabeled, x, h, k, t, **options)

    fit.method = method
    return fit
