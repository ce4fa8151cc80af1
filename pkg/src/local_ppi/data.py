"""Dataset ingestion, the piecewise simulation model and PCA preprocessing."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InputError, ParseError, SchemaError
from .estimators import Dataset

SIM_DIM = 10
DEFAULT_NOISE_VAR = 0.2

_NAN_TOKENS = {"", "nan", "na", "n/a", "null", "none"}


# ---------------------------------------------------------------- simulation

def _as_points(x):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.shape[1] != SIM_DIM:
        raise InputError(f"simulation points have {SIM_DIM} coordinates, got {X.shape[1]}")
    return X, single


def simulate_m(x):
    """Piecewise test function: ``|x1 x2| + m2(x3) - x4 - x5/2 + x6/2 + x7``.

    ``m2(s) = s cos(pi s)`` for ``s <= 0`` and ``sin(pi s)`` otherwise.
    Accepts one 10-vector or an ``(n, 10)`` array.
    """
    X, single = _as_points(x)
    s = X[:, 2]
    m2 = np.where(s <= 0, s * np.cos(np.pi * s), np.sin(np.pi * s))
    out = (
        np.abs(X[:, 0] * X[:, 1])
        + m2
        - X[:, 3]
        - 0.5 * X[:, 4]
        + 0.5 * X[:, 5]
        + X[:, 6]
    )
    return float(out[0]) if single else out


def _m2_derivatives(s):
    c, sn = np.cos(np.pi * s), np.sin(np.pi * s)
    pi = np.pi
    neg = s < 0
    d1 = np.where(neg, c - pi * s * sn, pi * c)
    d2 = np.where(neg, -2 * pi * sn - pi**2 * s * c, -(pi**2) * sn)
    d3 = np.where(neg, -3 * pi**2 * c + pi**3 * s * sn, -(pi**3) * c)
    return d1, d2, d3


def _gradient_unchecked(X):
    G = np.zeros_like(X)
    sg = np.sign(X[:, 0] * X[:, 1])
    G[:, 0] = sg * X[:, 1]
    G[:, 1] = sg * X[:, 0]
    G[:, 2] = _m2_derivatives(X[:, 2])[0]
    G[:, 3:7] = (-1.0, -0.5, 0.5, 1.0)
    return G


def _check_differentiable(X):
    bad = X[:, 0] * X[:, 1] == 0
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        coord = 1 if X[i, 0] == 0 else 2
        raise InputError(f"m is not differentiable where x{coord} = 0 (point {i})")
    bad = X[:, 2] == 0
    if bad.any():
        raise InputError(f"m is not differentiable where x3 = 0 (point {int(np.flatnonzero(bad)[0])})")


def simulate_gradient(x):
    """Analytic gradient of :func:`simulate_m` (needs ``x1 x2 != 0``, ``x3 != 0``)."""
    X, single = _as_points(x)
    _check_differentiable(X)
    G = _gradient_unchecked(X)
    return G[0] if single else G


def simulate_hessian(x):
    """Hessian of :func:`simulate_m` at one differentiable point."""
    X, _ = _as_points(x)
    _check_differentiable(X[:1])
    H = np.zeros((SIM_DIM, SIM_DIM))
    H[0, 1] = H[1, 0] = np.sign(X[0, 0] * X[0, 1])
    H[2, 2] = _m2_derivatives(X[:1, 2])[1][0]
    return H


def simulate_third_term(x, mu4):
    """Kernel-weighted third-derivative vector ``int u D^3 m(x, u) K(u) du``.

    Only the ``x3`` piece has a third derivative, so the integral is
    ``mu4 * m2'''(x3) * e3``.
    """
    X, _ = _as_points(x)
    out = np.zeros(SIM_DIM)
    out[2] = mu4 * _m2_derivatives(X[:1, 2])[2][0]
    return out


def design_density(x):
    """Standard normal density of the simulated features and its gradient."""
    x = np.asarray(x, dtype=float)
    f = (2 * math.pi) ** (-x.shape[0] / 2) * math.exp(-0.5 * float(x @ x))
    return f, -x * f


@dataclass(frozen=True)
class SimulationSpec:
    n_labeled: int
    n_unlabeled: int
    noise_sd: float = math.sqrt(DEFAULT_NOISE_VAR)
    seed: int = 0
    p: int = SIM_DIM

    def __post_init__(self):
        if self.n_labeled < 1 or self.n_unlabeled < 1:
            raise InputError("simulation sizes must be at least 1")
        if not self.noise_sd >= 0:
            raise InputError("noise_sd must be non-negative")
        if self.p != SIM_DIM:
            raise InputError(f"the simulation model is fixed at p = {SIM_DIM}")

    @property
    def provenance(self):
        return f"simulation:seed={self.seed}"


@dataclass(frozen=True, eq=False)
class SimulationTruth:
    """Noise-free values kept aside for evaluation."""

    labeled_m: np.ndarray
    labeled_gradient: np.ndarray
    unlabeled_m: np.ndarray


def generate(sim):
    """Draw labeled and unlabeled sets from ``N(0, I_10)``.

    Labels are ``m(X) + noise``; the unlabeled set has no labels. Both
    carry the simulation's provenance tag and no predictions.
    """
    rng = np.random.default_rng(np.random.SeedSequence([sim.seed, 0x51A]))
    XL = rng.standard_normal((sim.n_labeled, SIM_DIM))
    XU = rng.standard_normal((sim.n_unlabeled, SIM_DIM))
    noise = rng.standard_normal(sim.n_labeled)
    mL = simulate_m(XL)
    labels = mL + sim.noise_sd * noise if sim.noise_sd > 0 else mL.copy()
    labeled = Dataset(XL, labels=labels, provenance=sim.provenance)
    unlabeled = Dataset(XU, provenance=sim.provenance)
    truth = SimulationTruth(mL, _gradient_unchecked(XL), simulate_m(XU))
    return labeled, unlabeled, truth


def draw_features(n, seed):
    """Fresh feature rows from the simulation design (e.g. target points)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7A6]))
    return rng.standard_normal((n, SIM_DIM))


# ---------------------------------------------------------------------- CSV

def _parse_cell(text, row, column):
    token = text.strip()
    if token.lower() in _NAN_TOKENS:
        return math.nan
    try:
        return float(token)
    except ValueError:
        raise ParseError(
            f"non-numeric value {text!r} at row {row}, column {column!r}", row, column
        ) from None


def read_columns(path, columns=None, delimiter=","):
    """Read named numeric columns of a CSV file into a dict of arrays.

    With ``columns=None`` every column is read. Rows are numbered from 1
    after the header in error messages.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError(f"{path}: empty file, header row required") from None
        wanted = header if columns is None else list(columns)
        index = {}
        for name in wanted:
            if name not in header:
                raise ParseError(f"{path}: missing column {name!r}", None, name)
            index[name] = header.index(name)
        values = {name: [] for name in wanted}
        for row_no, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(
                    f"{path}: row {row_no} has {len(row)} fields, header has {len(header)}",
                    row_no,
                )
            for name, j in index.items():
                values[name].append(_parse_cell(row[j], row_no, name))
    return {k: np.asarray(v, dtype=float) for k, v in values.items()}


def load_csv(path, features=None, label=None, prediction=None, delimiter=",",
             provenance=None):
    """Load a dataset, dropping rows with any missing value.

    ``features`` defaults to every column other than ``label`` and
    ``prediction``. Returns ``(dataset, dropped_count)``.
    """
    if features is None:
        with Path(path).open(newline="", encoding="utf-8") as fh:
            header = [h.strip() for h in next(csv.reader(fh, delimiter=delimiter), [])]
        features = [c for c in header if c not in (label, prediction)]
    if not features:
        raise InputError("no feature columns selected")
    names = list(features) + [c for c in (label, prediction) if c is not None]
    cols = read_columns(path, names, delimiter)
    table = np.column_stack([cols[c] for c in names]) if names else np.empty((0, 0))
    keep = ~np.isnan(table).any(axis=1)
    table = table[keep]
    p = len(features)
    k = p
    labels = predictions = None
    if label is not None:
        labels = table[:, k]
        k += 1
    if prediction is not None:
        predictions = table[:, k]
    ds = Dataset(table[:, :p].reshape(-1, p), labels, predictions, provenance)
    return ds, int((~keep).sum())


def _fmt(v):
    return repr(float(v))


def write_csv(path, columns, delimiter=","):
    """Write ``{name: 1-D array}`` as CSV; floats are written round-trip exact."""
    names = list(columns)
    arrays = [np.asarray(columns[c], dtype=float).reshape(-1) for c in names]
    n = arrays[0].shape[0] if arrays else 0
    if any(a.shape[0] != n for a in arrays):
        raise InputError("all columns must have the same length")
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(names)
        for i in range(n):
            w.writerow([_fmt(a[i]) for a in arrays])
    return path


def feature_names(p):
    return [f"x{j + 1}" for j in range(p)]


def write_dataset(path, dataset, features=None, label="y", prediction=None):
    features = features or feature_names(dataset.p)
    cols = {name: dataset.features[:, j] for j, name in enumerate(features)}
    if label is not None and dataset.labels is not None:
        cols[label] = dataset.labels
    if prediction is not None and dataset.predictions is not None:
        cols[prediction] = dataset.predictions
    return write_csv(path, cols)


def load_predictions(path):
    """Single-column prediction file with header ``prediction``."""
    try:
        return read_columns(path, ["prediction"])["prediction"]
    except ParseError as err:
        if err.column == "prediction" and err.row is None:
            raise ParseError(f"{path}: prediction file needs a 'prediction' header", None,
                             "prediction") from None
        raise


def write_predictions(path, values):
    return write_csv(path, {"prediction": values})


# ----------------------------------------------------------- bundle manifest

MANIFEST_VERSION = 1


@dataclass(frozen=True, eq=False)
class Bundle:
    labeled: Dataset
    unlabeled: Dataset
    test: Dataset | None
    provenance: str | None
    features: list
    dropped: dict


def load_bundle(manifest_path):
    """Load datasets named by a JSON bundle manifest.

    Layout::

        {"schema_version": 1, "provenance": "...",
         "features": ["x1", ...], "label": "y",
         "labeled":   {"data": "labeled.csv", "predictions": "labeled_predictions.csv"},
         "unlabeled": {"data": "unlabeled.csv", "predictions": "unlabeled_predictions.csv"},
         "test":      {"data": "test.csv"}}

    ``predictions`` entries and the ``test`` block are optional. Paths are
    relative to the manifest.
    """
    manifest_path = Path(manifest_path)
    with manifest_path.open(encoding="utf-8") as fh:
        try:
            spec = json.load(fh)
        except json.JSONDecodeError as err:
            raise SchemaError(f"{manifest_path}: invalid JSON ({err})") from None
    for key in ("features", "labeled", "unlabeled"):
        if key not in spec:
            raise SchemaError(f"{manifest_path}: manifest is missing {key!r}", key)
    base = manifest_path.parent
    features = list(spec["features"])
    label = spec.get("label", "y")
    tag = spec.get("provenance")
    dropped = {}

    def part(name, need_label):
        block = spec[name]
        if "data" not in block:
            raise SchemaError(f"{manifest_path}: {name} block needs 'data'", f"{name}.data")
        ds, nd = load_csv(base / block["data"], features, label if need_label else None,
                          provenance=tag)
        dropped[name] = nd
        if block.get("predictions"):
            preds = load_predictions(base / block["predictions"])
            if nd:
                raise InputError(
                    f"{name}: rows with missing values cannot be aligned with a separate "
                    "prediction file; clean the data first"
                )
            if preds.shape[0] != ds.n:
                raise InputError(
                    f"{name}: {preds.shape[0]} predictions for {ds.n} rows"
                )
            ds = ds.with_predictions(preds)
        return ds

    labeled = part("labeled", True)
    unlabeled = part("unlabeled", False)
    test = part("test", True) if "test" in spec else None
    return Bundle(labeled, unlabeled, test, tag, features, dropped)


# ---------------------------------------------------------------------- PCA

@dataclass(frozen=True, eq=False)
class PcaModel:
    mean: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray
    total_variance: float = math.nan

    @property
    def explained_variance_ratio(self):
        return self.explained_variance / self.total_variance


def pca_fit(X, k):
    """Top-``k`` principal directions from the covariance eigendecomposition.

    Each component is signed so its largest-magnitude loading is positive.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise InputError("PCA needs a 2-D matrix")
    n, p = X.shape
    if not 1 <= k <= min(n, p):
        raise InputError(f"k must lie in [1, {min(n, p)}], got {k}")
    mean = X.mean(axis=0)
    C = np.cov(X - mean, rowvar=False, ddof=1 if n > 1 else 0).reshape(p, p)
    vals, vecs = np.linalg.eigh(C)
    order = np.argsort(vals, kind="stable")[::-1][:k]
    comps = vecs[:, order].T.copy()
    for row in comps:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1
    ev = np.clip(vals[order], 0.0, None)
    return PcaModel(mean, comps, ev, float(np.clip(vals, 0, None).sum()))


def pca_transform(model, X):
    return (np.asarray(X, dtype=float) - model.mean) @ model.components.T


# ------------------------------------------------------ exact smoother bias

def smoother_bias(x, h, n_draws=400_000, seed=0, m=simulate_m):
    """Finite-bandwidth bias of the infinite-sample local linear fit.

    Under the ``N(0, I)`` design and a gaussian kernel, the kernel-weighted
    design law is itself gaussian, ``N(x / (1 + h^2), h^2 / (1 + h^2) I)``,
    so the weighted moments ``E[w A A^T]`` and ``E[w A m]`` are estimated by
    sampling from it directly. Returns ``(value_bias, gradient_bias)``.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    if not h > 0:
        raise InputError("bandwidth must be positive")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB1A5]))
    s = h / math.sqrt(1.0 + h * h)
    Z = x / (1.0 + h * h) + s * rng.standard_normal((n_draws, x.shape[0]))
    A = np.hstack([np.ones((n_draws, 1)), Z - x])
    theta = np.linalg.solve(A.T @ A, A.T @ m(Z))
    truth = _gradient_unchecked(x[None, :])[0] if m is simulate_m else None
    value_bias = float(theta[0] - m(x[None, :])[0])
    grad_bias = None if truth is None else theta[1:] - truth
    return value_bias, grad_bias
