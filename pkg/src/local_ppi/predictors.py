"""Pluggable predictors standing in for an externally trained model.

Three kinds exist:

``file_backed``
    Predictions computed elsewhere and stored one per row.
``knn``
    k-nearest-neighbour average of a labeled training set that must be
    independent of the inference data.
``noisy_oracle``
    The simulation's true function plus gaussian noise, for self-contained
    experiments. The noise for a row is a pure function of the seed and
    the row's bytes, so any two calls on the same row agree bitwise no
    matter how rows are batched or ordered.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .data import load_predictions, simulate_m
from .errors import InputError

ORACLES = {
    "simulation": simulate_m,
    "zero": lambda X: np.zeros(np.atleast_2d(X).shape[0]),
}

ADVISORY_RATIO = 0.5

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def _splitmix(z):
    z = z ^ (z >> np.uint64(30))
    z = z * _M1
    z = z ^ (z >> np.uint64(27))
    z = z * _M2
    return z ^ (z >> np.uint64(31))


def _row_hash(X, seed):
    X = np.ascontiguousarray(np.asarray(X, dtype=float) + 0.0)  # -0.0 -> 0.0
    bits = X.view(np.uint64)
    with np.errstate(over="ignore"):
        h = np.full(X.shape[0], _splitmix(np.uint64(seed % 2**64) + _GOLDEN), dtype=np.uint64)
        for j in range(bits.shape[1]):
            h = _splitmix(h ^ (bits[:, j] + _GOLDEN * np.uint64(j + 1)))
    return h


def _uniform(z):
    # 53 high bits mapped into the open interval (0, 1)
    return ((z >> np.uint64(11)).astype(float) + 0.5) / 2.0**53


def row_gaussian(X, seed):
    """One standard normal draw per row, determined by ``(seed, row)``."""
    h = _row_hash(X, seed)
    with np.errstate(over="ignore"):
        u1 = _uniform(_splitmix(h ^ np.uint64(1)))
        u2 = _uniform(_splitmix(h ^ np.uint64(2)))
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


class Predictor:
    kind = "abstract"
    provenance = None

    def predict(self, X):
        raise NotImplementedError

    def check_independent(self, *datasets, allow_shared=False):
        """Refuse datasets whose provenance tag matches the training data."""
        if allow_shared or self.provenance is None:
            return
        for ds in datasets:
            if ds is not None and ds.provenance == self.provenance:
                raise InputError(
                    f"predictor was trained on data tagged {self.provenance!r}, "
                    "which is also used for inference"
                )

    def attach(self, dataset, allow_shared=False):
        """Return ``dataset`` with this predictor's outputs as predictions."""
        self.check_independent(dataset, allow_shared=allow_shared)
        return dataset.with_predictions(self.predict(dataset.features))


class FileBackedPredictor(Predictor):
    """Predictions aligned 1:1 by row index with a companion dataset."""

    kind = "file_backed"

    def __init__(self, source):
        if isinstance(source, (str, Path)):
            self.path = Path(source)
            values = load_predictions(self.path)
        else:
            self.path = None
            values = np.asarray(source, dtype=float).reshape(-1)
        self.values = values.copy()
        self.values.setflags(write=False)

    def predict(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[0] != self.values.shape[0]:
            where = f" in {self.path}" if self.path else ""
            raise InputError(
                f"{X.shape[0]} rows requested but {self.values.shape[0]} predictions stored{where}"
            )
        return self.values.copy()


class KnnPredictor(Predictor):
    """Mean label of the ``k`` nearest training rows."""

    kind = "knn"

    def __init__(self, training, k=5):
        training.require("labels", role="training")
        if not 1 <= k <= training.n:
            raise InputError(f"k must lie in [1, {training.n}], got {k}")
        self.k = int(k)
        self.training = training
        self.provenance = training.provenance
        self._tree = cKDTree(training.features)

    def predict(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.training.p:
            raise InputError(f"expected {self.training.p} features, got {X.shape[1]}")
        _, idx = self._tree.query(X, k=self.k)
        idx = np.asarray(idx).reshape(X.shape[0], self.k)
        return self.training.labels[idx].mean(axis=1)


class NoisyOraclePredictor(Predictor):
    """True function plus homoscedastic gaussian error with s.d. ``noise_sd``.

    By default the error is independent across rows. With
    ``correlation_length`` set it is instead a smooth stationary gaussian
    field (random Fourier features with that length scale), which keeps
    the same marginal variance but varies slowly in space.
    """

    kind = "noisy_oracle"

    def __init__(self, noise_sd=math.sqrt(0.1), seed=0, oracle="simulation",
                 correlation_length=None, n_features=500):
        if not noise_sd >= 0:
            raise InputError("noise_sd must be non-negative")
        if callable(oracle):
            self.oracle_fn, self.oracle = oracle, getattr(oracle, "__name__", "custom")
        elif oracle in ORACLES:
            self.oracle_fn, self.oracle = ORACLES[oracle], oracle
        else:
            raise InputError(f"unknown oracle {oracle!r}; expected one of {sorted(ORACLES)}")
        self.noise_sd = float(noise_sd)
        self.seed = int(seed)
        self.correlation_length = correlation_length
        self.n_features = int(n_features)
        self._field = None

    def _smooth_field(self, X):
        if self._field is None or self._field[0].shape[1] != X.shape[1]:
            rng = np.random.default_rng(np.random.SeedSequence([self.seed, 0xF1E1D]))
            W = rng.standard_normal((self.n_features, X.shape[1])) / self.correlation_length
            b = rng.uniform(0.0, 2 * np.pi, self.n_features)
            self._field = (W, b)
        W, b = self._field
        return math.sqrt(2.0 / self.n_features) * np.cos(X @ W.T + b).sum(axis=1)

    def predict(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        base = np.asarray(self.oracle_fn(X), dtype=float).reshape(-1)
        if self.noise_sd == 0:
            return base
        if self.correlation_length:
            return base + self.noise_sd * self._smooth_field(X)
        return base + self.noise_sd * row_gaussian(X, self.seed)


def predictor_from_config(config, base_dir=None, training=None):
    """Build a predictor from a ``{"kind": ..., ...}`` mapping."""
    config = dict(config)
    kind = config.pop("kind", None)
    if kind == "file_backed":
        path = Path(config["path"])
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        return FileBackedPredictor(path)
    if kind == "knn":
        if training is None:
            raise InputError("knn predictor needs a labeled training dataset")
        return KnnPredictor(training, int(config.get("k", 5)))
    if kind == "noisy_oracle":
        return NoisyOraclePredictor(
            noise_sd=float(config.get("noise_sd", math.sqrt(0.1))),
            seed=int(config.get("seed", 0)),
            oracle=config.get("oracle", "simulation"),
            correlation_length=config.get("correlation_length"),
        )
    raise InputError(f"unknown predictor kind {kind!r}")


@dataclass(frozen=True)
class QualityReport:
    mse_vs_labels: float
    ratio_to_label_second_moment: float
    n: int
    advisory: str | None = None


def predictor_quality(pred, reference):
    """Mean squared error against labels, and its ratio to ``E[Y^2]``.

    A ratio above 0.5 is flagged in ``advisory``; nothing is enforced.
    """
    reference.require("labels", role="reference")
    if reference.n == 0:
        raise InputError("reference dataset is empty")
    F = pred.predict(reference.features) if isinstance(pred, Predictor) else np.asarray(pred)
    y = reference.labels
    mse = float(np.mean((F - y) ** 2))
    second = float(np.mean(y**2))
    ratio = mse / second if second > 0 else math.inf
    note = None
    if ratio > ADVISORY_RATIO:
        note = f"prediction error is {ratio:.2f} of the label second moment; PPI likely unhelpful"
    return QualityReport(mse, ratio, reference.n, note)
