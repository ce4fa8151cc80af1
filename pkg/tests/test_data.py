import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import integrate, stats

from local_ppi.data import (
    DEFAULT_NOISE_VAR,
    SimulationSpec,
    design_density,
    generate,
    load_bundle,
    load_csv,
    pca_fit,
    pca_transform,
    simulate_gradient,
    simulate_hessian,
    simulate_m,
    smoother_bias,
    write_csv,
    write_dataset,
    write_predictions,
)
from local_ppi.errors import InputError, ParseError, SchemaError


def m2_variance():
    """Var of the x3 piece under N(0, 1), by quadrature."""
    m2 = lambda s: s * math.cos(math.pi * s) if s <= 0 else math.sin(math.pi * s)  # noqa: E731
    first = sum(integrate.quad(lambda s: m2(s) * stats.norm.pdf(s), a, b, epsabs=1e-13)[0]
                for a, b in ((-12, 0), (0, 12)))
    second = sum(integrate.quad(lambda s: m2(s) ** 2 * stats.norm.pdf(s), a, b,
                                epsabs=1e-13)[0] for a, b in ((-12, 0), (0, 12)))
    return second - first**2


def analytic_label_variance(noise_var=DEFAULT_NOISE_VAR):
    # independent pieces: |x1 x2|, m2(x3) and the linear block
    abs_product = 1.0 - (2.0 / math.pi) ** 2
    linear = 1.0 + 0.25 + 0.25 + 1.0
    return abs_product + m2_variance() + linear + noise_var


class TestSimulationFunction:
    def test_origin(self):
        assert simulate_m(np.zeros(10)) == 0.0

    def test_direct_values(self):
        assert simulate_m([1, 1, 0.5, 0, 0, 0, 0, 0, 0, 0]) == pytest.approx(2.0, abs=1e-15)
        assert simulate_m([0, 0, -1, 1, 2, 3, 4, 0, 0, 0]) == pytest.approx(4.5, abs=1e-14)

    def test_vectorized(self, rng):
        X = rng.normal(size=(30, 10))
        np.testing.assert_array_equal(simulate_m(X), [simulate_m(x) for x in X])

    def test_ignores_last_three(self, rng):
        x = rng.normal(size=10)
        y = x.copy()
        y[7:] = rng.normal(size=3)
        assert simulate_m(x) == simulate_m(y)

    def test_gradient_examples(self):
        g = simulate_gradient([1, 2, 0.5, 0, 0, 0, 0, 0, 0, 0])
        assert g[0] == 2 and g[1] == 1
        assert g[2] == pytest.approx(0.0, abs=1e-15)
        np.testing.assert_array_equal(g[3:7], [-1, -0.5, 0.5, 1])
        np.testing.assert_array_equal(g[7:], 0)

    def test_gradient_against_finite_differences(self):
        X = np.random.default_rng(4).normal(size=(100, 10))
        eps = 1e-6
        for x in X:
            fd = np.array([(simulate_m(x + eps * e) - simulate_m(x - eps * e)) / (2 * eps)
                           for e in np.eye(10)])
            np.testing.assert_allclose(simulate_gradient(x), fd, atol=1e-6)

    def test_hessian_against_finite_differences(self):
        X = np.random.default_rng(5).normal(size=(20, 10))
        eps = 1e-5
        for x in X:
            fd = np.array([(simulate_gradient(x + eps * e) - simulate_gradient(x - eps * e))
                           / (2 * eps) for e in np.eye(10)])
            np.testing.assert_allclose(simulate_hessian(x), fd, atol=1e-5)

    @pytest.mark.parametrize("coord", [0, 1, 2])
    def test_nondifferentiable_point(self, coord):
        x = np.ones(10)
        x[coord] = 0.0
        with pytest.raises(InputError, match=f"x{coord + 1}"):
            simulate_gradient(x)

    def test_wrong_dimension(self):
        with pytest.raises(InputError):
            simulate_m(np.zeros(3))

    def test_design_density(self, rng):
        x = rng.normal(size=10)
        f, g = design_density(x)
        assert f == pytest.approx(stats.multivariate_normal(np.zeros(10)).pdf(x), rel=1e-12)
        eps = 1e-6
        fd = [(design_density(x + eps * e)[0] - design_density(x - eps * e)[0]) / (2 * eps)
              for e in np.eye(10)]
        np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-14)


class TestGenerate:
    def test_zero_noise(self):
        lab, unl, truth = generate(SimulationSpec(50, 20, noise_sd=0.0, seed=1))
        np.testing.assert_array_equal(lab.labels, simulate_m(lab.features))
        np.testing.assert_array_equal(truth.unlabeled_m, simulate_m(unl.features))
        assert unl.labels is None and lab.predictions is None

    def test_deterministic(self):
        a = generate(SimulationSpec(30, 40, seed=3))
        b = generate(SimulationSpec(30, 40, seed=3))
        np.testing.assert_array_equal(a[0].features, b[0].features)
        np.testing.assert_array_equal(a[0].labels, b[0].labels)
        np.testing.assert_array_equal(a[1].features, b[1].features)
        assert not np.array_equal(generate(SimulationSpec(30, 40, seed=4))[0].labels,
                                  a[0].labels)

    def test_default_noise_variance(self):
        assert SimulationSpec(1, 1).noise_sd ** 2 == pytest.approx(0.2)

    def test_label_model(self):
        lab, _, truth = generate(SimulationSpec(100_000, 1, seed=7))
        resid = lab.labels - truth.labeled_m
        assert abs(resid.mean()) < 3 * math.sqrt(0.2) / math.sqrt(100_000)
        assert resid.var() == pytest.approx(0.2, rel=0.1)

    def test_label_variance_matches_model(self):
        lab, _, _ = generate(SimulationSpec(100_000, 1, seed=8))
        assert lab.labels.var() == pytest.approx(analytic_label_variance(), rel=0.03)

    @pytest.mark.xfail(strict=True, reason="reference Var(Y) of 1.9 does not match the "
                                           "stated generator; see the decisions ledger")
    def test_label_variance_reference_value(self):
        lab, _, _ = generate(SimulationSpec(100_000, 1, seed=8))
        assert lab.labels.var() == pytest.approx(1.9, abs=0.1)

    def test_features_standard_normal(self):
        lab, _, _ = generate(SimulationSpec(20000, 1, seed=2))
        np.testing.assert_allclose(lab.features.mean(axis=0), 0, atol=0.05)
        np.testing.assert_allclose(np.cov(lab.features, rowvar=False), np.eye(10), atol=0.05)

    def test_invalid(self):
        with pytest.raises(InputError):
            SimulationSpec(0, 5)
        with pytest.raises(InputError):
            SimulationSpec(5, 5, noise_sd=-1)
        with pytest.raises(InputError):
            SimulationSpec(5, 5, p=3)


class TestCsv:
    def test_small_file(self, tmp_path):
        (tmp_path / "d.csv").write_text("a,b,y\n1,2,3\n4,5,6\n7,8,9\n")
        ds, dropped = load_csv(tmp_path / "d.csv", label="y")
        assert ds.n == 3 and dropped == 0
        np.testing.assert_array_equal(ds.features, [[1, 2], [4, 5], [7, 8]])

    def test_nan_rows_dropped(self, tmp_path):
        rows = ["a,y"] + [f"{i},{i}" for i in range(8)] + ["NaN,1", "2,"]
        (tmp_path / "d.csv").write_text("\n".join(rows) + "\n")
        ds, dropped = load_csv(tmp_path / "d.csv", ["a"], "y")
        assert ds.n == 8 and dropped == 2

    def test_non_numeric_location(self, tmp_path):
        (tmp_path / "d.csv").write_text("a,y\n1,2\n3,oops\n")
        with pytest.raises(ParseError) as info:
            load_csv(tmp_path / "d.csv", ["a"], "y")
        assert info.value.row == 2 and info.value.column == "y"

    def test_missing_column(self, tmp_path):
        (tmp_path / "d.csv").write_text("a,y\n1,2\n")
        with pytest.raises(ParseError) as info:
            load_csv(tmp_path / "d.csv", ["a", "b"], "y")
        assert info.value.column == "b"

    def test_delimiter(self, tmp_path):
        (tmp_path / "d.csv").write_text("a;y\n1.5;2\n")
        ds, _ = load_csv(tmp_path / "d.csv", ["a"], "y", delimiter=";")
        assert ds.features[0, 0] == 1.5

    @given(arrays(np.float64, (6, 3), elements=st.floats(-1e6, 1e6, allow_nan=False)))
    def test_round_trip(self, tmp_path_factory, matrix):
        path = tmp_path_factory.mktemp("rt") / "m.csv"
        write_csv(path, {f"c{j}": matrix[:, j] for j in range(3)})
        ds, _ = load_csv(path, ["c0", "c1"], "c2")
        np.testing.assert_array_equal(ds.features, matrix[:, :2])
        np.testing.assert_array_equal(ds.labels, matrix[:, 2])


class TestBundle:
    def make_bundle(self, tmp_path, with_predictions=True):
        lab, unl, _ = generate(SimulationSpec(20, 30, seed=1))
        write_dataset(tmp_path / "lab.csv", lab)
        write_dataset(tmp_path / "unl.csv", unl, label=None)
        manifest = {
            "schema_version": 1, "provenance": "sim", "features": [f"x{j}" for j in range(1, 11)],
            "label": "y", "labeled": {"data": "lab.csv"}, "unlabeled": {"data": "unl.csv"},
        }
        if with_predictions:
            write_predictions(tmp_path / "lp.csv", np.arange(20.0))
            write_predictions(tmp_path / "up.csv", np.arange(30.0))
            manifest["labeled"]["predictions"] = "lp.csv"
            manifest["unlabeled"]["predictions"] = "up.csv"
        import json

        (tmp_path / "m.json").write_text(json.dumps(manifest))
        return lab, unl

    def test_load(self, tmp_path):
        lab, unl = self.make_bundle(tmp_path)
        b = load_bundle(tmp_path / "m.json")
        np.testing.assert_array_equal(b.labeled.features, lab.features)
        np.testing.assert_array_equal(b.unlabeled.predictions, np.arange(30.0))
        assert b.provenance == "sim" and b.test is None

    def test_missing_key(self, tmp_path):
        (tmp_path / "m.json").write_text('{"features": ["a"], "labeled": {"data": "x.csv"}}')
        with pytest.raises(SchemaError) as info:
            load_bundle(tmp_path / "m.json")
        assert info.value.field == "unlabeled"

    def test_prediction_count_mismatch(self, tmp_path):
        self.make_bundle(tmp_path)
        write_predictions(tmp_path / "up.csv", np.arange(29.0))
        with pytest.raises(InputError, match="29 predictions"):
            load_bundle(tmp_path / "m.json")


class TestPca:
    def test_line_captures_all_variance(self, rng):
        t = rng.normal(size=50)
        X = np.column_stack([t, 2 * t + 1])
        model = pca_fit(X, 1)
        assert model.explained_variance_ratio[0] == pytest.approx(1.0, abs=1e-10)

    def test_full_rank_isometry(self, rng):
        X = rng.normal(size=(30, 4))
        Z = pca_transform(pca_fit(X, 4), X)
        dX = np.linalg.norm(X[:, None] - X[None], axis=2)
        dZ = np.linalg.norm(Z[:, None] - Z[None], axis=2)
        np.testing.assert_allclose(dZ, dX, atol=1e-8)

    def test_square_equal_variances(self):
        X = np.array([[1, 1], [1, -1], [-1, 1], [-1, -1]], dtype=float)
        ev = pca_fit(X, 2).explained_variance
        assert ev[0] == pytest.approx(ev[1], rel=1e-12)

    def test_orthonormal_sorted_signed(self, rng):
        X = rng.normal(size=(100, 5)) @ rng.normal(size=(5, 5))
        model = pca_fit(X, 3)
        np.testing.assert_allclose(model.components @ model.components.T, np.eye(3), atol=1e-8)
        assert np.all(np.diff(model.explained_variance) <= 0)
        assert np.all(model.explained_variance >= 0)
        for row in model.components:
            assert row[np.argmax(np.abs(row))] > 0

    def test_matches_svd(self, rng):
        X = rng.normal(size=(80, 4)) @ np.diag([3.0, 2.0, 1.0, 0.5])
        model = pca_fit(X, 2)
        _, s, Vt = np.linalg.svd(X - X.mean(axis=0), full_matrices=False)
        np.testing.assert_allclose(model.explained_variance, s[:2] ** 2 / 79, rtol=1e-10)
        np.testing.assert_allclose(np.abs(model.components), np.abs(Vt[:2]), atol=1e-10)

    def test_idempotent(self, rng):
        X = rng.normal(size=(60, 3)) @ rng.normal(size=(3, 3))
        Z = pca_transform(pca_fit(X, 3), X)
        Z2 = pca_transform(pca_fit(Z, 3), Z)
        np.testing.assert_allclose(np.abs(Z2), np.abs(Z), atol=1e-8)

    @pytest.mark.parametrize("k", [0, 4])
    def test_k_out_of_range(self, rng, k):
        with pytest.raises(InputError):
            pca_fit(rng.normal(size=(10, 3)), k)


def population_fit_1d(m, x, h):
    """Infinite-sample local linear fit under a N(0, 1) design, by quadrature."""
    w = lambda z: stats.norm.pdf(z) * stats.norm.pdf((z - x) / h)  # noqa: E731
    moment = lambda g: integrate.quad(lambda z: w(z) * g(z), -12, 12, epsabs=1e-13)[0]  # noqa: E731
    G = np.array([[moment(lambda z: 1.0), moment(lambda z: z - x)],
                  [moment(lambda z: z - x), moment(lambda z: (z - x) ** 2)]])
    r = np.array([moment(m), moment(lambda z: (z - x) * m(z))])
    return np.linalg.solve(G, r)


class TestSmootherBias:
    @pytest.mark.parametrize("x,h", [(0.0, 0.5), (0.7, 0.5), (-1.2, 0.3), (0.4, 1.0)])
    def test_matches_quadrature_1d(self, x, h):
        m = lambda Z: np.cos(2.0 * np.asarray(Z)[:, 0]) if np.ndim(Z) == 2 else np.cos(2.0 * Z)  # noqa: E731
        theta = population_fit_1d(lambda z: np.cos(2.0 * z), x, h)
        value_bias, grad_bias = smoother_bias([x], h, m=m)
        assert grad_bias is None
        assert value_bias == pytest.approx(theta[0] - math.cos(2.0 * x), abs=3e-3)

    def test_linear_truth_has_no_bias(self):
        m = lambda Z: 1.0 + 3.0 * Z[:, 0] - Z[:, 1]  # noqa: E731
        value_bias, _ = smoother_bias([0.3, -0.2], 0.8, m=m)
        assert abs(value_bias) < 1e-10

    def test_simulation_gradient_bias_shrinks_with_h(self):
        x = np.full(10, 0.3)
        big = np.linalg.norm(smoother_bias(x, 0.8)[1])
        small = np.linalg.norm(smoother_bias(x, 0.1)[1])
        assert small < big

    def test_deterministic(self):
        x = np.full(10, 0.2)
        assert smoother_bias(x, 0.5, seed=3)[0] == smoother_bias(x, 0.5, seed=3)[0]

    def test_rejects_bad_bandwidth(self):
        with pytest.raises(InputError):
            smoother_bias(np.zeros(10), 0.0)
