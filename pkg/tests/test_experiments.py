import json
import math
from pathlib import Path

import numpy as np
import pytest

from local_ppi.data import write_csv, write_predictions
from local_ppi.errors import InputError, SchemaError
from local_ppi.experiments import (
    ExperimentSpec,
    dumps,
    run_arrow_comparison,
    run_coverage,
    run_error_scatter,
    run_experiment,
)

TINY = dict(sizes=[[60, 600]], n_targets=3, n_replicates=6, h=1.0, pool_factor=3)


def tiny(kind="coverage", **over):
    doc = dict(TINY, kind=kind)
    doc.update(over)
    return ExperimentSpec.from_dict(doc)


def linear_bundle(tmp_path, n=200, N=2000, n_test=4):
    """2-D bundle with an exactly linear truth and perfect predictions."""
    rng = np.random.default_rng(0)
    m = lambda X: 1.0 + X[:, 0] - 2.0 * X[:, 1]  # noqa: E731
    parts = {"lab": rng.normal(size=(n, 2)), "unl": rng.normal(size=(N, 2)),
             "test": rng.normal(size=(n_test, 2)) * 0.3}
    for name, X in parts.items():
        cols = {"a": X[:, 0], "b": X[:, 1]}
        if name != "unl":
            cols["y"] = m(X)
        write_csv(tmp_path / f"{name}.csv", cols)
    write_predictions(tmp_path / "lab_pred.csv", m(parts["lab"]))
    write_predictions(tmp_path / "unl_pred.csv", m(parts["unl"]))
    manifest = {
        "schema_version": 1, "provenance": "linear", "features": ["a", "b"], "label": "y",
        "labeled": {"data": "lab.csv", "predictions": "lab_pred.csv"},
        "unlabeled": {"data": "unl.csv", "predictions": "unl_pred.csv"},
        "test": {"data": "test.csv"},
    }
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    return tmp_path / "manifest.json"


class TestSpec:
    def test_defaults(self):
        spec = ExperimentSpec.from_dict({"kind": "coverage", "sizes": [[100, 10000]]})
        assert (spec.n_targets, spec.n_replicates, spec.h, spec.alpha) == (20, 100, 0.5, 0.05)
        assert spec.sizes == [(100, 10000)]

    @pytest.mark.parametrize("doc,field", [
        ({"kind": "histogram", "sizes": [[1, 1]]}, "kind"),
        ({"kind": "coverage", "sizes": [[1, 1]], "n_replicates": 1}, "n_replicates"),
        ({"kind": "coverage", "sizes": [[1, 1]], "alpha": 1.5}, "alpha"),
        ({"kind": "coverage", "sizes": [[1, 1]], "bias_source": "plugin"}, "bias_source"),
        ({"kind": "coverage", "sizes": [[0, 1]]}, "sizes.0.0"),
        ({"kind": "coverage", "sizes": [[1, 1]], "h": 0}, "h"),
        ({"kind": "coverage", "sizes": [[1, 1]], "colour": "red"}, "<root>"),
        ({"kind": "coverage", "sizes": [[1, 1]], "predictor": {"kind": "svm"}}, "predictor.kind"),
        ({"sizes": [[1, 1]]}, "<root>"),
    ])
    def test_schema_errors_name_field(self, doc, field):
        with pytest.raises(SchemaError) as info:
            ExperimentSpec.from_dict(doc)
        assert info.value.field == field

    def test_methods_need_conventional(self):
        with pytest.raises(SchemaError) as info:
            ExperimentSpec(kind="coverage", sizes=[(1, 1)], methods=["ppi"])
        assert info.value.field == "methods"

    def test_json_round_trip(self, tmp_path):
        spec = tiny()
        path = tmp_path / "s.json"
        path.write_text(dumps(spec.to_dict()))
        assert ExperimentSpec.from_json(path).to_dict() == spec.to_dict()

    def test_invalid_json(self, tmp_path):
        (tmp_path / "s.json").write_text("{nope")
        with pytest.raises(SchemaError):
            ExperimentSpec.from_json(tmp_path / "s.json")


@pytest.fixture(scope="module")
def result():
    return run_coverage(tiny())


class TestCoverageRun:
    def test_rows(self, result):
        assert [(r["n"], r["method"]) for r in result.rows] == [(60, "conventional"), (60, "ppi")]
        for r in result.rows:
            for key in ("coverage", "debiased_coverage"):
                assert 0 <= r[key] <= 1 or math.isnan(r[key])
            assert r["trials"] + r["failures"] == 3 * 6
            assert r["truth"] == "simulation_truth"

    def test_se_decay_definition(self, result):
        con, ppi = result.row(60, 600, "conventional"), result.row(60, 600, "ppi")
        assert ppi["se_decay_pct"] == pytest.approx(
            100 * (1 - ppi["standard_error"] / con["standard_error"]))
        assert result.summary["se_decay_pct"]["60,600"] == ppi["se_decay_pct"]

    def test_gradient_blocks(self, result):
        r = result.row(60, 600, "conventional")
        assert r["grad_mse_nonlinear"] == pytest.approx(
            np.mean([r["grad_mse_1"], r["grad_mse_2"], r["grad_mse_3"]]))
        assert r["grad_mse_linear"] == pytest.approx(
            np.mean([r[f"grad_mse_{k}"] for k in (4, 5, 6, 7)]))

    def test_write_is_byte_deterministic(self, tmp_path):
        a = run_coverage(tiny()).write(tmp_path / "a")
        b = run_coverage(tiny()).write(tmp_path / "b")
        for name in ("table.csv", "targets.csv", "quadrants.csv", "summary.json"):
            assert (a / name).read_bytes() == (b / name).read_bytes()
        doc = json.loads((a / "summary.json").read_text())
        assert doc["schema_version"] == 1 and doc["config"]["kind"] == "coverage"

    def test_jobs_invariance(self, tmp_path):
        a = run_experiment(tiny(), jobs=1).write(tmp_path / "a")
        b = run_experiment(tiny(), jobs=3).write(tmp_path / "b")
        assert (a / "table.csv").read_bytes() == (b / "table.csv").read_bytes()
        assert (a / "targets.csv").read_bytes() == (b / "targets.csv").read_bytes()

    def test_seed_matters(self):
        a = run_coverage(tiny(seed=1)).rows[0]["standard_error"]
        b = run_coverage(tiny(seed=2)).rows[0]["standard_error"]
        assert a != b

    def test_invalid_cell_flagged(self):
        result = run_coverage(tiny(sizes=[[12, 100]], h=0.3))
        row = result.row(12, 100, "conventional")
        assert row["failures"] > 0.1 * 18 and row["valid"] is False
        assert result.summary["valid"] is False

    def test_hd_method(self):
        result = run_coverage(tiny(methods=["conventional", "ppi_hd"], t=0.001))
        assert {r["method"] for r in result.rows} == {"conventional", "ppi_hd"}


class TestArrow:
    def test_quadrants_sum_to_100(self):
        result = run_arrow_comparison(tiny("arrow_comparison", n_targets=6))
        q = result.tables["quadrants"][0]
        total = sum(q[f"{k}_pct"] for k in ("std_down_mse_down", "std_down_mse_up",
                                            "std_up_mse_down", "std_up_mse_up"))
        assert total == pytest.approx(100.0, abs=0.01)
        assert {t["quadrant"] for t in result.targets} <= {
            "std_down_mse_down", "std_down_mse_up", "std_up_mse_down", "std_up_mse_up"}

    def test_good_predictor_beats_zero_predictor(self):
        base = dict(kind="arrow_comparison", sizes=[[100, 10000]], n_targets=10,
                    n_replicates=30, h=0.5, seed=3)
        good = run_arrow_comparison(ExperimentSpec.from_dict(base))
        zero = run_arrow_comparison(ExperimentSpec.from_dict(dict(
            base, predictor={"kind": "noisy_oracle", "noise_sd": 0.0, "oracle": "zero"})))
        g = good.tables["quadrants"][0]["std_down_pct"]
        z = zero.tables["quadrants"][0]["std_down_pct"]
        assert g >= 60.0 and z < g

    def test_perfect_predictor_huge_unlabeled_set(self):
        spec = tiny("arrow_comparison", sizes=[[100, 20000]], n_targets=5, pool_factor=2,
                    predictor={"kind": "noisy_oracle", "noise_sd": 0.0})
        q = run_arrow_comparison(spec).tables["quadrants"][0]
        assert q["std_down_pct"] == 100.0


class TestErrorScatter:
    def test_outputs(self, tmp_path):
        result = run_error_scatter(tiny("error_scatter"))
        out = result.write(tmp_path / "scatter")
        band = result.tables["error_bands"][0]
        assert band["lower_con"] < band["upper_con"]
        assert band["mse_reduction_pct"] == pytest.approx(
            100 * (1 - band["mse_ppi"] / band["mse_con"]))
        lines = (out / "errors.csv").read_text().splitlines()
        assert lines[0] == "n,N,target,replicate,error_conventional,error_ppi"
        assert len(lines) == 1 + 3 * 6

    def test_knn_predictor(self):
        result = run_error_scatter(tiny("error_scatter", predictor={"kind": "knn", "k": 10,
                                                                    "n_train": 2000}))
        assert result.rows[0]["trials"] > 0


class TestBundleMode:
    def test_linear_truth_is_degenerate(self, tmp_path):
        manifest = linear_bundle(tmp_path)
        spec = ExperimentSpec.from_dict(dict(kind="coverage", sizes=[[50, 500]], n_targets=4,
                                             n_replicates=5, h=1.0, bias_correction=False,
                                             data={"source": "bundle", "manifest": str(manifest)}))
        result = run_coverage(spec)
        for r in result.rows:
            assert r["degenerate"] is True
            assert r["truth"] == "held_out_label"
            assert r["mse"] < 1e-20

    def test_relative_manifest(self, tmp_path):
        linear_bundle(tmp_path)
        (tmp_path / "spec.json").write_text(json.dumps({
            "kind": "coverage", "sizes": [[50, 500]], "n_targets": 2, "n_replicates": 3,
            "data": {"source": "bundle", "manifest": "manifest.json"}}))
        spec = ExperimentSpec.from_json(tmp_path / "spec.json")
        assert run_coverage(spec).rows[0]["trials"] == 6

    def test_size_exceeds_pool(self, tmp_path):
        manifest = linear_bundle(tmp_path)
        spec = ExperimentSpec.from_dict(dict(kind="coverage", sizes=[[500, 500]],
                                             data={"source": "bundle", "manifest": str(manifest)}))
        with pytest.raises(InputError):
            run_coverage(spec)


class TestBiasVariants:
    def test_population_needs_gaussian_kernel(self):
        with pytest.raises(SchemaError) as info:
            tiny(bias_source="population", kernel="epanechnikov")
        assert info.value.field == "bias_source"

    def test_every_variant_is_scored(self, result):
        for row in result.rows:
            for name in ("half", "theorem", "population"):
                assert 0.0 <= row[f"debiased_coverage_{name}"] <= 1.0

    def test_configured_variant_matches(self, result):
        for row in result.rows:
            assert row["debiased_coverage"] == row["debiased_coverage_half"]

    def test_population_source_is_used(self):
        res = run_coverage(tiny(bias_source="population"))
        for row in res.rows:
            assert row["debiased_coverage"] == row["debiased_coverage_population"]


@pytest.mark.parametrize("path", sorted(
    (Path(__file__).resolve().parents[1] / "experiments").glob("*.json")), ids=lambda p: p.name)
def test_shipped_specs_validate(path):
    assert ExperimentSpec.from_json(path).sizes
