"""Declarative experiment runner for the simulation studies.

An :class:`ExperimentSpec` names a list of ``(n, N)`` sizes. For every size
a labeled pool of ``pool_factor * n`` rows and an unlabeled pool of
``pool_factor * N`` rows is generated (or loaded from a bundle); each
target point is then estimated ``n_replicates`` times, every replicate on
a fresh resample of the pools, by the conventional and prediction-powered
estimators. The spread of the replicate estimates at a target is its
empirical standard error; coverage counts how often the replicate
interval ``estimate +/- z * SE`` contains the true value.

Random streams are keyed by ``(seed, size, target, replicate)`` so results
do not depend on the number of worker threads.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .data import (
    SIM_DIM,
    SimulationSpec,
    design_density,
    draw_features,
    generate,
    load_bundle,
    simulate_gradient,
    simulate_hessian,
    simulate_m,
    simulate_third_term,
    smoother_bias,
)
from .errors import InputError, LocalPPIError, PluginUnavailable, SchemaError, SingularDesign
from .estimators import conventional_fit, hd_fit, ppi_fit
from .kernels import KernelSpec, compute_moments
from .predictors import predictor_from_config
from .uncertainty import BIAS_FORMULAS, BiasTerms, normal_quantile, oracle_bias_terms, plugin_bias_terms

SCHEMA_VERSION = 1
KINDS = ("coverage", "error_scatter", "arrow_comparison", "distribution")
BIAS_SOURCES = ("asymptotic", "population")
MAX_FAILED_FRACTION = 0.1
# replicate spread at round-off level means the interval has collapsed
DEGENERATE_SE = 1e-10
NONLINEAR_BLOCK = (0, 1, 2)
LINEAR_BLOCK = (3, 4, 5, 6)


def load_schema(name):
    text = resources.files("local_ppi").joinpath("schemas", name).read_text(encoding="utf-8")
    return json.loads(text)


@dataclass
class ExperimentSpec:
    kind: str
    sizes: list
    n_targets: int = 20
    n_replicates: int = 100
    alpha: float = 0.05
    h: float = 0.5
    kernel: str = "gaussian"
    predictor: dict = field(
        default_factory=lambda: {"kind": "noisy_oracle", "noise_sd": math.sqrt(0.1), "seed": 1}
    )
    bias_correction: bool = True
    bias_formula: str = "half"
    bias_source: str = "asymptotic"
    seed: int = 0
    resampling: str = "subsample"
    pool_factor: int = 10
    noise_var: float = 0.2
    methods: list = field(default_factory=lambda: ["conventional", "ppi"])
    t: float | None = None
    data: dict = field(default_factory=lambda: {"source": "simulation"})
    name: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"unknown experiment kind {self.kind!r}", "kind")
        self.sizes = [tuple(int(v) for v in s) for s in self.sizes]
        if not self.sizes:
            raise SchemaError("sizes must not be empty", "sizes")
        for i, (n, N) in enumerate(self.sizes):
            if n < 1 or N < 1:
                raise SchemaError("sizes must be positive", f"sizes.{i}")
        for name in ("n_targets", "n_replicates", "pool_factor"):
            if getattr(self, name) < 1:
                raise SchemaError(f"{name} must be at least 1", name)
        if self.n_replicates < 2:
            raise SchemaError("n_replicates must be at least 2", "n_replicates")
        if not 0 < self.alpha < 1:
            raise SchemaError("alpha must lie in (0, 1)", "alpha")
        if not self.h > 0:
            raise SchemaError("h must be positive", "h")
        if self.bias_source not in BIAS_SOURCES:
            raise SchemaError(f"unknown bias source {self.bias_source!r}", "bias_source")
        if self.bias_source == "population" and (
            self.data.get("source") == "bundle" or self.kernel not in ("gaussian", "normal")
        ):
            raise SchemaError("population bias needs simulation data and the gaussian kernel",
                              "bias_source")
        if "conventional" not in self.methods or len(self.methods) < 2:
            raise SchemaError("methods must include 'conventional' and one PPI variant",
                              "methods")

    @classmethod
    def from_dict(cls, doc):
        validator = jsonschema.Draft202012Validator(load_schema("experiment_spec.schema.json"))
        errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
        if errors:
            err = errors[0]
            where = ".".join(str(p) for p in err.absolute_path) or "<root>"
            raise SchemaError(f"invalid experiment spec at {where}: {err.message}", where)
        doc = {k: v for k, v in doc.items() if k != "schema_version"}
        return cls(**doc)

    @classmethod
    def from_json(cls, path):
        with Path(path).open(encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as err:
                raise SchemaError(f"{path}: invalid JSON ({err})", "<root>") from None
        spec = cls.from_dict(doc)
        manifest = spec.data.get("manifest")
        if manifest and not Path(manifest).is_absolute():
            spec.data = dict(spec.data, manifest=str(Path(path).parent / manifest))
        return spec

    def to_dict(self):
        d = asdict(self)
        d["sizes"] = [list(s) for s in self.sizes]
        d["schema_version"] = SCHEMA_VERSION
        return d

    @property
    def ppi_method(self):
        return next(m for m in self.methods if m != "conventional")


# ------------------------------------------------------------------ pools

@dataclass(eq=False)
class _Cell:
    """Everything one ``(n, N)`` row needs: pools, targets and truth."""

    labeled: object
    unlabeled: object
    targets: np.ndarray
    truth_m: np.ndarray
    truth_grad: np.ndarray | None
    bias: list
    truth_kind: str
    variants: dict = field(default_factory=dict)


def _derive(*keys):
    return int(np.random.SeedSequence(list(keys)).generate_state(1)[0])


def _simulation_cell(spec, row, n, N, kernel):
    if spec.resampling == "subsample":
        pool_n, pool_N = spec.pool_factor * n, spec.pool_factor * N
    else:
        pool_n, pool_N = n, N
    sim = SimulationSpec(pool_n, pool_N, math.sqrt(spec.noise_var), _derive(spec.seed, row, 1))
    labeled, unlabeled, _ = generate(sim)
    training = None
    if spec.predictor.get("kind") == "knn":
        n_train = int(spec.predictor.get("n_train", 10 * pool_n))
        training, _, _ = generate(SimulationSpec(n_train, 1, sim.noise_sd, _derive(spec.seed, row, 2)))
    pred = predictor_from_config(
        {k: v for k, v in spec.predictor.items() if k != "n_train"}, training=training
    )
    labeled = pred.attach(labeled)
    unlabeled = pred.attach(unlabeled)

    targets = draw_features(spec.n_targets, _derive(spec.seed, row, 3))
    truth_m = simulate_m(targets)
    truth_grad = simulate_gradient(targets)
    mom = compute_moments(kernel)
    asymptotic = {name: [] for name in BIAS_FORMULAS}
    population = []
    for j, x in enumerate(targets):
        f, df = design_density(x)
        for name in BIAS_FORMULAS:
            asymptotic[name].append(oracle_bias_terms(
                simulate_hessian(x), spec.h, kernel, f, df,
                simulate_third_term(x, mom.mu4), name,
            ))
        if spec.bias_source == "population" or kernel.family == "gaussian":
            vb, gb = smoother_bias(x, spec.h, seed=_derive(spec.seed, row, 4, j))
            population.append(BiasTerms(vb / spec.h**2, gb, spec.h, "population",
                                        spec.bias_formula))
    bias = population if spec.bias_source == "population" else asymptotic[spec.bias_formula]
    # every variant is scored on the same replicates, so comparing them is free
    variants = {name: [b.value_shift for b in terms] for name, terms in asymptotic.items()}
    if population:
        variants["population"] = [b.value_shift for b in population]
    return _Cell(labeled, unlabeled, targets, truth_m, truth_grad, bias, "simulation_truth",
                 variants)


def _bundle_cell(spec, row, n, N, kernel, bundle):
    if bundle.test is None:
        raise InputError("a bundle experiment needs a 'test' block providing target rows")
    labeled, unlabeled = bundle.labeled, bundle.unlabeled
    if labeled.predictions is None or unlabeled.predictions is None:
        pred = predictor_from_config(spec.predictor)
        labeled, unlabeled = pred.attach(labeled), pred.attach(unlabeled)
    if spec.resampling == "subsample" and (n > labeled.n or N > unlabeled.n):
        raise InputError(f"size ({n}, {N}) exceeds the bundle pools ({labeled.n}, {unlabeled.n})")
    k = min(spec.n_targets, bundle.test.n)
    targets = bundle.test.features[:k]
    bias = []
    for x in targets:
        try:
            bias.append(plugin_bias_terms(labeled, x, spec.h, kernel, spec.bias_formula))
        except PluginUnavailable:
            bias.append(None)
    return _Cell(labeled, unlabeled, np.array(targets), bundle.test.labels[:k].copy(), None,
                 bias, "held_out_label")


# -------------------------------------------------------------- replicates

def _fit_one(method, lab, unl, x, spec, kernel):
    if method == "conventional":
        return conventional_fit(lab, x, spec.h, kernel)
    if method == "ppi":
        return ppi_fit(lab, unl, x, spec.h, kernel)
    return hd_fit(lab, unl, x, spec.h, kernel, spec.t)


def _run_target(spec, cell, row, n, N, j, kernel):
    """Replicate estimates at target ``j``: ``{method: (R, p+1) array}``."""
    x = cell.targets[j]
    p = x.shape[0]
    out = {m: np.full((spec.n_replicates, p + 1), np.nan) for m in spec.methods}
    for r in range(spec.n_replicates):
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, row, j, r]))
        if spec.resampling == "subsample":
            li = np.sort(rng.choice(cell.labeled.n, n, replace=False))
            ui = np.sort(rng.choice(cell.unlabeled.n, N, replace=False))
        else:
            li = rng.integers(0, cell.labeled.n, n)
            ui = rng.integers(0, cell.unlabeled.n, N)
        lab, unl = cell.labeled.take(li), cell.unlabeled.take(ui)
        for m in spec.methods:
            try:
                out[m][r] = _fit_one(m, lab, unl, x, spec, kernel).theta
            except SingularDesign:
                pass
    return out


# ---------------------------------------------------------------- summary

def _nanstd(a):
    a = a[~np.isnan(a)]
    return float(np.std(a, ddof=1)) if a.size >= 2 else math.nan


def _mean(values):
    v = np.asarray(values, dtype=float)
    v = v[~np.isnan(v)]
    return float(v.mean()) if v.size else math.nan


@dataclass
class ExperimentResult:
    """Summary tables of one experiment run.

    ``rows`` has one entry per ``(n, N, method)``; ``targets`` one per
    ``(n, N, target)``; ``tables`` holds kind-specific extras keyed by
    file stem.
    """

    spec: ExperimentSpec
    rows: list
    targets: list
    tables: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)

    def row(self, n, N, method):
        for r in self.rows:
            if r["n"] == n and r["N"] == N and r["method"] == method:
                return r
        raise KeyError((n, N, method))

    def write(self, out_dir):
        """Write ``table.csv``, ``targets.csv``, extra tables and ``summary.json``."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_table(out / "table.csv", self.rows)
        _write_table(out / "targets.csv", self.targets)
        for stem, rows in sorted(self.tables.items()):
            _write_table(out / f"{stem}.csv", rows)
        doc = {
            "schema_version": SCHEMA_VERSION,
            "kind": self.spec.kind,
            "config": self.spec.to_dict(),
            "rows": self.rows,
            "summary": self.summary,
        }
        (out / "summary.json").write_text(dumps(doc) + "\n", encoding="utf-8")
        return out


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dumps(doc):
    """Deterministic JSON: sorted keys, non-finite floats as null."""
    return json.dumps(_clean(doc), sort_keys=True, indent=2, allow_nan=False)


def _cell_text(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v)) if math.isfinite(v) else ""
    return str(v)


def _write_table(path, rows):
    buf = io.StringIO()
    if rows:
        names = list(rows[0])
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(names)
        for r in rows:
            w.writerow([_cell_text(r.get(k, "")) for k in names])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def _quadrant(dstd, dmse):
    s = "std_down" if dstd < 0 else "std_up"
    m = "mse_down" if dmse < 0 else "mse_up"
    return f"{s}_{m}"


QUADRANTS = ("std_down_mse_down", "std_down_mse_up", "std_up_mse_down", "std_up_mse_up")


def _summarize_cell(spec, cell, n, N, estimates):
    """Per-method rows and per-target records for one size cell."""
    z = normal_quantile(1 - spec.alpha / 2)
    T = len(cell.targets)
    methods = spec.methods
    p = cell.targets.shape[1]
    rows, per_target, errors = [], [], []
    stats = {m: {"se": [], "hits": 0, "dhits": 0, "trials": 0, "sq": [], "fail": 0,
                 "gsq": [], "gse": [], "degenerate": 0, "errs": [],
                 "vhits": {v: 0 for v in cell.variants}} for m in methods}
    for j in range(T):
        truth = cell.truth_m[j]
        shift = 0.0
        if spec.bias_correction and cell.bias[j] is not None:
            shift = cell.bias[j].value_shift
        rec = {"n": n, "N": N, "target": j, "truth": truth, "bias_shift": shift}
        for m in methods:
            est = estimates[j][m]
            ok = ~np.isnan(est[:, 0])
            st = stats[m]
            st["fail"] += int((~ok).sum())
            vals = est[ok, 0]
            se = _nanstd(vals)
            err = vals - truth
            st["errs"].append(err)
            mse = float(np.mean(err**2)) if vals.size else math.nan
            cov = dcov = math.nan
            if vals.size >= 2 and math.isfinite(se):
                if se <= DEGENERATE_SE * max(1.0, abs(truth)):
                    st["degenerate"] += 1
                h = np.abs(err) <= z * se
                dh = np.abs(err - shift) <= z * se
                st["hits"] += int(h.sum())
                st["dhits"] += int(dh.sum())
                for v, shifts in cell.variants.items():
                    st["vhits"][v] += int((np.abs(err - shifts[j]) <= z * se).sum())
                st["trials"] += int(vals.size)
                cov, dcov = float(h.mean()), float(dh.mean())
                st["se"].append(se)
                st["sq"].append(err**2)
            if cell.truth_grad is not None and vals.size >= 2:
                gerr = est[ok, 1:] - cell.truth_grad[j]
                st["gsq"].append(np.mean(gerr**2, axis=0))
                st["gse"].append(np.std(est[ok, 1:], axis=0, ddof=1))
            tag = "con" if m == "conventional" else m
            rec.update({f"se_{tag}": se, f"mse_{tag}": mse, f"coverage_{tag}": cov,
                        f"debiased_coverage_{tag}": dcov, f"failures_{tag}": int((~ok).sum())})
        ppi_tag = spec.ppi_method
        dstd = rec[f"se_{ppi_tag}"] - rec["se_con"]
        dmse = rec[f"mse_{ppi_tag}"] - rec["mse_con"]
        rec["width_ratio"] = rec[f"se_{ppi_tag}"] / rec["se_con"] if rec["se_con"] else math.nan
        rec["quadrant"] = _quadrant(dstd, dmse) if math.isfinite(dstd + dmse) else "undefined"
        per_target.append(rec)

    se_con = _mean(stats["conventional"]["se"])
    attempts = T * spec.n_replicates
    for m in methods:
        st = stats[m]
        se = _mean(st["se"])
        all_sq = np.concatenate(st["sq"]) if st["sq"] else np.array([])
        row = {
            "n": n,
            "N": N,
            "method": m,
            "coverage": st["hits"] / st["trials"] if st["trials"] else math.nan,
            "debiased_coverage": st["dhits"] / st["trials"] if st["trials"] else math.nan,
            "trials": st["trials"],
            "standard_error": se,
            "se_decay_pct": 100.0 * (1.0 - se / se_con) if m != "conventional" else 0.0,
            "mse": float(all_sq.mean()) if all_sq.size else math.nan,
            "failures": st["fail"],
            "valid": st["fail"] <= MAX_FAILED_FRACTION * attempts,
            "degenerate": st["degenerate"] > 0,
            "truth": cell.truth_kind,
        }
        for v, hits in st["vhits"].items():
            row[f"debiased_coverage_{v}"] = hits / st["trials"] if st["trials"] else math.nan
        if st["gsq"]:
            gmse = np.mean(st["gsq"], axis=0)
            gse = np.mean(st["gse"], axis=0)
            row["grad_mse_nonlinear"] = float(gmse[list(NONLINEAR_BLOCK)].mean())
            row["grad_mse_linear"] = float(gmse[list(LINEAR_BLOCK)].mean())
            for k in range(p):
                row[f"grad_mse_{k + 1}"] = float(gmse[k])
                row[f"grad_std_mse_{k + 1}"] = float(gmse[k] / gse[k]) if gse[k] > 0 else math.nan
        rows.append(row)
    errs = {m: (np.concatenate(stats[m]["errs"]) if stats[m]["errs"] else np.array([]))
            for m in methods}
    return rows, per_target, errs


def _band(errs):
    if errs.size == 0:
        return math.nan, math.nan
    lo, hi = np.quantile(errs, [0.025, 0.975])
    return float(lo), float(hi)


def run_experiment(spec, jobs=1, progress=None):
    """Run ``spec`` and return an :class:`ExperimentResult`."""
    kernel = KernelSpec(spec.kernel, SIM_DIM)
    bundle = None
    if spec.data.get("source") == "bundle":
        bundle = load_bundle(spec.data["manifest"])
        kernel = KernelSpec(spec.kernel, len(bundle.features))
    rows, targets, tables = [], [], {"quadrants": [], "error_bands": [], "errors": [],
                                     "distribution": []}
    for row_index, (n, N) in enumerate(spec.sizes):
        if bundle is None:
            cell = _simulation_cell(spec, row_index, n, N, kernel)
        else:
            cell = _bundle_cell(spec, row_index, n, N, kernel, bundle)
        work = lambda j: _run_target(spec, cell, row_index, n, N, j, kernel)  # noqa: E731
        if jobs and jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                estimates = list(pool.map(work, range(len(cell.targets))))
        else:
            estimates = [work(j) for j in range(len(cell.targets))]
        r, t, errs = _summarize_cell(spec, cell, n, N, estimates)
        rows.extend(r)
        targets.extend(t)
        if progress:
            progress(n, N)

        counted = [rec["quadrant"] for rec in t if rec["quadrant"] != "undefined"]
        q = {"n": n, "N": N, "targets": len(counted)}
        for name in QUADRANTS:
            q[f"{name}_pct"] = 100.0 * counted.count(name) / len(counted) if counted else math.nan
        q["std_down_pct"] = q["std_down_mse_down_pct"] + q["std_down_mse_up_pct"]
        tables["quadrants"].append(q)

        con, ppi = errs["conventional"], errs[spec.ppi_method]
        lo_c, hi_c = _band(con)
        lo_p, hi_p = _band(ppi)
        mse_c = float(np.mean(con**2)) if con.size else math.nan
        mse_p = float(np.mean(ppi**2)) if ppi.size else math.nan
        tables["error_bands"].append({
            "n": n, "N": N,
            "lower_con": lo_c, "upper_con": hi_c, "lower_ppi": lo_p, "upper_ppi": hi_p,
            "band_width_ratio": (hi_p - lo_p) / (hi_c - lo_c) if hi_c > lo_c else math.nan,
            "mse_con": mse_c, "mse_ppi": mse_p,
            "mse_reduction_pct": 100.0 * (1 - mse_p / mse_c) if mse_c > 0 else math.nan,
        })
        for m, e in errs.items():
            tables["distribution"].append({
                "n": n, "N": N, "method": m, "count": int(e.size),
                "mean_error": float(e.mean()) if e.size else math.nan,
                "sd_error": float(e.std(ddof=1)) if e.size > 1 else math.nan,
            })
        if spec.kind in ("error_scatter", "distribution"):
            for j, est in enumerate(estimates):
                for rep in range(spec.n_replicates):
                    rec = {"n": n, "N": N, "target": j, "replicate": rep}
                    for m in spec.methods:
                        rec[f"error_{m}"] = est[m][rep, 0] - cell.truth_m[j]
                    tables["errors"].append(rec)

    keep = {
        "coverage": ("quadrants",),
        "arrow_comparison": ("quadrants",),
        "error_scatter": ("error_bands", "errors"),
        "distribution": ("distribution", "errors"),
    }[spec.kind]
    tables = {k: v for k, v in tables.items() if k in keep}
    summary = {
        "se_decay_pct": {f"{n},{N}": next(r["se_decay_pct"] for r in rows
                                          if r["n"] == n and r["N"] == N
                                          and r["method"] != "conventional")
                         for n, N in spec.sizes},
        "valid": all(r["valid"] for r in rows),
    }
    if "quadrants" in tables:
        summary["quadrants"] = tables["quadrants"]
    if "error_bands" in tables:
        summary["error_bands"] = tables["error_bands"]
    return ExperimentResult(spec, rows, targets, tables, summary)


def run_coverage(spec, jobs=1):
    return run_experiment(_with_kind(spec, "coverage"), jobs)


def run_arrow_comparison(spec, jobs=1):
    return run_experiment(_with_kind(spec, "arrow_comparison"), jobs)


def run_error_scatter(spec, jobs=1):
    return run_experiment(_with_kind(spec, "error_scatter"), jobs)


def run_distribution(spec, jobs=1):
    return run_experiment(_with_kind(spec, "distribution"), jobs)


def _with_kind(spec, kind):
    if spec.kind == kind:
        return spec
    d = spec.to_dict()
    d.pop("schema_version")
    d["kind"] = kind
    return ExperimentSpec(**d)


__all__ = [
    "ExperimentResult",
    "ExperimentSpec",
    "LocalPPIError",
    "dumps",
    "run_arrow_comparison",
    "run_coverage",
    "run_distribution",
    "run_error_scatter",
    "run_experiment",
]
