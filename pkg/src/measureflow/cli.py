"""Configuration-driven runner: ``measureflow run|sweep <config.yaml>`` and ``measureflow catalog``.

A config is a YAML mapping.  Every run writes ``report.json``,
``terms.csv`` (per sample and term), ``series.csv`` (cumulative terms of
the first sample, when available) and ``manifest.json`` into the output
directory.  Outputs depend only on the config and its seed; the worker
count (``--workers`` or ``MEASUREFLOW_WORKERS``) never changes them.

Exit codes: 0 when every threshold passes, 1 on a threshold violation,
2 on a configuration error.
"""

import argparse
import csv
import json
import math
import os
import platform
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy
import yaml

from . import __version__
from .calculus import fd_lift_check
from .fields import PoissonField, RandomField, SpaceMeasureField, leibniz_check
from .measures import EmpiricalMeasure
from .paths import brownian_motion, build_time_grid, derive_seed, make_rng, sample_drivers, simulate_semimartingale
from .scenarios import (Scenario, ScenarioError, Sizes, catalog, coefficients_from_spec, field_from_spec,
                        test_function_from_spec)
from .verifier import (VerificationError, convergence_study, run_ito, run_ito_wentzell, verify_conditional,
                       verify_full_measure, verify_poisson, verify_time_space_measure)


class ConfigError(ValueError):
    """Malformed or incompatible configuration."""


FORMULAS = {
    "thm1": ("pathwise",),
    "thm2": ("pathwise",),
    "thm3": ("mc-law", "pathwise-empirical"),
    "thm4": ("mc-conditional",),
    "coro1": ("mc-law", "pathwise-empirical"),
    "coro1-alt": ("mc-law", "pathwise-empirical"),
    "coro2": ("mc-conditional",),
    "coro3": ("mc-law", "pathwise-empirical"),
    "coro4": ("mc-conditional",),
    "leibniz": ("check",),
    "lift-check": ("check",),
}
CONDITIONAL = ("thm4", "coro2", "coro4")
TOP_KEYS = {"name", "formula", "mode", "seed", "coefficients", "field", "test_function", "driver",
            "driver_coefficients", "field_events", "x0", "interval", "sizes", "options", "thresholds",
            "sweep", "output"}
DEFAULT_THRESHOLDS = {"se_multiplier": 3.0, "c": 5.0, "c_mc": 0.0, "gap_tol": 1e-10,
                      "leibniz_tol": 1e-6, "lift_tol": 1e-5}
DEFAULT_OPTIONS = {"covariation": "generator-exact", "policy": None, "corrections": None}


# --------------------------------------------------------------------------
# Parsing
# --------------------------------------------------------------------------

def _key_lines(text):
    """Map dotted key paths of a YAML document to 1-based line numbers."""
    lines = {}

    def walk(node, prefix):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                path = f"{prefix}.{k.value}" if prefix else str(k.value)
                lines[path] = k.start_mark.line + 1
                walk(v, path)
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                path = f"{prefix}[{i}]"
                lines.setdefault(path, v.start_mark.line + 1)
                walk(v, path)

    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return lines
    if root is not None:
        walk(root, "")
    return lines


def _num(value, where, integer=False):
    """Number from YAML, accepting scientific notation written as a string."""
    if isinstance(value, bool):
        raise ConfigError(f"{where}: expected a number, got {value!r}")
    try:
        x = float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}: expected a number, got {value!r}") from None
    if integer:
        if not x.is_integer():
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return int(x)
    return x


def _numbers(obj):
    """Recursively convert numeric-looking strings (e.g. ``1e-3``) to floats."""
    if isinstance(obj, dict):
        return {k: _numbers(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_numbers(v) for v in obj]
    if isinstance(obj, str):
        try:
            return float(obj)
        except ValueError:
            return obj
    return obj


@dataclass(eq=False)
class ScenarioConfig:
    """Validated configuration; ``raw`` is the normalized mapping echoed in manifests."""

    raw: dict
    scenario: object = field(default=None, repr=False)
    test_function: object = field(default=None, repr=False)
    coeffs: object = field(default=None, repr=False)
    field: object = field(default=None, repr=False)

    def __eq__(self, other):
        return isinstance(other, ScenarioConfig) and self.raw == other.raw

    @property
    def name(self):
        return self.raw["name"]

    @property
    def formula(self):
        return self.raw["formula"]

    @property
    def mode(self):
        return self.raw["mode"]

    @property
    def seed(self):
        return self.raw["seed"]

    @property
    def sizes(self):
        s = self.raw["sizes"]
        return Sizes(s["n_steps"], s["N"], s["M"], s.get("N_tilde"))

    @property
    def options(self):
        return self.raw["options"]

    @property
    def thresholds(self):
        return self.raw["thresholds"]

    @property
    def span(self):
        s, t = self.raw["interval"]
        return t - s


def _normalize(data):
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping at the top level")
    unknown = set(data) - TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    for key in ("name", "formula"):
        if key not in data:
            raise ConfigError(f"missing required field '{key}'")
    formula = data["formula"]
    if formula not in FORMULAS:
        raise ConfigError(f"formula: unknown formula {formula!r}; choose from {sorted(FORMULAS)}")
    mode = data.get("mode", FORMULAS[formula][0])
    if mode not in FORMULAS[formula]:
        raise ConfigError(f"mode: formula {formula!r} supports modes {list(FORMULAS[formula])}, got {mode!r}")
    raw = {"name": str(data["name"]), "formula": formula, "mode": mode,
           "seed": _num(data.get("seed", 0), "seed", integer=True)}
    interval = data.get("interval", [0.0, 1.0])
    if not isinstance(interval, list) or len(interval) != 2:
        raise ConfigError("interval: expected [t_start, t_end]")
    s, t = (_num(v, f"interval[{i}]") for i, v in enumerate(interval))
    if not t > s:
        raise ConfigError("interval: t_end must exceed t_start")
    raw["interval"] = [s, t]
    sz = data.get("sizes", {})
    if not isinstance(sz, dict):
        raise ConfigError("sizes: expected a table")
    unknown = set(sz) - {"dt", "n_steps", "N", "M", "N_tilde"}
    if unknown:
        raise ConfigError(f"sizes: unknown keys {sorted(unknown)}")
    if "dt" in sz and "n_steps" in sz:
        raise ConfigError("sizes: give either dt or n_steps, not both")
    if "dt" in sz:
        dt = _num(sz["dt"], "sizes.dt")
        if not dt > 0:
            raise ConfigError("sizes.dt must be positive")
        n_steps = int(round((t - s) / dt))
        if n_steps < 1 or abs(n_steps * dt - (t - s)) > 1e-9 * (t - s):
            raise ConfigError(f"sizes.dt: {dt!r} does not divide the interval length {t - s!r}")
    else:
        n_steps = _num(sz.get("n_steps", 100), "sizes.n_steps", integer=True)
    sizes = {"n_steps": n_steps, "N": _num(sz.get("N", 100), "sizes.N", integer=True),
             "M": _num(sz.get("M", 100), "sizes.M", integer=True)}
    if "N_tilde" in sz:
        sizes["N_tilde"] = _num(sz["N_tilde"], "sizes.N_tilde", integer=True)
    try:
        Sizes(sizes["n_steps"], sizes["N"], sizes["M"], sizes.get("N_tilde"))
    except ScenarioError as exc:
        raise ConfigError(str(exc)) from exc
    raw["sizes"] = sizes
    opts = data.get("options", {}) or {}
    if not isinstance(opts, dict) or set(opts) - set(DEFAULT_OPTIONS):
        raise ConfigError(f"options: allowed keys are {sorted(DEFAULT_OPTIONS)}")
    raw["options"] = {**DEFAULT_OPTIONS, **opts}
    th = data.get("thresholds", {}) or {}
    if not isinstance(th, dict) or set(th) - set(DEFAULT_THRESHOLDS):
        raise ConfigError(f"thresholds: allowed keys are {sorted(DEFAULT_THRESHOLDS)}")
    raw["thresholds"] = {k: _num(v, f"thresholds.{k}") for k, v in {**DEFAULT_THRESHOLDS, **th}.items()}
    for key in ("coefficients", "field", "test_function", "driver_coefficients"):
        if key in data:
            raw[key] = _numbers(data[key])
    raw["driver"] = data.get("driver", "none")
    raw["field_events"] = data.get("field_events", "own")
    raw["x0"] = _numbers(data.get("x0", 0.0))
    if "sweep" in data:
        sw = data["sweep"]
        if not isinstance(sw, dict) or "parameter" not in sw or "levels" not in sw:
            raise ConfigError("sweep: expected a table with 'parameter' and 'levels'")
        if sw["parameter"] not in ("dt", "N", "M"):
            raise ConfigError("sweep.parameter: choose from dt, N, M")
        levels = [_num(v, f"sweep.levels[{i}]") for i, v in enumerate(sw["levels"])]
        if len(levels) < 3:
            raise ConfigError("sweep.levels: a slope fit needs at least 3 levels")
        out = {"parameter": sw["parameter"], "levels": levels,
               "statistic": sw.get("statistic", "standard_error" if sw["parameter"] == "M" else "rms")}
        if "slope" in sw:
            lo, hi = (_num(v, "sweep.slope") for v in sw["slope"])
            out["slope"] = [lo, hi]
        raw["sweep"] = out
    raw["output"] = str(data.get("output", os.path.join("runs", raw["name"])))
    return raw


def _build(raw):
    """Construct the scenario objects and check formula/scenario compatibility."""
    formula = raw["formula"]
    s, t = raw["interval"]
    if formula == "thm1":
        if "test_function" not in raw:
            raise ConfigError("thm1 needs field 'test_function'")
        if "coefficients" not in raw:
            raise ConfigError("missing required field 'coefficients'")
        g = test_function_from_spec(raw["test_function"], "test_function")
        coeffs = coefficients_from_spec(raw["coefficients"])
        if coeffs.has_common:
            raise ConfigError("thm1 takes coefficients without a common part")
        if g.dim != coeffs.dim:
            raise ConfigError(f"test_function: dimension {g.dim} differs from state dimension {coeffs.dim}")
        return ScenarioConfig(raw, test_function=g, coeffs=coeffs)
    if "field" not in raw:
        raise ConfigError(f"formula {formula!r} needs field 'field'")
    fld = field_from_spec(raw["field"])
    if formula in ("leibniz", "lift-check"):
        if fld.structure.spatial or not fld.structure.measured:
            raise ConfigError(f"{formula}: field layers must depend on the measure only")
        if formula == "leibniz" and not fld.H:
            raise ConfigError("leibniz: field needs H layers (the integrands)")
        if formula == "lift-check" and not fld.F0:
            raise ConfigError("lift-check: field needs an F0 layer")
        return ScenarioConfig(raw, field=fld)
    if "coefficients" not in raw:
        raise ConfigError("missing required field 'coefficients'")
    coeffs = coefficients_from_spec(raw["coefficients"])
    if formula in CONDITIONAL and not coeffs.has_common:
        raise ConfigError(f"formula {formula!r} needs a common/idiosyncratic split: missing field "
                          "'coefficients.sigma_common' (use template 'common-noise')")
    need = {"thm2": SpaceMeasureField, "coro1": SpaceMeasureField, "coro1-alt": SpaceMeasureField,
            "coro2": SpaceMeasureField, "coro3": PoissonField, "coro4": PoissonField}
    if formula in need and not isinstance(fld, need[formula]):
        kind = {SpaceMeasureField: "space-measure", PoissonField: "poisson"}[need[formula]]
        raise ConfigError(f"field.kind: formula {formula!r} needs a field of kind '{kind}'")
    if formula in ("thm3", "thm4") and not isinstance(fld, RandomField):
        raise ConfigError(f"field.kind: formula {formula!r} needs a field of kind 'measure'")
    if formula == "thm2" and fld.structure.measured:
        raise ConfigError("field: thm2 fields must not depend on the measure")
    driver_coeffs = None
    if "driver_coefficients" in raw:
        driver_coeffs = coefficients_from_spec(raw["driver_coefficients"], "driver_coefficients")
    try:
        scn = Scenario(raw["name"], coeffs, fld, raw["x0"], s, t, raw["driver"], driver_coeffs,
                       raw["field_events"], t - s)
    except ScenarioError as exc:
        raise ConfigError(str(exc)) from exc
    if scn.driver == "common" and formula not in CONDITIONAL:
        raise ConfigError(f"driver: 'common' needs a conditional formula, not {formula!r}")
    if scn.driver == "state" and formula not in ("thm2", "coro1", "coro1-alt", "coro2"):
        raise ConfigError(f"driver: 'state' needs a state path (thm2 or coro*), not {formula!r}")
    return ScenarioConfig(raw, scn, coeffs=coeffs, field=fld)


def parse_config(source):
    """Parse and validate a config from a path, YAML text or mapping."""
    lines = {}
    if isinstance(source, dict):
        data = source
    else:
        text = Path(source).read_text() if isinstance(source, Path) or (
            isinstance(source, str) and "\n" not in source and os.path.exists(source)) else source
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
            raise ConfigError(f"YAML parse error{where}: {getattr(exc, 'problem', exc)}") from exc
        lines = _key_lines(text)
    try:
        raw = _normalize(data)
        return _build(raw)
    except (ConfigError, ScenarioError, VerificationError) as exc:
        msg = str(exc)
        line = _line_of(msg, lines)
        raise ConfigError(f"{msg} (line {line})" if line else msg) from exc


def _line_of(msg, lines):
    """Line of the first key path named in an error message (quoted paths win)."""
    candidates = re.findall(r"'([\w.\[\]-]+)'", msg) + [msg.split(":", 1)[0].split(" ")[0]]
    for key in candidates:
        while key:
            if key in lines:
                return lines[key]
            key = key.rsplit(".", 1)[0] if "." in key else (key.split("[")[0] if "[" in key else "")
    return None


# --------------------------------------------------------------------------
# Execution
# --------------------------------------------------------------------------

@dataclass
class CheckReport:
    """Result of a deterministic derivative check over randomized instances."""

    formula: str
    values: tuple
    seed: int
    config: dict

    def to_dict(self, samples=True):
        out = {"formula": self.formula, "mode": "check", "seed": self.seed, "config": self.config,
               "n_samples": len(self.values), "aggregate": {"max": float(max(self.values))}}
        if samples:
            out["samples"] = [float(v) for v in self.values]
        return out


def _run_check(cfg):
    raw, sizes = cfg.raw, cfg.sizes
    fld = cfg.field
    s, t = raw["interval"]
    vals = []
    for m in range(sizes.M):
        rng = make_rng(raw["seed"], m)
        x = rng.normal(size=(sizes.N, fld.dim))
        if cfg.formula == "leibniz":
            base = build_time_grid(s, t, sizes.n_steps)
            d, grid = sample_drivers(base, 1, None, derive_seed(raw["seed"], m, 1))
            w = simulate_semimartingale(brownian_motion(), np.zeros(1), d, grid=grid)
            vals.append(float(leibniz_check(fld.H, w, x, rng.normal(size=x.shape))))
        else:
            vals.append(float(fd_lift_check(fld.F0[0].measure, EmpiricalMeasure(x))))
    return CheckReport(cfg.formula, tuple(vals), raw["seed"], raw)


def execute(cfg, sizes=None, seed=None, workers=None, keep_series=True):
    """Run the configured verification and return its report."""
    sizes = cfg.sizes if sizes is None else sizes
    seed = cfg.seed if seed is None else seed
    f, mode, o = cfg.formula, cfg.mode, cfg.options
    scn = cfg.scenario
    cov = o["covariation"]
    kw = dict(workers=workers, keep_series=keep_series)
    if f in ("leibniz", "lift-check"):
        return _run_check(cfg)
    if f == "thm1":
        s, t = cfg.raw["interval"]
        return run_ito(cfg.test_function, cfg.coeffs, sizes, seed, cfg.raw["x0"], s, t, cov, **kw)
    if f == "thm2":
        return run_ito_wentzell(scn, sizes, seed, cov, **kw)
    if f == "thm3":
        return verify_full_measure(scn, mode, sizes, seed, o["corrections"], o["policy"], cov, **kw)
    if f == "thm4":
        return verify_conditional(scn, sizes, seed, cov, **kw)
    if f in ("coro1", "coro1-alt", "coro2"):
        return verify_time_space_measure(scn, f, sizes, seed, "mc-law" if f == "coro2" else mode,
                                         o["corrections"], cov, **kw)
    return verify_poisson(scn, "conditional" if f == "coro4" else "full", sizes, seed,
                          o["policy"] or "law", "mc-law" if f == "coro4" else mode, **kw)


def evaluate_thresholds(cfg, report):
    """Named threshold checks ``{name: {value, limit, passed}}``."""
    th = cfg.thresholds
    checks = {}
    if isinstance(report, CheckReport):
        tol = th["leibniz_tol"] if cfg.formula == "leibniz" else th["lift_tol"]
        v = max(report.values)
        checks["max discrepancy"] = {"value": v, "limit": tol, "passed": bool(v <= tol)}
        return checks
    slack = math.sqrt(report.dt) * report.scale
    if report.mode in ("pathwise", "pathwise-empirical"):
        limit = th["c"] * slack
        checks["rms residual"] = {"value": report.rms_residual, "limit": limit,
                                  "passed": bool(report.rms_residual <= limit)}
        if report.breakdowns and "oracle gap" in report.breakdowns[0].extras:
            gap = max(abs(b.extras["oracle gap"]) for b in report.breakdowns)
            checks["oracle gap"] = {"value": gap, "limit": th["gap_tol"], "passed": bool(gap <= th["gap_tol"])}
    else:
        se = report.standard_error
        limit = max(th["se_multiplier"] * se, th["c_mc"] * slack)
        v = abs(report.mean_residual)
        checks["|mean residual|"] = {"value": v, "limit": limit, "passed": bool(v <= limit)}
    return checks


def _sweep_sizes(cfg, level):
    sz = cfg.raw["sizes"]
    p = cfg.raw["sweep"]["parameter"]
    if p == "dt":
        n = int(round(cfg.span / level))
        if n < 1 or abs(n * level - cfg.span) > 1e-9 * cfg.span:
            raise ConfigError(f"sweep.levels: dt={level!r} does not divide the interval length")
        return Sizes(n, sz["N"], sz["M"], sz.get("N_tilde"))
    if p == "N":
        return Sizes(sz["n_steps"], int(level), sz["M"], sz.get("N_tilde"))
    return Sizes(sz["n_steps"], sz["N"], int(level), sz.get("N_tilde"))


def run_sweep(cfg, workers=None):
    if "sweep" not in cfg.raw:
        raise ConfigError("missing required field 'sweep'")
    if cfg.formula in ("leibniz", "lift-check"):
        raise ConfigError(f"sweep: formula {cfg.formula!r} has no residual to sweep")
    sw = cfg.raw["sweep"]
    return convergence_study(lambda lv, seed: execute(cfg, _sweep_sizes(cfg, lv), seed, workers, False),
                             sw["levels"], sw["parameter"], sw["statistic"], cfg.seed)


def _clean(obj):
    """JSON-safe copy: NaN/inf become None, numpy scalars become Python numbers."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(obj) if math.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    return obj


def _dump(path, obj):
    path.write_text(json.dumps(_clean(obj), sort_keys=True, indent=2, ensure_ascii=False) + "\n")


def _write_terms(path, report):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample", "kind", "name", "value"])
        if isinstance(report, CheckReport):
            for i, v in enumerate(report.values):
                w.writerow([i, "check", "discrepancy", repr(float(v))])
            return
        for i, b in enumerate(report.breakdowns):
            w.writerow([i, "lhs", "lhs", repr(b.lhs)])
            for k, v in b.terms.items():
                w.writerow([i, "term", k, repr(v)])
            for k, v in b.extras.items():
                w.writerow([i, "extra", k, repr(v)])
            w.writerow([i, "residual", "residual", repr(b.residual)])


def _write_series(path, report):
    if isinstance(report, CheckReport) or not report.breakdowns or report.breakdowns[0].series is None:
        return False
    b = report.breakdowns[0]
    names = list(b.series)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time"] + names)
        for k, t in enumerate(b.times):
            w.writerow([repr(float(t))] + [repr(float(b.series[n][k])) for n in names])
    return True


def versions():
    return {"measureflow": __version__, "numpy": np.__version__, "python": platform.python_version(),
            "pyyaml": yaml.__version__, "scipy": scipy.__version__}


def write_outputs(cfg, out_dir, report=None, study=None, checks=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    body = {"passed": all(c["passed"] for c in (checks or {}).values()), "checks": checks or {}}
    files = ["report.json", "terms.csv", "manifest.json"]
    if report is not None:
        body["report"] = report.to_dict()
        _write_terms(out / "terms.csv", report)
        if _write_series(out / "series.csv", report):
            files.append("series.csv")
    if study is not None:
        body["convergence"] = study.to_dict()
        levels = [{"level": lv, "aggregate": r.to_dict(samples=False)["aggregate"]}
                  for lv, r in zip(study.levels, study.reports)]
        body["convergence"]["per_level"] = levels
        if report is None:
            with open(out / "terms.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["level", "name", "mean", "standard_error"])
                for lv, r in zip(study.levels, study.reports):
                    for k, (m, se) in r.term_stats().items():
                        w.writerow([repr(lv), k, repr(m), repr(se)])
    _dump(out / "report.json", body)
    _dump(out / "manifest.json", {"config": cfg.raw, "seed": cfg.seed, "versions": versions(),
                                  "outputs": sorted(files)})
    return body


def _slope_check(cfg, study):
    bounds = cfg.raw["sweep"].get("slope")
    if bounds is None:
        return {}
    lo, hi = bounds
    return {"slope": {"value": study.slope, "limit": [lo, hi], "passed": bool(lo <= study.slope <= hi)}}


def run(config, out_dir=None, workers=None, stream=None):
    """Run a config; returns the exit status."""
    stream = stream or sys.stdout
    try:
        cfg = parse_config(config)
        report = execute(cfg, workers=workers)
        checks = evaluate_thresholds(cfg, report)
        study = None
        if "sweep" in cfg.raw:
            study = run_sweep(cfg, workers)
            checks.update(_slope_check(cfg, study))
    except (ConfigError, ScenarioError, VerificationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    body = write_outputs(cfg, out_dir or cfg.raw["output"], report, study, checks)
    _summarize(cfg, checks, stream)
    return 0 if body["passed"] else 1


def sweep(config, out_dir=None, workers=None, stream=None):
    stream = stream or sys.stdout
    try:
        cfg = parse_config(config)
        study = run_sweep(cfg, workers)
    except (ConfigError, ScenarioError, VerificationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    checks = _slope_check(cfg, study)
    body = write_outputs(cfg, out_dir or cfg.raw["output"], None, study, checks)
    print(f"{cfg.name}: slope {study.slope:.4f} CI [{study.ci[0]:.4f}, {study.ci[1]:.4f}]", file=stream)
    _summarize(cfg, checks, stream)
    return 0 if body["passed"] else 1


def _summarize(cfg, checks, stream):
    for name, c in checks.items():
        status = "PASS" if c["passed"] else "FAIL"
        print(f"{status} {cfg.name} [{cfg.formula}] {name}: {c['value']!r} (limit {c['limit']!r})", file=stream)


def load_registry(path):
    """Custom field templates from a YAML mapping ``name -> field spec``."""
    if path is None:
        return {}
    data = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(data, dict):
        raise ConfigError("registry: expected a mapping of template names to field specs")
    for name, spec in data.items():
        field_from_spec(_numbers(spec), f"registry.{name}")
    return {k: _numbers(v) for k, v in sorted(data.items())}


def list_catalog(registry=None, stream=None):
    """Print built-in (and custom) catalog entries, sorted by name."""
    stream = stream or sys.stdout
    cat = catalog()
    custom = load_registry(registry)
    if custom:
        cat["custom field templates"] = custom
    for section in sorted(cat):
        print(f"[{section}]", file=stream)
        for name, params in sorted(cat[section].items()):
            print(f"  {name}: {json.dumps(_clean(params), sort_keys=True)}", file=stream)
    return 0


def main(argv=None):
    parser = argparse.ArgumentParser(prog="measureflow", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("run", "sweep"):
        p = sub.add_parser(name, help=f"{name} a scenario config")
        p.add_argument("config")
        p.add_argument("--out", help="output directory (default: config 'output')")
        p.add_argument("--workers", type=int, help="worker threads (default: MEASUREFLOW_WORKERS or 1)")
    p = sub.add_parser("catalog", help="list registered templates")
    p.add_argument("--registry", help="YAML file of custom field templates")
    args = parser.parse_args(argv)
    if args.command == "catalog":
        try:
            return list_catalog(args.registry)
        except (ConfigError, ScenarioError, OSError) as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return 2
    if not os.path.exists(args.config):
        print(f"config error: no such file {args.config!r}", file=sys.stderr)
        return 2
    fn = run if args.command == "run" else sweep
    try:
        return fn(args.config, args.out, args.workers)
    except VerificationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
