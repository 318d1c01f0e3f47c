import io
import json
from pathlib import Path

import pytest

from measureflow.cli import ConfigError, ScenarioConfig, list_catalog, main, parse_config, run

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

SMALL_THM3 = """\
name: small
formula: thm3
mode: mc-law
seed: 3
coefficients: {template: jump-diffusion, rate: 2.0}
field: {template: mean-squared}
sizes: {n_steps: 20, N: 30, M: 20}
"""


def run_quiet(config, out, workers=None):
    return run(config, out, workers, stream=io.StringIO())


def outputs(out):
    return {p.name: p.read_bytes() for p in sorted(Path(out).iterdir())}


# --- parsing ------------------------------------------------------------------

def test_parse_defaults():
    cfg = parse_config(SMALL_THM3)
    assert isinstance(cfg, ScenarioConfig)
    assert cfg.raw["interval"] == [0.0, 1.0] and cfg.raw["output"] == "runs/small"
    assert cfg.thresholds["se_multiplier"] == 3.0 and cfg.options["covariation"] == "generator-exact"
    assert cfg.sizes.N == 30 and cfg.sizes.M == 20


def test_scientific_notation_and_dt():
    cfg = parse_config(SMALL_THM3.replace("n_steps: 20", "dt: 5e-2"))
    assert cfg.sizes.n_steps == 20
    cfg = parse_config(SMALL_THM3.replace("rate: 2.0", "rate: '2e0'"))
    assert cfg.raw["coefficients"]["rate"] == 2.0


@pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.yaml")), ids=lambda p: p.stem)
def test_shipped_configs_parse(path):
    parse_config(path)


@pytest.mark.parametrize("edit, match", [
    (("formula: thm3", "formula: thm9"), "formula"),
    (("mode: mc-law", "mode: pathwise"), "mode"),
    (("N: 30", "N: 0"), "N"),
    (("seed: 3", "seed: abc"), "seed"),
    (("field: {template: mean-squared}", "field: {template: nope}"), "nope"),
    (("formula: thm3", "formula: thm3\ncolour: red"), "colour"),
])
def test_config_errors_name_the_field(edit, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(SMALL_THM3.replace(*edit))


def test_missing_common_split_is_named():
    text = SMALL_THM3.replace("formula: thm3", "formula: thm4").replace("mode: mc-law", "mode: mc-conditional")
    with pytest.raises(ConfigError) as exc:
        parse_config(text)
    msg = str(exc.value)
    assert "sigma_common" in msg and "thm4" in msg and "(line 5)" in msg


def test_yaml_errors_report_position():
    with pytest.raises(ConfigError, match="line 2"):
        parse_config("name: x\n\tformula: thm3\nseed: 1\n")


# --- running --------------------------------------------------------------------

def test_run_writes_outputs_and_manifest_round_trips(tmp_path):
    assert run_quiet(SMALL_THM3, tmp_path) == 0
    assert {"report.json", "terms.csv", "manifest.json", "series.csv"} <= set(outputs(tmp_path))
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["passed"] is True and report["report"]["n_samples"] == 20
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["seed"] == 3 and "numpy" in manifest["versions"]
    assert parse_config(manifest["config"]) == parse_config(SMALL_THM3)
    header = (tmp_path / "terms.csv").read_text().splitlines()[0]
    assert header == "sample,kind,name,value"


def test_run_is_deterministic_across_workers(tmp_path):
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    run_quiet(SMALL_THM3, a, workers=1)
    run_quiet(SMALL_THM3, b, workers=1)
    run_quiet(SMALL_THM3, c, workers=3)
    assert outputs(a) == outputs(b) == outputs(c)


def test_worker_env_override(tmp_path, monkeypatch):
    run_quiet(SMALL_THM3, tmp_path / "a")
    monkeypatch.setenv("MEASUREFLOW_WORKERS", "2")
    run_quiet(SMALL_THM3, tmp_path / "b")
    assert outputs(tmp_path / "a") == outputs(tmp_path / "b")


def test_threshold_violation_exits_one(tmp_path):
    text = SMALL_THM3.replace("mode: mc-law", "mode: pathwise-empirical") + "thresholds: {c: 1.0e-9}\n"
    assert run_quiet(text, tmp_path) == 1
    assert json.loads((tmp_path / "report.json").read_text())["passed"] is False


def test_main_exit_codes(tmp_path, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text(SMALL_THM3.replace("formula: thm3", "formula: thm4").replace("mode: mc-law", "mode: mc-conditional"))
    assert main(["run", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "sigma_common" in capsys.readouterr().err
    assert main(["run", str(tmp_path / "missing.yaml")]) == 2
    good = tmp_path / "good.yaml"
    good.write_text(SMALL_THM3)
    assert main(["run", str(good), "--out", str(tmp_path / "g")]) == 0
    assert "PASS small [thm3]" in capsys.readouterr().out


def test_check_formulas_run(tmp_path):
    for name in ("leibniz.yaml", "lift_check.yaml"):
        assert run_quiet(CONFIGS / name, tmp_path / name) == 0


def test_sweep_records_slope(tmp_path):
    text = SMALL_THM3.replace("M: 20", "M: 10") + "sweep: {parameter: M, levels: [20, 80, 320], slope: [-0.8, -0.2]}\n"
    assert run_quiet(text, tmp_path) == 0
    conv = json.loads((tmp_path / "report.json").read_text())["convergence"]
    assert conv["parameter"] == "M" and len(conv["values"]) == 3


# --- catalog ----------------------------------------------------------------------

def catalog_text(registry=None):
    buf = io.StringIO()
    list_catalog(registry, stream=buf)
    return buf.getvalue()


def test_catalog_contents_and_stability():
    text = catalog_text()
    for name in ("polynomial", "sin", "bump", "mean", "second-moment", "mean-squared", "BM", "drifted-BM",
                 "compound-Poisson", "jump-diffusion"):
        assert f"  {name}: " in text
    assert catalog_text() == text
    sections = [ln for ln in text.splitlines() if ln.startswith("[")]
    assert sections == sorted(sections)


def test_catalog_registry(tmp_path):
    empty = tmp_path / "empty.yaml"
    empty.write_text("")
    assert catalog_text(str(empty)) == catalog_text()
    reg = tmp_path / "reg.yaml"
    reg.write_text("zeta: {F0: [{measure: {inner: sin}}]}\nalpha: {template: mean}\n")
    text = catalog_text(str(reg))
    assert "[custom field templates]" in text and text.index("alpha") < text.index("zeta")
    bad = tmp_path / "bad.yaml"
    bad.write_text("broken: {kind: nope}\n")
    assert main(["catalog", "--registry", str(bad)]) == 2
