import csv
import json
import shutil
from pathlib import Path

import pytest

from conftest import SMALL_CITY
from spatial_exceedance.cli import main
from spatial_exceedance.pipeline import sha256_file

GOLDEN = Path(__file__).parent / "golden" / "simulate_default.json"
SHORT = ["--iterations", "1200", "--burn-in", "400"]


def _absolute(line, base):
    """Rewrite a relative file path value in a config line against `base`."""
    key, sep, value = line.partition(" = ")
    if sep and (key in ("sites", "wards", "boroughs", "grid") or key.startswith("layer.")):
        return f"{key} = {base / value}"
    return line


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def city(tmp_path_factory):
    root = tmp_path_factory.mktemp("city")
    settings = root / "synth.cfg"
    settings.write_text("".join(f"{k} = {v}\n" for k, v in SMALL_CITY.items()))
    assert main(["simulate", str(settings), "--out", str(root / "data")]) == 0
    cfg = root / "data" / "run.cfg"
    assert main(["features", str(cfg), "--out", str(root / "run")]) == 0
    return root, cfg


def test_features_writes_one_row_per_site(city):
    root, _ = city
    table = rows(root / "run" / "covariates.csv")
    assert len(table) == SMALL_CITY["n_sites"]
    assert {"site_id", "ward_id", "borough_id", "concentration", "exceeds", "bus_stops_100m"} <= set(table[0])
    assert (root / "run" / "adjacency.csv").is_file()
    assert (root / "run" / "manifest-features.json").is_file()


def test_features_rerun_is_byte_identical(city, tmp_path):
    root, cfg = city
    assert main(["features", str(cfg), "--out", str(tmp_path)]) == 0
    for name in ("covariates.csv", "adjacency.csv"):
        assert sha256_file(tmp_path / name) == sha256_file(root / "run" / name)


def test_missing_input_exits_with_input_error(city, tmp_path, capsys):
    root, _ = city
    assert main(["features", str(tmp_path / "nope.cfg")]) == 2
    text = (root / "data" / "run.cfg").read_text().replace("sites.geojson", "missing.geojson")
    shutil.copytree(root / "data", tmp_path / "data")
    (tmp_path / "data" / "broken.cfg").write_text(text)
    assert main(["features", str(tmp_path / "data" / "broken.cfg"), "--out", str(tmp_path / "o")]) == 2
    assert "missing.geojson" in capsys.readouterr().err


def test_unknown_config_key_is_input_error(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("colour = blue\n")
    assert main(["fit", str(cfg)]) == 2


@pytest.fixture(scope="module")
def fitted(city):
    root, cfg = city
    out = root / "run"
    assert main(["fit", str(cfg), "--out", str(out), *SHORT, "--force"]) == 0
    return out


def test_fit_refusal_exit_code(city, fitted, capsys):
    root, cfg = city
    code = main(["fit", str(cfg), "--out", str(fitted), "--iterations", "40", "--burn-in", "20"])
    assert code == 3
    assert "--force" in capsys.readouterr().err
    status = json.loads((fitted / "fit" / "status.json").read_text())
    assert status["converged"] is False
    # restore the forced fit used by later tests
    assert main(["fit", str(cfg), "--out", str(fitted), *SHORT, "--force"]) == 0


def test_fit_outputs(fitted):
    fit = fitted / "fit"
    for name in ("trace_chain0.csv", "trace_chain1.csv", "diagnostics.csv", "selection.csv", "status.json"):
        assert (fit / name).is_file(), name
    trace = rows(fit / "trace_chain0.csv")
    assert len(trace) == 800
    assert trace[0]["iteration"] == "401"
    for name in ("parameters.csv", "odds_ratios.csv", "ward_probabilities.csv", "ward_probabilities.geojson",
                 "site_probabilities.csv", "borough_ranking.csv"):
        assert (fitted / "report" / name).is_file(), name
    probs = [float(r["mean_probability"]) for r in rows(fitted / "report" / "site_probabilities.csv")]
    assert len(probs) == SMALL_CITY["n_sites"]
    assert all(0 <= p <= 1 for p in probs)


def test_report_rebuilds_identical_tables(city, fitted):
    _, cfg = city
    before = {p.name: sha256_file(p) for p in (fitted / "report").iterdir()}
    assert main(["report", str(cfg), "--out", str(fitted), "--force"]) == 0
    after = {p.name: sha256_file(p) for p in (fitted / "report").iterdir()}
    assert before == after


def test_report_without_fit_is_input_error(city, tmp_path):
    _, cfg = city
    assert main(["report", str(cfg), "--out", str(tmp_path)]) == 2


def test_sensitivity_orders_thresholds(city, fitted, capsys):
    _, cfg = city
    assert main(["sensitivity", str(cfg), "--out", str(fitted), *SHORT, "--force"]) == 0
    table = {r["threshold"]: r for r in rows(fitted / "sensitivity.csv")}
    assert int(table["35"]["exceeding_sites"]) > int(table["40"]["exceeding_sites"])
    assert "threshold 35" in capsys.readouterr().out


def test_sensitivity_degenerate_threshold(city, tmp_path, capsys):
    root, cfg = city
    high = tmp_path / "high.cfg"
    text = Path(cfg).read_text().replace("thresholds = 40, 35", "thresholds = 40, 90")
    high.write_text(
        "\n".join(_absolute(line, Path(cfg).parent) for line in text.splitlines())
        + f"\ncovariate_table = {root / 'run' / 'covariates.csv'}\nadjacency = {root / 'run' / 'adjacency.csv'}\n"
    )
    code = main(["sensitivity", str(high), "--out", str(tmp_path / "o"), *SHORT])
    assert code == 2
    assert "no site exceeds" in capsys.readouterr().err


def test_adjacency_command_prints_summary(city, tmp_path, capsys):
    _, cfg = city
    assert main(["adjacency", str(cfg), "--out", str(tmp_path)]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["regions"] == SMALL_CITY["n_wards"]
    assert info["components"] == 1


def test_replay_is_identical_with_two_workers(fitted, tmp_path, capsys):
    assert main(["replay", str(fitted / "manifest-fit.json"), "--out", str(tmp_path), "--workers", "2"]) == 0
    assert "identical" in capsys.readouterr().out
    for name in ("trace_chain0.csv", "trace_chain1.csv"):
        assert sha256_file(tmp_path / "fit" / name) == sha256_file(fitted / "fit" / name)


def test_features_replay_keeps_column_order(city, tmp_path):
    root, _ = city
    assert main(["replay", str(root / "run" / "manifest-features.json"), "--out", str(tmp_path)]) == 0
    with open(tmp_path / "covariates.csv") as fh:
        header = fh.readline()
    assert header.startswith("site_id,ward_id,borough_id,concentration,exceeds,bus_stops_100m,bus_stops_400m,traffic")


def test_replay_detects_mismatch(fitted, tmp_path):
    doc = json.loads((fitted / "manifest-fit.json").read_text())
    key = sorted(doc["outputs"])[0]
    doc["outputs"][key] = "0" * 64
    tampered = tmp_path / "manifest-fit.json"
    tampered.write_text(json.dumps(doc))
    assert main(["replay", str(tampered), "--out", str(tmp_path / "o")]) == 5


def test_replay_rejects_changed_input(fitted, tmp_path):
    doc = json.loads((fitted / "manifest-fit.json").read_text())
    path = sorted(doc["inputs"])[0]
    doc["inputs"][path] = "f" * 64
    tampered = tmp_path / "manifest-fit.json"
    tampered.write_text(json.dumps(doc))
    assert main(["replay", str(tampered), "--out", str(tmp_path / "o")]) == 2


@pytest.mark.slow
def test_default_simulate_matches_golden_digest(tmp_path):
    assert main(["simulate", "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "manifest-simulate.json").read_text())
    golden = json.loads(GOLDEN.read_text())
    assert doc["seeds"] == golden["seeds"]
    assert doc["outputs"] == golden["outputs"]


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert capsys.readouterr().out.strip() == "0.1.0"
