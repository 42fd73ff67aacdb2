import csv
import gzip
import json

import numpy as np
import pytest

from metapi.cli import EXIT_BAD_INPUT, EXIT_OK, fit_report, main, simulate
from metapi.core import MetaDataset
from metapi.errors import ConfigError, InputError
from metapi.io import config_digest, fit_report_csv, parse_config, parse_studies, write_studies
from metapi.simulation import GridConfig


def _csv(tmp_path, text, name="studies.csv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return str(p)


TOY = "study_id,effect,var\nA,0,1\nB,2,1\nC,4,1\n"


def test_se_and_var_columns_agree(tmp_path):
    a = parse_studies(_csv(tmp_path, "study_id,effect,se\nA,0.1,0.5\nB,0.3,0.25\n", "a.csv"))
    b = parse_studies(_csv(tmp_path, "study_id,effect,var\nA,0.1,0.25\nB,0.3,0.0625\n", "b.csv"))
    np.testing.assert_array_equal(a.variances, b.variances)
    assert a.ids == ("A", "B")


def test_byte_order_mark_is_ignored(tmp_path):
    d = parse_studies(_csv(tmp_path, "﻿" + TOY))
    assert d.K == 3


@pytest.mark.parametrize(
    "text,row,fragment",
    [
        ("study_id,effect,se\nA,0.1,0.5\nB,0.2,0\n", 3, "se must be positive"),
        ("study_id,effect\nA,0.1\nB,0.2\n", 1, "se or var"),
        ("study_id,effect,var\nA,abc,1\nB,0.2,1\n", 2, "not a number"),
        ("study_id,effect,var\nA,0.1,1\n", None, "at least 2"),
        ("study_id,effect,var\nA,0.1,1\nA,0.2,1\n", 3, "duplicate"),
        ("study_id,effect,var\nA,0.1,1\nB,nan,1\n", 3, "finite"),
        ("study_id,effect,var\nA,0.1,1,9\nB,0.2,1\n", 2, "fields"),
        ("study_id,effect,se,var\nA,0.1,1,1\n", 1, "not both"),
    ],
)
def test_study_file_errors(tmp_path, text, row, fragment):
    with pytest.raises(InputError) as info:
        parse_studies(_csv(tmp_path, text))
    assert fragment in str(info.value)
    if row is not None:
        assert info.value.row == row and f"row {row}" in str(info.value)


def test_study_file_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    d = MetaDataset(rng.normal(size=6), rng.uniform(0.01, 2, 6), tuple(f"s{i}" for i in range(6)))
    path = str(tmp_path / "out.csv")
    write_studies(d, path)
    back = parse_studies(path)
    np.testing.assert_array_equal(back.effects, d.effects)
    np.testing.assert_array_equal(back.variances, d.variances)
    assert back.ids == d.ids


def test_config_defaults_and_single_scenario():
    assert parse_config({}) == GridConfig()
    one = parse_config({"K": [7], "N": [100], "tau2": [1.0], "dist": ["normal"], "reps": 10})
    assert (one.K, one.reps) == ((7,), 10)


def test_config_errors_are_collected():
    with pytest.raises(ConfigError) as info:
        parse_config({"K": [2]})
    assert "K >= 3" in str(info.value)
    with pytest.raises(ConfigError) as info:
        parse_config({"bogus": 1, "other": 2, "N": [101], "dist": ["cauchy"]})
    text = str(info.value)
    for fragment in ("'bogus'", "'other'", "'N'", "'dist'"):
        assert fragment in text
    assert len(info.value.problems) == 4


def test_config_digest_is_order_independent():
    a = parse_config({"K": [3, 7], "reps": 5})
    b = parse_config({"reps": 5, "K": [3, 7]})
    assert config_digest(a) == config_digest(b)
    assert config_digest(a) != config_digest(parse_config({"K": [3, 7], "reps": 6}))


def test_fit_report_toy(tmp_path):
    d = parse_studies(_csv(tmp_path, TOY))
    rep = fit_report(d, seed=11, B=1000)
    rows = {r["method"]: r for r in rep["prediction_intervals"]}
    assert (rows["hts_dl_z"]["lower"], rows["hts_dl_z"]["upper"]) == pytest.approx((-2.08, 6.08), abs=1e-3)
    assert rep["heterogeneity"]["Q"] == pytest.approx(8.0)
    assert rep["heterogeneity"]["tau2_REML"] == pytest.approx(3.0, abs=1e-6)
    assert rep["meta"]["seed"] == "11" and rep["meta"]["seed_source"] == "user"
    assert all(r["error"] is None for r in rows.values())


def test_fit_report_records_entropy_seed():
    d = MetaDataset([0.0, 2.0, 4.0], [1.0, 1.0, 1.0])
    rep = fit_report(d, methods=["bootstrap"], B=500)
    assert rep["meta"]["seed_source"] == "entropy"
    again = fit_report(d, methods=["bootstrap"], seed=int(rep["meta"]["seed"]), B=500)
    assert again["prediction_intervals"] == rep["prediction_intervals"]


def test_homogeneous_ensemble_is_degenerate():
    rep = fit_report(MetaDataset([1.0, 1.0, 1.0], [1.0, 1.0, 1.0]), methods=["ensemble"], seed=1)
    row = rep["prediction_intervals"][0]
    assert (row["lower"], row["upper"], row["degenerate"]) == (1.0, 1.0, True)
    assert any("degenerate" in w for w in rep["warnings"])


def test_method_error_is_reported_not_raised():
    rep = fit_report(MetaDataset([0.0, 1.0], [1.0, 1.0]), methods=["hts_dl_tk2", "hts_dl_tk1"], seed=1)
    tk2, tk1 = rep["prediction_intervals"]
    assert tk2["error"] and tk2["lower"] is None
    assert tk1["error"] is None


@pytest.mark.parametrize("fmt", ["json", "csv"])
def test_fit_cli_is_byte_reproducible(tmp_path, fmt):
    src = _csv(tmp_path, TOY)
    outs = [tmp_path / f"r{i}.{fmt}" for i in range(2)]
    for out in outs:
        assert main(["fit", "--input", src, "--seed", "5", "--bootstrap-b", "500",
                     "--format", fmt, "--out", str(out)]) == EXIT_OK
    assert outs[0].read_bytes() == outs[1].read_bytes()
    if fmt == "json":
        json.loads(outs[0].read_text())
    else:
        rows = list(csv.DictReader(outs[0].open()))
        assert {r["section"] for r in rows} >= {"meta", "study", "pooled", "heterogeneity", "pi"}


def test_fit_csv_matches_json(tmp_path):
    d = parse_studies(_csv(tmp_path, TOY))
    rep = fit_report(d, methods=["hts_dl_z"], seed=3)
    rows = [r for r in csv.DictReader(fit_report_csv(rep).splitlines()) if r["section"] == "pi"]
    assert float(rows[0]["lower"]) == rep["prediction_intervals"][0]["lower"]


def test_simulate_single_scenario(tmp_path):
    config = parse_config({"K": [5], "N": [100], "tau2": [1.0], "dist": ["normal"], "reps": 10,
                           "reps_bootstrap": 4, "B": 300, "records": True})
    manifest, code = simulate(config, str(tmp_path), jobs=1)
    assert code == EXIT_OK
    assert not (tmp_path / "INCOMPLETE").exists()
    on_disk = json.loads((tmp_path / "manifest.json").read_text())
    for key in ("master_seed", "generator", "config_digest", "kernel_backend", "wchisq_evaluator", "version"):
        assert key in on_disk
    assert on_disk["config_digest"] == config_digest(config)
    (entry,) = on_disk["scenarios"]
    d = tmp_path / entry["dir"]
    rows = list(csv.DictReader((d / "summary.csv").open()))
    assert len(rows) == len(config.methods)
    for r in rows:
        assert int(r["n"]) == (4 if r["method"] == "bootstrap" else 10)
        hist = list(csv.DictReader((d / f"hist_{r['method']}.csv").open()))
        assert len(hist) == 100 and sum(int(h["count"]) for h in hist) == int(r["n"])
    with gzip.open(d / "records.csv.gz", "rt") as fh:
        assert len(list(csv.DictReader(fh))) == 10 * len(config.methods)


def test_simulate_cli_overrides(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"K": [3], "N": [50], "tau2": [0.2], "dist": ["uniform"],
                               "methods": ["hts_dl_z", "ensemble"]}))
    out = tmp_path / "out"
    assert main(["simulate", "--config", str(cfg), "--out-dir", str(out), "--reps", "7", "--seed", "4"]) == EXIT_OK
    m = json.loads((out / "manifest.json").read_text())
    assert m["master_seed"] == "4" and m["config"]["reps"] == 7


def test_grid_print(capsys):
    assert main(["grid", "--print"]) == EXIT_OK
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].startswith("index,dir,")
    assert len(lines) == 3024 + 1


def test_bad_input_exit_codes(tmp_path, capsys):
    assert main(["fit", "--input", str(tmp_path / "missing.csv")]) == EXIT_BAD_INPUT
    cfg = tmp_path / "bad.json"
    cfg.write_text('{"K": [2]}')
    assert main(["simulate", "--config", str(cfg), "--out-dir", str(tmp_path / "o")]) == EXIT_BAD_INPUT
    assert "error" in capsys.readouterr().err
