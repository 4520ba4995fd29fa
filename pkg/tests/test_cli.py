import json
import subprocess
import sys

import numpy as np
import pytest

from pupilfield import cli, lightfield, spc
from pupilfield.tables import read_csv

SUBCOMMANDS = [
    ("lens", "summarize"), ("lens", "db-stats"), ("spc", "design"), ("spc", "tables"),
    ("sweep", "shift"), ("sweep", "errors"), ("fit", "pertuz"), ("mic", "verify"),
    ("lf", "decode"), ("lf", "refocus"), ("lf", "best-shift"),
    ("synth", "lightfield"), ("synth", "raw"),
]


def run(*argv):
    return cli.main([str(a) for a in argv])


def _files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


@pytest.fixture
def aligned_config(tmp_path, aligned_a):
    path = tmp_path / "aligned.json"
    spc.save_config(aligned_a, path)
    return path


@pytest.mark.parametrize("group,action", SUBCOMMANDS)
def test_help(group, action, capsys):
    assert run(group, action, "--help") == 0
    assert "--out" in capsys.readouterr().out


def test_top_level_help_and_version(capsys):
    assert run("--help") == 0
    assert run("--version") == 0
    assert "pupilfield" in capsys.readouterr().out


def test_usage_errors(tmp_path):
    assert run() == 2
    assert run("spc", "bogus") == 2
    assert run("spc", "tables", "presetA", "--set", "nope=1") == 2
    assert run("spc", "design", "x.json", "--focus", "500") == 2


def test_input_errors(tmp_path):
    assert run("spc", "tables", tmp_path / "missing.json", "--out", tmp_path / "o") == 3
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    assert run("lens", "summarize", bad, "--out", tmp_path / "o") == 3
    assert run("lens", "db-stats", tmp_path / "empty", "--out", tmp_path / "o") == 3


def test_domain_errors(tmp_path):
    assert run("spc", "tables", "presetA", "--set", "o_f=50", "--out", tmp_path / "o") == 4
    # decode needs a pixel-aligned configuration
    raw = tmp_path / "raw.pgm"
    raw.write_bytes(lightfield.dumps_pgm(np.zeros((650, 650))))
    assert run("lf", "decode", raw, "presetA", "--out", tmp_path / "o") == 4


def test_spc_tables(tmp_path, capsys):
    out = tmp_path / "t"
    assert run("spc", "tables", "presetA", "--out", out) == 0
    text = capsys.readouterr().out
    assert "Delta=8.5 px" in text and "Delta_naive=12.5 px" in text
    _, header, rows = read_csv(out / "spc_geometry.csv")
    geo = dict(zip(header, rows[0]))
    assert float(geo["delta"]) == pytest.approx(8.5)
    assert float(geo["d_mli"]) == pytest.approx(0.1011765, abs=1e-7)
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["subcommand"] == "spc tables"
    assert manifest["version"] == cli.__version__
    assert set(_files(out)) == {"manifest.json", "spc_geometry.csv", "spc_pertuz.csv"}


def test_reruns_are_byte_identical(tmp_path):
    out = tmp_path / "r"
    assert run("sweep", "errors", "presetA", "--out", out) == 0
    first = _files(out)
    assert run("sweep", "errors", "presetA", "--out", out) == 0
    assert _files(out) == first


def test_zero_x_override(tmp_path):
    out = tmp_path / "z"
    assert run("sweep", "errors", "presetA", "--set", "X=0", "--out", out) == 0
    _, header, rows = read_csv(out / "sweep_errors.csv")
    for row in rows:
        vals = dict(zip(header, row))
        for k in ("e_shift", "e_dist_naive_model", "e_dist_naive_shift"):
            assert abs(float(vals[k])) <= 1e-12
    assert json.loads((out / "manifest.json").read_text())["overrides"] == {"X": 0.0}


def test_lens_summarize_and_design(tmp_path):
    presc = spc.bundled_prescription_dir() / "displaced_stop.json"
    out = tmp_path / "d"
    assert run("lens", "summarize", presc, "--out", out) == 0
    summary_csv = out / "lens_summary.csv"
    assert run("spc", "design", summary_csv, "--focus", "1000", "--pixel", "0.01",
               "--sensor", "650x650", "--micro", "65x65", "--out", tmp_path / "d1") == 0
    assert run("spc", "design", presc, "--focus", "inf", "--pixel", "0.01",
               "--sensor", "650x650", "--micro", "65x65", "--out", tmp_path / "d2") == 0
    c = spc.load_config(tmp_path / "d2" / "spc_config.json")
    assert c.infinite_focus and spc.microimage_pixels(c) == 10
    assert c.prescription is not None


def test_db_stats_on_bundled(tmp_path, capsys):
    out = tmp_path / "db"
    assert run("lens", "db-stats", spc.bundled_prescription_dir(), "--out", out) == 0
    assert "X(f_M) =" in capsys.readouterr().out
    _, header, rows = read_csv(out / "lens_records.csv")
    assert len(rows) == 3


def test_mic_verify_preset(tmp_path, capsys):
    out = tmp_path / "m"
    assert run("mic", "verify", "displaced_stop", "--out", out) == 0
    assert "exit pupil" in capsys.readouterr().out
    assert (out / "mic_ground_truth.csv").exists()
    assert run("mic", "verify", "presetA", "--out", out) == 4


def test_synth_decode_refocus_pipeline(tmp_path, aligned_config, aligned_a):
    s_model = spc.shift_from_distance(aligned_a, 1000.0)
    assert run("synth", "raw", aligned_config, "--views", 10, "--distance", 1000,
               "--vignette", "--out", tmp_path / "s") == 0
    assert run("lf", "decode", tmp_path / "s" / "raw.pgm", aligned_config,
               "--white", tmp_path / "s" / "white.pgm", "--out", tmp_path / "l") == 0
    lf_path = tmp_path / "l" / "lightfield.lf4d"
    lf = lightfield.load_lf4d(lf_path)
    assert lf.samples.shape == (10, 10, 65, 65)
    assert run("lf", "refocus", lf_path, "--shift", s_model, "--out", tmp_path / "r") == 0
    assert run("lf", "best-shift", lf_path, f"--range={s_model - 0.5}:{s_model + 0.5}",
               "--out", tmp_path / "b") == 0
    comment = (tmp_path / "b" / "best_shift.csv").read_text().splitlines()[0]
    best = float(comment.split("best_shift=")[1].split()[0])
    assert best == pytest.approx(s_model, abs=0.05)
    assert run("synth", "lightfield", aligned_config, "--distance", 700, "--out", tmp_path / "sl") == 0


def test_sweep_shift_and_fit(tmp_path, aligned_config):
    out = tmp_path / "sw"
    assert run("sweep", "shift", aligned_config, "--distances", 300, 400, 500, 750, 1000,
               "--no-inverse", "--out", out) == 0
    assert run("fit", "pertuz", aligned_config, out / "sweep_shift.csv", "--out", tmp_path / "f") == 0
    _, header, rows = read_csv(tmp_path / "f" / "fit_pertuz.csv")
    fit = dict(zip(header, rows[0]))
    assert float(fit["rmse_corrected"]) - float(fit["rmse_fit"]) <= 2.0
    assert run("fit", "pertuz", aligned_config, tmp_path / "nope.csv", "--out", tmp_path / "f") == 3


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "pupilfield.cli", "lens", "--help"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and "summarize" in res.stdout
