import csv
import json
import re
import subprocess
import sys

import pytest

from dissipa import cli

CONIC = """
[model]
name = "conic1d"
n = 1
m = 1
p = 1
f = ["x1^3 - 3*x1"]
h = ["x1"]
B = [[1.0]]
D = [[0.0]]

[region]
box = [[-1.0, 1.0]]
divisions = 20
sweep = [20, 40]

[analysis]
mode = "conic"
variant = "with_affine"

[verify]
samples_per_simplex = 50
trials = 10
horizon = 2.0
"""


def _write(tmp_path, text, name="cfg.toml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def _run(argv, capsys):
    code = cli.run(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_analyze_verify_round_trip(tmp_path, capsys):
    cfg = _write(tmp_path, CONIC)
    out = tmp_path / "out"
    code, text, _ = _run(["analyze", "--config", cfg, "--out", str(out)], capsys)
    assert code == 0
    assert re.search(r"cone\(a=-?\d\.\d{3}, b=0\.5\d\d\), \d+ simplices, verified", text)
    assert (out / "result.json").exists() and (out / "storage.csv").exists()
    with open(out / "storage.csv") as fh:
        assert next(csv.reader(fh)) == ["x1", "V"]
    code, text, _ = _run(["verify", "--config", cfg, "--out", str(out)], capsys)
    assert code == 0 and "verification passed" in text and "differs" not in text
    assert json.loads((out / "verification.json").read_text())["passed"]


def test_result_json_is_deterministic(tmp_path, capsys):
    cfg = _write(tmp_path, CONIC)
    a, b = tmp_path / "a", tmp_path / "b"
    assert _run(["analyze", "--config", cfg, "--out", str(a), "--seed", "7"], capsys)[0] == 0
    assert _run(["analyze", "--config", cfg, "--out", str(b), "--seed", "7"], capsys)[0] == 0
    assert (a / "result.json").read_bytes() == (b / "result.json").read_bytes()


def test_mesh_command(tmp_path, capsys):
    cfg = _write(tmp_path, CONIC)
    code, text, _ = _run(["mesh", "--config", cfg, "--out", str(tmp_path / "m")], capsys)
    assert code == 0
    files = sorted(p.name for p in (tmp_path / "m").iterdir())
    assert len(files) == 2 and all(f.endswith(".csv") for f in files)
    assert text.startswith("18 simplices")


def test_sweep_table(tmp_path, capsys):
    cfg = _write(tmp_path, CONIC.replace("trials = 10", "trials = 5"))
    code, _, _ = _run(["sweep", "--config", cfg, "--out", str(tmp_path / "s")], capsys)
    assert code == 0
    with open(tmp_path / "s" / "sweep.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["divisions"] for r in rows] == ["20", "40"]
    bs = [float(r["b"]) for r in rows]
    assert bs[1] <= bs[0] + 1e-7 and min(bs) >= 0.5 - 1e-6


def test_report(tmp_path, capsys):
    cfg = _write(tmp_path, CONIC)
    out = tmp_path / "out"
    _run(["analyze", "--config", cfg, "--out", str(out)], capsys)
    code, text, _ = _run(["report", str(out / "result.json")], capsys)
    assert code == 0
    assert "verified" in text and "residuals" in text and "status: optimal" in text


def test_report_l2_line():
    d = {"status": "optimal", "mode": "l2_gain", "headline": {"gamma": 1.43}, "diagnostics": {"n_simplices": 9}}
    assert cli.report_text(d).startswith("L2 gain γ = 1.43, 9 simplices, not verified")


def test_report_missing_file(tmp_path, capsys):
    code, text, err = _run(["report", str(tmp_path / "nope.json")], capsys)
    assert code == 1 and text == "" and "cannot read" in err


def test_missing_field_path(tmp_path, capsys):
    cfg = _write(tmp_path, CONIC.replace("n = 1\n", "", 1))
    code, _, err = _run(["analyze", "--config", cfg, "--out", str(tmp_path / "o")], capsys)
    assert code == 1 and "model.n" in err
    assert not (tmp_path / "o").exists()


def test_unknown_key_rejected(tmp_path, capsys):
    cfg = _write(tmp_path, CONIC.replace("[verify]", "[verify]\nbogus = 1"))
    code, _, err = _run(["analyze", "--config", cfg], capsys)
    assert code == 1 and "verify.bogus" in err


def test_bad_expression_is_config_error(tmp_path, capsys):
    cfg = _write(tmp_path, CONIC.replace('"x1^3 - 3*x1"', '"x1^3 - 3*"'))
    assert _run(["analyze", "--config", cfg, "--out", str(tmp_path / "o")], capsys)[0] == 1


def test_infeasible_exit(tmp_path, capsys):
    # an unstable state cannot have a nonnegative storage that decreases at u = 0
    text = CONIC.replace('"x1^3 - 3*x1"', '"x1"').replace('mode = "conic"', 'mode = "l2_gain"')
    code, text, _ = _run(["analyze", "--config", _write(tmp_path, text), "--out", str(tmp_path / "o")], capsys)
    assert code == 2
    assert "infeasible" in text


def test_solver_failure_exit(tmp_path, capsys):
    text = CONIC + "\n[solver]\nmax_iter = 1\n"
    code, _, _ = _run(["analyze", "--config", _write(tmp_path, text), "--out", str(tmp_path / "o")], capsys)
    assert code == 3


def test_verification_failure_exit(tmp_path, capsys, monkeypatch):
    import dissipa.verify as verify

    monkeypatch.setattr(verify, "verify_result", lambda *a, **k: {"passed": False, "seed": 0})
    code, text, _ = _run(["analyze", "--config", _write(tmp_path, CONIC), "--out", str(tmp_path / "o")], capsys)
    assert code == 4 and "verification FAILED" in text


def test_env_overrides(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("DISSIPA_CONFIG", _write(tmp_path, CONIC))
    monkeypatch.setenv("DISSIPA_OUT", str(tmp_path / "env"))
    assert _run(["mesh"], capsys)[0] == 0
    assert (tmp_path / "env").is_dir()
    monkeypatch.setenv("DISSIPA_SEED", "-3")
    assert _run(["mesh"], capsys)[0] == 1


def test_bundled_configs_load():
    for name in ("conic1d", "pendulum", "poly3d"):
        cfg = cli.load_config(name)
        assert cfg.build_model().n == len(cfg.region.box)


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "dissipa", "report", str(tmp_path / "missing.json")],
                       capture_output=True, text=True)
    assert r.returncode == 1 and r.stdout == ""
