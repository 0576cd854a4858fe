import json
import os
import re
import subprocess
import sys

import pytest

from snfl.cli import main, render_report
from snfl.experiments import read_csv


def _run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def p2_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("runs")
    code = main(["sweep", "--problem", "P2", "--eps", "0.4,0.283,0.2", "--paths", "10000", "--mesh", "32",
                 "--seed", "7", "--out", str(out)])
    assert code == 0
    (run,) = os.listdir(out)
    return os.path.join(out, run)


@pytest.fixture(scope="module")
def p1_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("runs")
    code = main(["sweep", "--problem", "P1", "--eps", "0.4,0.2,0.1", "--paths", "4000", "--mesh", "32",
                 "--out", str(out)])
    assert code == 0
    (run,) = os.listdir(out)
    return os.path.join(out, run)


def test_sweep_writes_run_directory(p2_run):
    assert sorted(os.listdir(p2_run)) == [
        "bound_components.csv", "meta.json", "plan.json", "ratefits.csv", "reports.csv",
    ]
    meta = json.load(open(os.path.join(p2_run, "meta.json")))
    assert meta["seed"] == 7 and meta["plan"]["eps"] == [0.4, 0.283, 0.2]


def test_unknown_problem_is_usage_error(capsys, tmp_path):
    code, _, err = _run(capsys, "sweep", "--problem", "NOPE", "--out", str(tmp_path))
    assert code == 1
    assert "P0_pure_noise" in err and "P3_cos_diffusion" in err and "usage" in err


def test_unknown_flag_is_usage_error(capsys):
    code, _, err = _run(capsys, "sweep", "--bogus")
    assert code == 1 and "usage" in err


def test_missing_problem_is_usage_error(capsys):
    code, _, err = _run(capsys, "sweep")
    assert code == 1 and "--problem" in err


def test_bad_observable_is_usage_error(capsys):
    code, _, err = _run(capsys, "additive", "--problem", "P1", "--f", "x;1")
    assert code == 1


def test_report_on_empty_directory_is_runtime_error(capsys, tmp_path):
    code, _, err = _run(capsys, "report", str(tmp_path))
    assert code == 2 and "error" in err


def test_validate(capsys):
    code, out, _ = _run(capsys, "validate", "--problem", "P2")
    assert code == 0 and "A2: pass" in out


def test_validate_failing_problem(capsys, tmp_path):
    cfg = tmp_path / "plan.json"
    doc = {"label": "quad", "b": "x^2", "b1": "2*x", "b2": "2", "sigma": "1", "sigma1": "0", "sigma2": "0", "x0": 0}
    cfg.write_text(json.dumps({"problem": "quad", "problem_doc": doc}))
    code, out, _ = _run(capsys, "validate", "--config", str(cfg))
    assert code == 2 and "A2: FAIL" in out


def test_report_is_deterministic(p2_run, capsys):
    code, a, _ = _run(capsys, "report", p2_run)
    code2, b, _ = _run(capsys, "report", p2_run)
    assert code == code2 == 0 and a == b
    assert "fisher slope:" in a and "kolmogorov slope:" in a
    assert a.count("\n") >= 5


def test_null_report_renders_upper_bounds(p1_run):
    text = render_report(p1_run)
    table = [ln for ln in text.splitlines() if re.match(r"^\s*0\.\d", ln)]
    assert len(table) == 3
    assert all("≤" in ln for ln in table)
    assert "fisher slope: insufficient signal" in text


def test_plot_slope_matches_ratefits(p2_run, capsys, tmp_path):
    out = tmp_path / "f.svg"
    code, printed, _ = _run(capsys, "plot", p2_run, "--what", "fisher", "--out", str(out))
    assert code == 0 and printed.strip() == str(out)
    svg = out.read_text()
    _, fits = read_csv(os.path.join(p2_run, "ratefits.csv"))
    slope = float(next(f for f in fits if f["name"] == "fisher")["slope"])
    assert fits[0]["status"] == "ok"
    shown = float(re.search(r'data-slope="([^"]+)"', svg).group(1))
    assert abs(shown - slope) < 1e-9
    assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")


def test_plot_unknown_quantity(p2_run, capsys):
    code, _, err = _run(capsys, "plot", p2_run, "--what", "nothing")
    assert code == 2


def test_config_file_with_overrides(capsys, tmp_path):
    cfg = tmp_path / "plan.json"
    cfg.write_text(json.dumps({"problem": "P1", "eps": [0.4, 0.2, 0.1], "paths": 2000, "mesh": 16, "seed": 1}))
    code, out, _ = _run(capsys, "sweep", "--config", str(cfg), "--seed", "5", "--out", str(tmp_path / "runs"))
    assert code == 0
    run = out.splitlines()[0]
    assert json.load(open(os.path.join(run, "plan.json")))["seed"] == 5


def test_volterra_verb(capsys, tmp_path):
    code, out, _ = _run(capsys, "volterra", "--problem", "P0", "--paths", "1000", "--mesh", "32",
                        "--out", str(tmp_path))
    assert code == 0
    assert "one slope: -2.0000" in out and "square slope: -6.0000" in out
    run = out.splitlines()[0]
    schema, rows = read_csv(os.path.join(run, "volterra.csv"))
    assert schema == "volterra/1" and len(rows) == 6


def test_lower_verb(capsys, tmp_path):
    code, out, _ = _run(capsys, "lower", "--problem", "P2", "--eps", "0.4,0.2,0.1", "--paths", "4000",
                        "--mesh", "32", "--out", str(tmp_path))
    assert code == 0 and "lower bound:" in out
    run = out.splitlines()[0]
    assert "lower_bound" in json.load(open(os.path.join(run, "meta.json")))
    assert os.path.exists(os.path.join(run, "lower.csv"))


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "snfl", "validate", "--problem", "P0"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "P0_pure_noise" in proc.stdout
