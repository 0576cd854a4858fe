import json
import math
import os

import numpy as np
import pytest

from snfl.experiments import (
    DEFAULT_EPS,
    FIT_COLS,
    REPORT_COLS,
    InsufficientSignal,
    SweepPlan,
    additive_sweep,
    bound_components,
    lower_bound_experiment,
    new_run_dir,
    persist,
    rate_fit,
    read_csv,
    sweep,
)
from snfl.functionals import malliavin_sample
from snfl.problem import builtin

EPS = np.array(DEFAULT_EPS)


# rate fits

def test_rate_fit_pure_power():
    f = rate_fit(EPS, EPS ** 2)
    assert f.slope == pytest.approx(2.0, abs=1e-12)
    assert f.r2 == pytest.approx(1.0, abs=1e-12)
    assert f.status == "ok" and f.excluded == []


def test_rate_fit_intercept():
    f = rate_fit(EPS, 3.0 * EPS)
    assert f.slope == pytest.approx(1.0, abs=1e-12)
    assert f.intercept == pytest.approx(math.log(3.0), abs=1e-12)


def test_rate_fit_excludes_noise_floor():
    """Points below three standard errors are left out of the fit."""
    vals = EPS ** 2 + 5e-4
    f = rate_fit(EPS, vals, np.full(EPS.size, 2e-3))
    assert f.excluded == [0.0707, 0.05]
    assert abs(f.slope - 2.0) < 0.1


def test_rate_fit_insufficient_signal():
    with pytest.raises(InsufficientSignal):
        rate_fit([0.2, 0.1], [0.04, 0.01])
    with pytest.raises(InsufficientSignal):
        rate_fit(EPS, np.full(EPS.size, 1e-6), np.full(EPS.size, 1e-5))


def test_rate_fit_slope_se_from_residuals():
    rng = np.random.default_rng(0)
    vals = EPS ** 2 * np.exp(0.05 * rng.normal(size=EPS.size))
    f = rate_fit(EPS, vals)
    assert 0 < f.slope_se < 0.2
    assert abs(f.slope - 2.0) < 4 * f.slope_se


# plans

def test_plan_validation():
    with pytest.raises(ValueError, match="decreasing"):
        SweepPlan("P1", eps=(0.1, 0.2, 0.05))
    with pytest.raises(ValueError, match=r"\(0, 1\)"):
        SweepPlan("P1", eps=(1.0, 0.5, 0.1))
    with pytest.raises(ValueError, match="paths"):
        SweepPlan("P1", paths=10)
    with pytest.raises(ValueError):
        SweepPlan("P1", functional="Z")
    with pytest.raises(ValueError):
        SweepPlan("P1", target="other")


def test_plan_round_trip():
    plan = SweepPlan("P2", eps=(0.4, 0.2), paths=2000, observable=("x", "1", "0"))
    d = json.loads(json.dumps(plan.to_dict()))
    assert SweepPlan.from_dict(d) == plan
    with pytest.raises(ValueError, match="unknown"):
        SweepPlan.from_dict({**d, "bogus": 1})


def test_plan_resolves_observable():
    p = SweepPlan("P1", observable=("x", "1", "0")).resolve()
    assert p.sources["f"] == "x"


# bound components

def test_bound_components_vanish_on_p1():
    """Mean and variance gap are zero for the linear problem (within error)."""
    p = builtin("P1")
    from snfl.deterministic import solve_skeleton
    from snfl.functionals import scheme_limit_variance

    sk = solve_skeleton(p, 64)
    lv = scheme_limit_variance(p, sk)
    ms = malliavin_sample(p, 0.2, n=64, paths=8000, seed=1, limit=True, sk=sk)
    c = bound_components(ms, lv, lv)
    assert abs(c.mean) <= 3 * c.mean_se + 1e-12
    assert abs(c.var_gap) <= 3 * c.var_gap_se + 1e-12
    assert c.dtheta4_root < 1e-12
    assert c.limit_variance == lv


def test_bound_components_p2_positive():
    from snfl.deterministic import solve_skeleton
    from snfl.functionals import scheme_limit_variance

    p = builtin("P2")
    sk = solve_skeleton(p, 64)
    lv = scheme_limit_variance(p, sk)
    ms = malliavin_sample(p, 0.2, n=64, paths=8000, seed=1, limit=True, sk=sk)
    c = bound_components(ms, lv, lv, fisher_hat=0.01)
    assert c.mean_sq > 3 * c.mean_sq_se
    assert c.dtheta4_root > 3 * c.dtheta4_root_se
    assert c.A_F > 0 and c.C_F >= c.A_F
    assert c.bound == pytest.approx(c.term_mean + c.term_var + c.term_dtheta)
    assert not c.envelope_flag


# sweeps

@pytest.fixture(scope="module")
def small_sweep():
    plan = SweepPlan("P2", eps=(0.4, 0.2, 0.1), paths=4000, mesh=32, seed=3)
    return sweep(plan)


def test_sweep_structure(small_sweep):
    res = small_sweep
    assert [r.eps for r in res.reports] == [0.4, 0.2, 0.1]
    assert len(res.components) == 3 and not res.failures
    assert set(res.fits) == {"fisher", "kolmogorov", "mean_sq", "var_gap_sq", "dtheta4_root"}
    # Fisher distance shrinks with eps
    f = [r.fisher_hat for r in res.reports]
    assert f[0] > f[2]


def test_persist_files_and_schemas(small_sweep, tmp_path):
    run = persist(small_sweep, root=str(tmp_path))
    for name in ("plan.json", "reports.csv", "ratefits.csv", "bound_components.csv", "meta.json"):
        assert os.path.exists(os.path.join(run, name))
    schema, rows = read_csv(os.path.join(run, "reports.csv"))
    assert schema == "reports/1" and tuple(rows[0]) == REPORT_COLS and len(rows) == 3
    assert rows[0]["pinsker_pass"] in ("true", "false")
    schema, rows = read_csv(os.path.join(run, "ratefits.csv"))
    assert schema == "ratefits/1" and tuple(rows[0]) == FIT_COLS
    meta = json.load(open(os.path.join(run, "meta.json")))
    assert meta["seed"] == 3 and meta["mesh"] == 32 and meta["plan"]["problem"] == "P2"
    plan = SweepPlan.from_dict(json.load(open(os.path.join(run, "plan.json"))))
    assert plan == small_sweep.plan


def test_sweep_is_reproducible(small_sweep, tmp_path):
    """Same plan, byte-identical reports."""
    again = sweep(small_sweep.plan)
    a = persist(small_sweep, run_dir=str(tmp_path / "a"))
    b = persist(again, run_dir=str(tmp_path / "b"))
    for name in ("reports.csv", "ratefits.csv", "bound_components.csv"):
        assert open(os.path.join(a, name), "rb").read() == open(os.path.join(b, name), "rb").read()


def test_run_dirs_do_not_collide(tmp_path):
    a = new_run_dir(str(tmp_path), "x")
    b = new_run_dir(str(tmp_path), "x")
    assert a != b and os.path.isdir(a) and os.path.isdir(b)


def test_read_csv_requires_schema(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError, match="schema"):
        read_csv(path)


def test_sweep_rejects_invalid_problem():
    doc = {"label": "quad", "b": "x^2", "b1": "2*x", "b2": "2", "sigma": "1", "sigma1": "0", "sigma2": "0", "x0": 0.0}
    with pytest.raises(ValueError, match="A2"):
        sweep(SweepPlan("quad", eps=(0.2, 0.1), paths=1000, mesh=16, problem_doc=doc))


def test_additive_sweep_needs_observable():
    with pytest.raises(ValueError, match="observable"):
        additive_sweep(SweepPlan("P3", eps=(0.2, 0.1), paths=1000, mesh=16))


def test_additive_sweep_fits():
    res = additive_sweep(SweepPlan("P2", eps=(0.4, 0.2, 0.1), paths=2000, mesh=32))
    assert res.plan.functional == "Y"
    assert set(res.fits) == {"fisher", "kolmogorov", "abs_mean", "abs_var_gap"}


def test_null_sweep_reports_insufficient_signal():
    res = sweep(SweepPlan("P0", eps=(0.4, 0.2, 0.1), paths=4000, mesh=32))
    for r in res.reports:
        assert r.fisher_hat <= max(0.01, 2 * r.fisher_se)
    assert res.fits["fisher"].status == "insufficient signal"
    assert res.fits["mean_sq"].status == "insufficient signal"


# lower bound

@pytest.mark.parametrize("name", ["P0", "P1"])
def test_lower_bound_zero_for_linear(name):
    lb = lower_bound_experiment(builtin(name), paths=2000, mesh=32)
    assert lb.estimate == 0.0 and lb.stderr == 0.0


def test_lower_bound_p2_positive_and_compared(small_sweep):
    lb = lower_bound_experiment(builtin("P2"), paths=20000, mesh=32, reports=small_sweep.reports)
    assert lb.estimate > 3 * lb.stderr
    assert [row["eps"] for row in lb.comparison] == [0.4, 0.2, 0.1]
    assert lb.beta2 > 0
