import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import gamma_p1_linear
from snfl.deterministic import (
    beta_variance,
    gamma_variance,
    quadrature,
    simpson_weights,
    solve_skeleton,
    variance_curve,
)
from snfl.problem import BUILTIN_NAMES, builtin


def test_p0_skeleton_is_zero():
    sk = solve_skeleton(builtin("P0"), 64)
    assert np.all(sk.x == 0.0)


def test_p1_skeleton_is_exponential_decay():
    sk = solve_skeleton(builtin("P1"), 256)
    assert sk.x[-1] == pytest.approx(math.exp(-1.0), abs=1e-10)
    np.testing.assert_allclose(sk.x, np.exp(-sk.times), atol=1e-10)


def _p2_exact(t, x0=0.5):
    """Closed form of ``x' = sin x``."""
    return 2.0 * np.arctan(np.tan(x0 / 2.0) * np.exp(t))


def test_p2_skeleton_is_fourth_order():
    """Halving the step shrinks the error by about 16."""
    e = []
    for n in (16, 32, 64):
        sk = solve_skeleton(builtin("P2"), n)
        e.append(np.max(np.abs(sk.x - _p2_exact(sk.times))))
    assert 13.0 < e[0] / e[1] < 19.0
    assert 13.0 < e[1] / e[2] < 19.0
    coarse, fine = solve_skeleton(builtin("P2"), 32), solve_skeleton(builtin("P2"), 64)
    d1 = np.max(np.abs(coarse.x - fine.x[::2]))
    fine2 = solve_skeleton(builtin("P2"), 128)
    d2 = np.max(np.abs(fine.x - fine2.x[::2]))
    assert 13.0 < d1 / d2 < 19.0


def test_n_must_be_power_of_two():
    for n in (1, 3, 100):
        with pytest.raises(ValueError):
            solve_skeleton(builtin("P0"), n)


def test_off_grid_time_rejected():
    sk = solve_skeleton(builtin("P1"), 8)
    with pytest.raises(ValueError, match="grid"):
        beta_variance(builtin("P1"), sk, 0.3)


def test_beta_examples():
    p0, p1 = builtin("P0"), builtin("P1")
    sk0 = solve_skeleton(p0, 128)
    assert beta_variance(p0, sk0, 1.0) == pytest.approx(1.0, abs=1e-12)
    assert beta_variance(p0, sk0, 0.5) == pytest.approx(0.5, abs=1e-12)
    sk1 = solve_skeleton(p1, 128)
    assert beta_variance(p1, sk1, 1.0) == pytest.approx((1.0 - math.exp(-2.0)) / 2.0, abs=1e-8)
    assert beta_variance(p1, sk1, 1.0) == pytest.approx(0.4323324, abs=1e-7)
    assert beta_variance(p1, sk1, 0.0) == 0.0


def test_gamma_examples():
    p1 = builtin("P1").with_observable("x", "1", "0")
    sk = solve_skeleton(p1, 128)
    assert gamma_variance(p1, sk, 1.0) == pytest.approx(gamma_p1_linear(), abs=1e-8)
    assert gamma_variance(p1, sk, 1.0) == pytest.approx(0.168091, abs=1e-6)
    p0 = builtin("P0").with_observable("2*x + sin(x)", "2 + cos(x)", "-sin(x)")
    sk0 = solve_skeleton(p0, 128)
    for t in (0.25, 0.5, 1.0):
        assert gamma_variance(p0, sk0, t) == pytest.approx(3.0 * t ** 3, abs=1e-10)


def test_gamma_constant_derivative():
    """``f' = c``, ``b = 0``, ``sigma = 1`` gives ``c^2 t^3 / 3``."""
    p = builtin("P0").with_observable("1.7*x", "1.7", "0")
    sk = solve_skeleton(p, 64)
    assert gamma_variance(p, sk, 1.0) == pytest.approx(1.7 ** 2 / 3.0, abs=1e-12)


def test_gamma_needs_observable():
    p = builtin("P3")
    with pytest.raises(ValueError, match="observable"):
        gamma_variance(p, solve_skeleton(p, 16), 1.0)


def test_quadrature_examples():
    x = np.linspace(0.0, 1.0, 65)
    h = 1.0 / 64
    assert quadrature(x ** 2, h, "simpson") == pytest.approx(1.0 / 3.0, abs=1e-10)
    err = quadrature(x ** 2, h, "trapezoid") - 1.0 / 3.0
    assert err == pytest.approx(h * h * 2.0 / 12.0, rel=1e-9)
    assert err == pytest.approx(4.07e-5, abs=1e-7)


def test_quadrature_preconditions():
    with pytest.raises(ValueError):
        quadrature([1.0], 0.1)
    with pytest.raises(ValueError, match="even"):
        quadrature([1.0, 2.0, 3.0, 4.0], 0.1, "simpson")
    with pytest.raises(ValueError):
        quadrature([1.0, 2.0, 3.0], 0.1, "midpoint")


@settings(max_examples=60, deadline=None)
@given(
    st.integers(2, 40),
    st.lists(st.floats(-3, 3, allow_nan=False), min_size=4, max_size=4),
)
def test_simpson_weights_exact_for_cubics(m, c):
    """Weights integrate cubics exactly for every interval count ``m >= 2``."""
    h = 0.7 / m
    x = np.linspace(0.0, 0.7, m + 1)
    v = c[0] + c[1] * x + c[2] * x ** 2 + c[3] * x ** 3
    exact = c[0] * 0.7 + c[1] * 0.7 ** 2 / 2 + c[2] * 0.7 ** 3 / 3 + c[3] * 0.7 ** 4 / 4
    assert simpson_weights(m, h) @ v == pytest.approx(exact, abs=1e-12)


@pytest.mark.parametrize("name", BUILTIN_NAMES)
def test_beta_nonnegative_and_monotone(name):
    p = builtin(name)
    vc = variance_curve(p, solve_skeleton(p, 64), "beta")
    assert np.all(vc.values >= 0.0)
    assert np.all(np.diff(vc.values) >= -1e-12)


@pytest.mark.parametrize("name", ["P1_ou", "P2_sine_drift"])
def test_gamma_monotone(name):
    p = builtin(name)
    vc = variance_curve(p, solve_skeleton(p, 64), "gamma")
    assert np.all(np.diff(vc.values) >= -1e-12)


@pytest.mark.parametrize("name", ["P2_sine_drift", "P3_cos_diffusion"])
def test_beta_mesh_convergence(name):
    """Step ``n`` and ``2n`` agree to fourth order."""
    p = builtin(name)
    b = [beta_variance(p, solve_skeleton(p, n), 1.0) for n in (16, 32, 64)]
    assert abs(b[1] - b[2]) < abs(b[0] - b[1]) / 8.0 or abs(b[1] - b[2]) < 1e-12


def test_variance_curve_csv(tmp_path):
    p = builtin("P1")
    vc = variance_curve(p, solve_skeleton(p, 8))
    path = tmp_path / "beta.csv"
    vc.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("#schema=variance_curve/1")
    assert lines[1] == "t,value"
    assert len(lines) == 2 + 9
