"""SDE problem definitions, assumption screening and configuration loading.

A problem is the scalar equation ``dX = b(t, X) dt + eps * sigma(t, X) dB`` on
``[0, T]`` with coefficients supplied together with their first two partial
derivatives in ``x``. An optional observable ``f`` defines the additive
functional ``Y = int_0^t f(s, X_s) ds``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.optimize import minimize_scalar

from .expr import ExpressionError, compile_expression

Coef = Callable[[np.ndarray, np.ndarray], np.ndarray]

# document keys, in serialisation order
COEF_KEYS = ("b", "b1", "b2", "sigma", "sigma1", "sigma2")
OBS_KEYS = ("f", "f1", "f2")


@dataclass(frozen=True)
class Problem:
    """Immutable coefficient bundle.

    Coefficient callables take ``(t, x)`` (broadcastable arrays) and return
    arrays of the broadcast shape. ``sources`` keeps the expression text used
    for serialisation.
    """

    label: str
    b: Coef
    b1: Coef
    b2: Coef
    sigma: Coef
    sigma1: Coef
    sigma2: Coef
    x0: float
    horizon: float = 1.0
    f: Coef | None = None
    f1: Coef | None = None
    f2: Coef | None = None
    oracle_flags: frozenset = frozenset()
    sources: dict = field(default_factory=dict, compare=False)

    @property
    def has_observable(self) -> bool:
        return self.f is not None

    @property
    def constant_diffusion(self) -> bool:
        """True when sigma' and sigma'' are identically zero (from the source text)."""
        return self.sources.get("sigma1") in ("0", "0.0") and self.sources.get("sigma2") in ("0", "0.0")

    def with_observable(self, f: str, f1: str, f2: str) -> "Problem":
        """Copy of the problem with a different observable given as expressions."""
        src = dict(self.sources, f=f, f1=f1, f2=f2)
        flags = self.oracle_flags - {"gamma2"}
        return replace(
            self,
            f=compile_expression(f),
            f1=compile_expression(f1),
            f2=compile_expression(f2),
            sources=src,
            oracle_flags=flags,
        )


def _bc(v, t, x):
    return np.broadcast_to(np.asarray(v, dtype=float), np.broadcast_shapes(np.shape(t), np.shape(x))).copy()


def _zero(t, x):
    return _bc(0.0, t, x)


def _one(t, x):
    return _bc(1.0, t, x)


def _f(t, x):
    return _bc(2.0 * np.asarray(x) + np.sin(x), t, x)


def _f1(t, x):
    return _bc(2.0 + np.cos(x), t, x)


def _f2(t, x):
    return _bc(-np.sin(x), t, x)


_F_SRC = {"f": "2*x + sin(x)", "f1": "2 + cos(x)", "f2": "-sin(x)"}


def _builtins():
    return {
        "P0_pure_noise": Problem(
            "P0_pure_noise", _zero, _zero, _zero, _one, _zero, _zero, x0=0.0,
            oracle_flags=frozenset({"skeleton", "beta2", "gaussian_law"}),
            sources={"b": "0", "b1": "0", "b2": "0", "sigma": "1", "sigma1": "0", "sigma2": "0"},
        ),
        "P1_ou": Problem(
            "P1_ou",
            lambda t, x: _bc(-np.asarray(x), t, x),
            lambda t, x: _bc(-1.0, t, x),
            _zero, _one, _zero, _zero, x0=1.0,
            f=_f, f1=_f1, f2=_f2,
            oracle_flags=frozenset({"skeleton", "beta2", "gaussian_law"}),
            sources={"b": "-x", "b1": "-1", "b2": "0", "sigma": "1", "sigma1": "0", "sigma2": "0", **_F_SRC},
        ),
        "P2_sine_drift": Problem(
            "P2_sine_drift",
            lambda t, x: _bc(np.sin(x), t, x),
            lambda t, x: _bc(np.cos(x), t, x),
            lambda t, x: _bc(-np.sin(x), t, x),
            _one, _zero, _zero, x0=0.5,
            f=_f, f1=_f1, f2=_f2,
            sources={"b": "sin(x)", "b1": "cos(x)", "b2": "-sin(x)", "sigma": "1", "sigma1": "0", "sigma2": "0", **_F_SRC},
        ),
        "P3_cos_diffusion": Problem(
            "P3_cos_diffusion",
            lambda t, x: _bc(-np.asarray(x), t, x),
            lambda t, x: _bc(-1.0, t, x),
            _zero,
            lambda t, x: _bc(1.0 + 0.2 * np.cos(x), t, x),
            lambda t, x: _bc(-0.2 * np.sin(x), t, x),
            lambda t, x: _bc(-0.2 * np.cos(x), t, x),
            x0=1.0,
            sources={"b": "-x", "b1": "-1", "b2": "0", "sigma": "1 + 0.2*cos(x)",
                     "sigma1": "-0.2*sin(x)", "sigma2": "-0.2*cos(x)"},
        ),
    }


BUILTIN_NAMES = tuple(_builtins())


def builtin(name: str) -> Problem:
    """Return one of the built-in test problems by name or short tag (``"P1"``)."""
    table = _builtins()
    short = {k.split("_")[0]: k for k in table}
    name = short.get(name, name)
    if name not in table:
        raise KeyError(f"unknown problem {name!r}; valid names: {', '.join(BUILTIN_NAMES)}")
    return table[name]


def serialize(p: Problem) -> str:
    """JSON document that :func:`load_problem` turns back into ``p``."""
    missing = [k for k in COEF_KEYS if k not in p.sources]
    if missing:
        raise ValueError(f"problem {p.label!r} has no expression source for {missing}")
    doc = {"label": p.label}
    for k in COEF_KEYS:
        doc[k] = p.sources[k]
    if p.has_observable:
        for k in OBS_KEYS:
            doc[k] = p.sources[k]
    doc["x0"] = p.x0
    doc["horizon"] = p.horizon
    return json.dumps(doc, indent=2)


def load_problem(document: str | dict) -> Problem:
    """Build a problem from a JSON document of coefficient expressions.

    Raises
    ------
    ExpressionError
        On a malformed expression (carries the character position).
    ValueError
        On a missing field or a non-finite probe evaluation.
    """
    doc = json.loads(document) if isinstance(document, str) else dict(document)
    required = ("label",) + COEF_KEYS + ("x0",)
    for key in required:
        if key not in doc:
            raise ValueError(f"missing required field {key!r}")
    obs = [k for k in OBS_KEYS if k in doc]
    if obs and len(obs) != len(OBS_KEYS):
        miss = [k for k in OBS_KEYS if k not in doc]
        raise ValueError(f"missing required field {miss[0]!r} (observable needs f, f1, f2)")
    fns = {}
    for key in COEF_KEYS + tuple(obs):
        try:
            fns[key] = compile_expression(str(doc[key]))
        except ExpressionError as err:
            raise ExpressionError(f"field {key!r}: {err.args[0].split(' at position')[0]}",
                                  err.position, err.source) from None
    x0 = float(doc["x0"])
    horizon = float(doc.get("horizon", 1.0))
    if not (math.isfinite(x0) and math.isfinite(horizon) and horizon > 0):
        raise ValueError("x0 must be finite and horizon positive")
    # probe on the screening box
    tt, xx = _grid(x0, horizon, 9, radius=10.0)
    for key, fn in fns.items():
        with np.errstate(all="ignore"):
            vals = fn(tt, xx)
        if not np.all(np.isfinite(vals)):
            i = int(np.flatnonzero(~np.isfinite(vals))[0])
            raise ValueError(f"field {key!r} non-finite at probe (t={tt.flat[i]:.6g}, x={xx.flat[i]:.6g})")
    sources = {k: str(doc[k]) for k in COEF_KEYS + tuple(obs)}
    return Problem(
        label=str(doc["label"]), x0=x0, horizon=horizon, sources=sources,
        **{k: fns[k] for k in COEF_KEYS},
        **{k: fns[k] for k in obs},
    )


@dataclass
class Check:
    """One assumption check: worst sampled constant and a witness on failure."""

    name: str
    passed: bool
    value: float
    witness: tuple | None = None
    note: str = ""


@dataclass
class ValidationReport:
    label: str
    grid: str
    lipschitz: float
    growth_ratio: float
    fprime_min: float | None
    derivative_max: dict
    checks: list

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def check(self, name: str) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)


def _grid(x0, horizon, density, radius=5.0):
    half = radius * (1.0 + abs(x0))
    t = np.linspace(0.0, horizon, density)
    x = np.linspace(x0 - half, x0 + half, density)
    return np.meshgrid(t, x, indexing="ij")


def _polish(fn, t, x, lo, hi, sign):
    """Refine a grid extremum of ``sign * fn(t, .)`` with a bounded 1-D search."""
    res = minimize_scalar(lambda z: -sign * float(fn(t, np.array(z))), bounds=(lo, hi),
                          method="bounded", options={"xatol": 1e-10})
    return -res.fun * sign if res.success else sign * float(fn(t, np.array(x)))


def validate(p: Problem, grid_density: int = 32) -> ValidationReport:
    """Sampling-based screen of the linear-growth, bounded-derivative and
    positive-``f'`` assumptions.

    Unboundedness is judged by comparing the worst sample on the full box with
    the worst sample on the box of half the radius: a bounded derivative that
    is already attained near ``X0`` cannot keep growing with the radius.
    This is a sufficient screen only.
    """
    if grid_density < 8:
        raise ValueError("grid density must be >= 8")
    tt, xx = _grid(p.x0, p.horizon, grid_density)
    half = 5.0 * (1.0 + abs(p.x0))
    lo, hi = p.x0 - half, p.x0 + half
    inner = np.abs(xx - p.x0) <= 0.5 * half + 1e-12
    checks = []
    dmax = {}
    worst = 0.0
    a2_ok, a2_witness, a2_note = True, None, ""
    for key in ("b1", "b2", "sigma1", "sigma2"):
        fn = getattr(p, key)
        v = np.abs(fn(tt, xx))
        if not np.all(np.isfinite(v)):
            i = np.unravel_index(int(np.flatnonzero(~np.isfinite(v))[0]), v.shape)
            a2_ok, a2_witness, a2_note = False, (float(tt[i]), float(xx[i])), f"{key} non-finite"
            dmax[key] = math.inf
            continue
        i = np.unravel_index(int(np.argmax(v)), v.shape)
        full = max(float(v[i]), _polish(lambda t, x: np.abs(fn(t, x)), tt[i], xx[i], lo, hi, 1.0))
        inner_max = float(v[inner].max())
        dmax[key] = full
        worst = max(worst, full)
        if full > 1.5 * inner_max + 1e-9 and a2_ok:
            a2_ok, a2_witness = False, (float(tt[i]), float(xx[i]))
            a2_note = f"|{key}| grows with the sampling radius ({inner_max:.4g} -> {full:.4g})"
    checks.append(Check("A2", a2_ok, worst, a2_witness, a2_note))

    ratio = (np.abs(p.b(tt, xx)) + np.abs(p.sigma(tt, xx))) / (1.0 + np.abs(xx))
    i = np.unravel_index(int(np.argmax(ratio)), ratio.shape)
    growth = float(ratio[i])
    g_inner = float(ratio[inner].max())
    a1_ok = bool(np.isfinite(growth)) and growth <= 1.5 * g_inner + 1e-9
    checks.append(Check("A1", a1_ok, growth, None if a1_ok else (float(tt[i]), float(xx[i])),
                        "" if a1_ok else "growth ratio increases with the sampling radius"))

    fmin = None
    if p.has_observable:
        v = p.f1(tt, xx)
        i = np.unravel_index(int(np.argmin(v)), v.shape)
        fmin = min(float(v[i]), _polish(p.f1, tt[i], xx[i], lo, hi, -1.0))
        ok = fmin > 0
        checks.append(Check("A3", bool(ok), max(fmin, 0.0), None if ok else (float(tt[i]), float(xx[i]))))
    lip = max(worst, growth) if np.isfinite(worst) else math.inf
    grid = f"{grid_density}x{grid_density} on [0,{p.horizon:g}]x[{lo:g},{hi:g}]"
    return ValidationReport(p.label, grid, lip, growth, fmin, dmax, checks)
