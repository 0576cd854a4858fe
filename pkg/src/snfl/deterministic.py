"""Noiseless skeleton and the deterministic limit variances.

The skeleton ``x' = b(t, x)`` is integrated with classical RK4. Three running
integrals ride along as extra ODE components so that every cumulative array
is accurate to fourth order at every grid node (RK4 applied to a pure
quadrature component is Simpson's rule on each step, with the midpoint value
taken from the RK stages):

* ``E_i = int_0^{t_i} b'(u, x_u) du``
* ``y_i = int_0^{t_i} f(s, x_s) ds``
* ``C_i = int_0^{t_i} f'(s, x_s) exp(E_s) ds``
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .problem import Problem


@dataclass(frozen=True)
class SkeletonPath:
    times: np.ndarray
    x: np.ndarray
    b1: np.ndarray
    exponent: np.ndarray
    y: np.ndarray | None = None
    fexp: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.times.size - 1

    @property
    def h(self) -> float:
        return float(self.times[1] - self.times[0])

    def index(self, t: float) -> int:
        """Grid index of time ``t``; raises if ``t`` is not a grid node."""
        k = t / self.h
        i = int(round(k))
        if i < 0 or i > self.n or abs(k - i) > 1e-9 * max(1.0, abs(k)):
            raise ValueError(f"t={t} is not on the skeleton grid (h={self.h})")
        return i


def _check_n(n):
    if n < 2 or n & (n - 1):
        raise ValueError("n must be a power of two >= 2")


def solve_skeleton(p: Problem, n: int) -> SkeletonPath:
    """RK4 skeleton on ``n`` uniform steps of ``[0, T]``."""
    _check_n(n)
    h = p.horizon / n
    times = np.linspace(0.0, p.horizon, n + 1)
    obs = p.has_observable

    def rhs(t, s):
        x, e = s[0], s[1]
        out = [p.b(t, x), p.b1(t, x)]
        if obs:
            out += [p.f(t, x), p.f1(t, x) * math.exp(e)]
        return np.array([float(v) for v in out])

    dim = 4 if obs else 2
    state = np.zeros((n + 1, dim))
    state[0, 0] = p.x0
    for i in range(n):
        t, s = times[i], state[i]
        k1 = rhs(t, s)
        k2 = rhs(t + 0.5 * h, s + 0.5 * h * k1)
        k3 = rhs(t + 0.5 * h, s + 0.5 * h * k2)
        k4 = rhs(t + h, s + h * k3)
        state[i + 1] = s + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(state[i + 1])):
            raise FloatingPointError(f"non-finite skeleton state at step {i + 1}")
    x = state[:, 0]
    return SkeletonPath(
        times=times,
        x=x,
        b1=np.asarray(p.b1(times, x), dtype=float),
        exponent=state[:, 1],
        y=state[:, 2] if obs else None,
        fexp=state[:, 3] if obs else None,
    )


def quadrature(samples, h: float, rule: str = "simpson") -> float:
    """Composite trapezoid or Simpson rule on equally spaced samples."""
    v = np.asarray(samples, dtype=float)
    m = v.size - 1
    if m < 1:
        raise ValueError("need at least 2 samples")
    if rule == "trapezoid":
        return float(h * (v.sum() - 0.5 * (v[0] + v[-1])))
    if rule == "simpson":
        if m % 2:
            raise ValueError("simpson needs an even number of intervals")
        return float(h / 3.0 * (v[0] + v[-1] + 4.0 * v[1:-1:2].sum() + 2.0 * v[2:-1:2].sum()))
    raise ValueError(f"unknown rule {rule!r}")


def simpson_weights(m: int, h: float) -> np.ndarray:
    """Node weights integrating samples on ``m`` intervals to fourth order.

    Even ``m`` is composite Simpson; odd ``m >= 3`` closes with the 3/8 rule
    on the last three intervals; ``m == 1`` is the trapezoid.
    """
    w = np.zeros(m + 1)
    if m == 0:
        return w
    if m == 1:
        w[:] = 0.5 * h
        return w
    k = m if m % 2 == 0 else m - 3
    if k > 0:
        w[0:k + 1:2] += 2.0 * h / 3.0
        w[1:k:2] += 4.0 * h / 3.0
        w[0] -= h / 3.0
        w[k] -= h / 3.0
    if m % 2:
        w[k:k + 4] += 3.0 * h / 8.0 * np.array([1.0, 3.0, 3.0, 1.0])
    return w


def beta_variance(p: Problem, sk: SkeletonPath, t: float) -> float:
    """Limiting variance of the rescaled fluctuation at grid time ``t``."""
    i = sk.index(t)
    if i == 0:
        return 0.0
    r = slice(0, i + 1)
    integrand = p.sigma(sk.times[r], sk.x[r]) ** 2 * np.exp(2.0 * (sk.exponent[i] - sk.exponent[r]))
    return max(0.0, float(simpson_weights(i, sk.h) @ integrand))


def gamma_variance(p: Problem, sk: SkeletonPath, t: float) -> float:
    """Limiting variance of the rescaled additive functional at grid time ``t``.

    The inner integral is ``sigma_r exp(-E_r) (C_t - C_r)`` with the tabulated
    cumulative ``C``.
    """
    if not p.has_observable or sk.fexp is None:
        raise ValueError("problem has no observable f")
    i = sk.index(t)
    if i == 0:
        return 0.0
    r = slice(0, i + 1)
    inner = p.sigma(sk.times[r], sk.x[r]) * np.exp(-sk.exponent[r]) * (sk.fexp[i] - sk.fexp[r])
    return max(0.0, float(simpson_weights(i, sk.h) @ inner ** 2))


@dataclass(frozen=True)
class VarianceCurve:
    kind: str
    times: np.ndarray
    values: np.ndarray
    rule: str
    n: int

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(f"#schema=variance_curve/1 kind={self.kind} rule={self.rule} n={self.n}\n")
            w = csv.writer(fh)
            w.writerow(["t", "value"])
            for t, v in zip(self.times, self.values):
                w.writerow([repr(float(t)), repr(float(v))])


def variance_curve(p: Problem, sk: SkeletonPath, kind: str = "beta") -> VarianceCurve:
    fn = {"beta": beta_variance, "gamma": gamma_variance}[kind]
    vals = np.array([fn(p, sk, t) for t in sk.times])
    return VarianceCurve(kind, sk.times.copy(), vals, "simpson", sk.n)
