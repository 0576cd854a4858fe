"""Euler-Maruyama paths, exponential-martingale fields, Malliavin derivative
fields and the Gaussian/second-order limit pair.

Arrays carry a leading path axis so that a whole chunk of paths is advanced
in one vectorised loop over time steps. The per-path triangular fields
(:func:`malliavin_first`, :func:`malliavin_second`) use the node convention
``d[r][t]`` with ``d[r][r] = eps * sigma(t_r, X_r)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .deterministic import SkeletonPath
from .problem import Problem
from .rng import normals

MAX_STEPS = 512


@dataclass(frozen=True)
class NoiseStream:
    """Brownian increments for a block of paths, shape ``(paths, n)``."""

    seed: int
    path_ids: np.ndarray
    n: int
    horizon: float
    increments: np.ndarray

    @property
    def h(self) -> float:
        return self.horizon / self.n

    def coarsen(self, factor: int) -> "NoiseStream":
        """Same Brownian paths on a mesh ``factor`` times coarser."""
        if self.n % factor:
            raise ValueError("factor must divide n")
        inc = self.increments.reshape(self.increments.shape[0], self.n // factor, factor).sum(axis=2)
        return NoiseStream(self.seed, self.path_ids, self.n // factor, self.horizon, inc)

    def subset(self, rows) -> "NoiseStream":
        return NoiseStream(self.seed, self.path_ids[rows], self.n, self.horizon, self.increments[rows])


def noise(master_seed: int, path_id, n: int, T: float = 1.0, stream: int = 0) -> NoiseStream:
    """Increments ``dB_i ~ N(0, T/n)`` for one path id or an array of ids."""
    if n < 1:
        raise ValueError("n must be >= 1")
    ids = np.atleast_1d(np.asarray(path_id, dtype=np.uint64))
    z = normals(master_seed, ids, n, stream)
    return NoiseStream(int(master_seed), ids, int(n), float(T), z * np.sqrt(T / n))


def euler_skeleton(p: Problem, n: int, T: float | None = None) -> np.ndarray:
    """The Euler recursion with the noise switched off.

    This is the centring reference of the scheme: with ``eps = 0`` simulated
    paths coincide with it exactly.
    """
    T = p.horizon if T is None else T
    h = T / n
    x = np.empty(n + 1)
    x[0] = p.x0
    for i in range(n):
        x[i + 1] = x[i] + float(p.b(i * h, x[i])) * h
    return x


@dataclass
class PathState:
    """Euler-Maruyama states for a block of paths.

    ``cum_b1[:, i]`` is the left-point sum of ``b'(t_k, X_k) h`` over ``k < i``.
    Coefficient samples along the paths are cached on first use.
    """

    problem: Problem
    eps: float
    noise: NoiseStream
    skeleton: SkeletonPath
    x_ref: np.ndarray
    X: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n(self) -> int:
        return self.noise.n

    @property
    def h(self) -> float:
        return self.noise.h

    @property
    def times(self) -> np.ndarray:
        return self.skeleton.times

    @property
    def dB(self) -> np.ndarray:
        return self.noise.increments

    def coef(self, name: str) -> np.ndarray:
        """Coefficient ``name`` (``b1``, ``sigma``, ``f2`` ...) at every node."""
        if name not in self._cache:
            fn = getattr(self.problem, name)
            self._cache[name] = np.asarray(fn(self.times[None, :], self.X), dtype=float)
        return self._cache[name]

    @property
    def cum_b1(self) -> np.ndarray:
        if "cum_b1" not in self._cache:
            c = np.zeros_like(self.X)
            np.cumsum(self.coef("b1")[:, :-1] * self.h, axis=1, out=c[:, 1:])
            self._cache["cum_b1"] = c
        return self._cache["cum_b1"]

    def rescaled(self) -> np.ndarray:
        """``(X - x_ref) / eps`` at every node."""
        return (self.X - self.x_ref[None, :]) / self.eps

    def z_field(self, path: int = 0) -> np.ndarray:
        """Exponential martingale ``z[r][t]`` (zero for ``r > t``) of one path.

        Filled by the Euler recursion ``Z <- Z (1 + eps sigma' dB)`` started
        from ``z[r][r] = 1``.
        """
        fac = 1.0 + self.eps * self.coef("sigma1")[path, :-1] * self.dB[path]
        return _masked_cumprod(fac)


def _masked_cumprod(fac: np.ndarray) -> np.ndarray:
    """``out[r, t] = prod(fac[r:t])`` for ``t >= r`` and 0 below the diagonal."""
    n = fac.size
    m = np.ones((n + 1, n))
    iu = np.triu_indices(n + 1, 0, n)
    m[iu] = np.broadcast_to(fac, (n + 1, n))[iu]
    out = np.zeros((n + 1, n + 1))
    out[:, 1:] = np.cumprod(m, axis=1)
    out[:, 0] = 1.0
    return np.triu(out)


def simulate_sde(p: Problem, eps: float, ns: NoiseStream, sk: SkeletonPath) -> PathState:
    """Euler-Maruyama for ``dX = b dt + eps sigma dB`` on the noise block."""
    if not 0.0 <= eps < 1.0:
        raise ValueError("eps must lie in [0, 1)")
    if ns.n != sk.n or abs(ns.horizon - sk.times[-1]) > 1e-12:
        raise ValueError("noise grid does not match skeleton grid")
    if ns.n > MAX_STEPS:
        raise ValueError(f"n is capped at {MAX_STEPS}")
    n, h = ns.n, ns.h
    X = np.empty((ns.increments.shape[0], n + 1))
    X[:, 0] = p.x0
    t = sk.times
    for i in range(n):
        x = X[:, i]
        X[:, i + 1] = x + p.b(t[i], x) * h + eps * p.sigma(t[i], x) * ns.increments[:, i]
        if not np.all(np.isfinite(X[:, i + 1])):
            raise FloatingPointError(f"non-finite state at step {i + 1}")
    return PathState(p, float(eps), ns, sk, euler_skeleton(p, n, ns.horizon), X)


@dataclass(frozen=True)
class DerivativeField:
    d: np.ndarray
    method: str


def malliavin_first(ps: PathState, method: str = "closed_form", path: int = 0) -> DerivativeField:
    """First Malliavin derivative triangle ``d[r][t]`` of one path.

    ``closed_form`` multiplies ``eps sigma_r``, the exponential of the stored
    drift-derivative sums and the ``Z`` field; ``variational`` runs the Euler
    recursion of the linear equation for each starting node ``r``.
    """
    sig = ps.coef("sigma")[path]
    if method == "closed_form":
        cum = ps.cum_b1[path]
        expo = np.triu(np.exp(cum[None, :] - cum[:, None]))
        d = ps.eps * sig[:, None] * expo * ps.z_field(path)
    elif method == "variational":
        fac = 1.0 + ps.coef("b1")[path, :-1] * ps.h + ps.eps * ps.coef("sigma1")[path, :-1] * ps.dB[path]
        d = ps.eps * sig[:, None] * _masked_cumprod(fac)
    else:
        raise ValueError(f"unknown method {method!r}")
    return DerivativeField(d, method)


@dataclass(frozen=True)
class SecondDerivativeField:
    d2: np.ndarray
    t_index: int
    method: str


def malliavin_second(ps: PathState, d1: DerivativeField, t_final: float, path: int = 0) -> SecondDerivativeField:
    """Second Malliavin derivative ``d2[theta][r]`` at a fixed final time.

    For every pair the linear equation is advanced with Euler from the node
    ``max(theta, r)``. With ``sigma' = sigma'' = 0`` the reduced closed form
    (a weighted sum of ``b'' D_theta X D_r X``) is used instead; its
    propagator matches the provenance of ``d1``.
    """
    N = ps.skeleton.index(t_final)
    h, eps = ps.h, ps.eps
    d = d1.d[: N + 1, : N + 1]
    b1 = ps.coef("b1")[path, : N + 1]
    b2 = ps.coef("b2")[path, : N + 1]
    if ps.problem.constant_diffusion:
        if d1.method == "closed_form":
            cum = ps.cum_b1[path, : N + 1]
            prop = np.exp(cum[N] - cum[:N])
        else:
            tail = np.append(np.cumprod((1.0 + b1[1:N] * h)[::-1])[::-1], 1.0)
            prop = tail
        # w[k] = b''_k h prop_k; d2[th, r] = sum_{k >= max(th, r)} w_k d[th, k] d[r, k]
        w = b2[:N] * h * prop
        dd = d[:, :N]
        d2 = (dd * w[None, :]) @ dd.T
        return SecondDerivativeField(d2, N, "reduced")
    s1 = ps.coef("sigma1")[path, : N + 1]
    s2 = ps.coef("sigma2")[path, : N + 1]
    dB = ps.dB[path]
    idx = np.arange(N + 1)
    m = np.maximum(idx[:, None], idx[None, :])
    # eps sigma'(r) D_theta X_r + eps sigma'(theta) D_r X_theta, indexed (theta, r)
    init = eps * (s1[None, :] * d + s1[:, None] * d.T)
    Y = np.zeros((N + 1, N + 1))
    for s in range(N + 1):
        start = m == s
        Y[start] = init[start]
        if s == N:
            break
        act = m <= s
        prod = np.outer(d[:, s], d[:, s])
        upd = (b2[s] * prod + b1[s] * Y) * h + eps * (s2[s] * prod + s1[s] * Y) * dB[s]
        Y = np.where(act, Y + upd, Y)
    return SecondDerivativeField(Y, N, "variational")


@dataclass
class LimitPair:
    """Limit processes on the scheme-consistent skeleton.

    ``DU`` and ``DV`` are derivatives with respect to the increment on
    ``[t_r, t_{r+1})`` at the final index, so that ``U_N = sum_r DU_r dB_r``
    holds exactly.
    """

    U: np.ndarray
    V: np.ndarray
    DU: np.ndarray
    DV: np.ndarray
    t_index: int
    h: float

    def skorokhod(self) -> np.ndarray:
        """``delta(V_t DU_t) = V_t U_t - <DV_t, DU_t>`` per path."""
        N = self.t_index
        return self.V[:, N] * self.U[:, N] - (self.DV * self.DU[None, :]).sum(axis=1) * self.h


def simulate_limit_pair(p: Problem, ns: NoiseStream, sk: SkeletonPath, t: float | None = None) -> LimitPair:
    """Euler paths of ``U`` and ``V`` plus their derivative fields at ``t``."""
    if ns.n != sk.n:
        raise ValueError("noise grid does not match skeleton grid")
    n, h = ns.n, ns.h
    N = n if t is None else sk.index(t)
    x = euler_skeleton(p, n, ns.horizon)
    tt = sk.times
    b1, b2 = p.b1(tt, x), p.b2(tt, x)
    sig, s1 = p.sigma(tt, x), p.sigma1(tt, x)
    dB = ns.increments
    P = dB.shape[0]
    U = np.zeros((P, n + 1))
    V = np.zeros((P, n + 1))
    for k in range(n):
        U[:, k + 1] = U[:, k] * (1.0 + b1[k] * h) + sig[k] * dB[:, k]
        V[:, k + 1] = V[:, k] * (1.0 + b1[k] * h) + 0.5 * b2[k] * U[:, k] ** 2 * h + s1[k] * U[:, k] * dB[:, k]
    # Phi(a) = prod_{j=a}^{N-1} (1 + b1_j h), a = 0..N
    lam = 1.0 + b1[:N] * h
    Phi = np.append(np.cumprod(lam[::-1])[::-1], 1.0)
    DU = sig[:N] * Phi[1:]
    # D_r V_N = Phi(r+1) s1_r U_r + sigma_r Phi(r+1) * sum_{k>r} (b2_k U_k h + s1_k dB_k) / lam_k
    term = (b2[None, :N] * U[:, :N] * h + s1[None, :N] * dB[:, :N]) / lam[None, :]
    tail = np.zeros((P, N + 1))
    tail[:, :N] = np.cumsum(term[:, ::-1], axis=1)[:, ::-1]
    DV = Phi[None, 1:] * (s1[None, :N] * U[:, :N] + sig[None, :N] * tail[:, 1:])
    return LimitPair(U, V, DU, DV, N, h)


_MAGIC = b"SNFLPATH"


def dump_path_state(ps: PathState, path: int, fh) -> None:
    """Binary dump of one path: header then X, increments and reference."""
    pid = int(ps.noise.path_ids[path])
    fh.write(_MAGIC + struct.pack("<IIdQQ", 1, ps.n, ps.eps, ps.noise.seed, pid))
    for arr in (ps.X[path], ps.dB[path], ps.x_ref):
        fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_path_state(fh) -> dict:
    head = fh.read(len(_MAGIC) + struct.calcsize("<IIdQQ"))
    if head[: len(_MAGIC)] != _MAGIC:
        raise ValueError("not a path-state dump")
    version, n, eps, seed, pid = struct.unpack("<IIdQQ", head[len(_MAGIC):])
    X = np.frombuffer(fh.read(8 * (n + 1)), dtype="<f8")
    dB = np.frombuffer(fh.read(8 * n), dtype="<f8")
    ref = np.frombuffer(fh.read(8 * (n + 1)), dtype="<f8")
    return {"version": version, "n": n, "eps": eps, "seed": seed, "path_id": pid, "X": X, "dB": dB, "x_ref": ref}
