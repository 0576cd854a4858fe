"""Per-path Malliavin functionals of the Euler scheme.

The derivative of a functional ``F`` of the scheme is taken with respect to
each Brownian increment: ``D_r F = dF / d(dB_r)`` is constant on
``[t_r, t_{r+1})``, so integrals over ``r`` are exact sums ``h * sum_r``.
With ``m_k = 1 + b'_k h + eps sigma'_k dB_k`` and ``G_k = prod_{j<k} m_j``,

* ``D_r X~_N = sigma_r G_N / G_{r+1}``
* ``D_theta D_r X~_N = eps sigma_theta (G_r / G_{theta+1}) kappa_r`` for ``theta < r``

where ``kappa_r`` depends only on the path from ``r`` on. The conditional
expectations ``E[. | F_r]`` therefore reduce to regressions on ``X_r``, and
``Theta``, ``<D Theta, u>`` and ``||D Theta||^2`` cost ``O(n)`` per path via
prefix and suffix sums. The additive functional ``Y~`` has the same
structure with different ``phi`` and ``kappa`` arrays.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .deterministic import SkeletonPath, simpson_weights, solve_skeleton
from .paths import PathState, noise, simulate_limit_pair, simulate_sde
from .problem import Problem

N_BINS = 64
MIN_CELL = 50
CHUNK = 8192


def workers() -> int:
    """Worker cap from ``SNFL_WORKERS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("SNFL_WORKERS", "1")))
    except ValueError:
        return 1


def map_ordered(fn, items):
    """``list(map(fn, items))`` on up to :func:`workers` threads, order kept."""
    items = list(items)
    w = min(workers(), len(items))
    if w <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=w) as ex:
        return list(ex.map(fn, items))


def _suffix(a):
    """``out[:, k] = sum_{j >= k} a[:, j]`` with an extra zero column."""
    out = np.zeros((a.shape[0], a.shape[1] + 1))
    out[:, :-1] = np.cumsum(a[:, ::-1], axis=1)[:, ::-1]
    return out


def _prefix(a):
    """``out[:, k] = sum_{j < k} a[:, j]``."""
    out = np.zeros((a.shape[0], a.shape[1] + 1))
    np.cumsum(a, axis=1, out=out[:, 1:])
    return out


@dataclass
class Fields:
    """Interval-derivative ingredients of one functional on a block of paths.

    Arrays over ``r = 0..N-1`` unless noted; ``G`` has ``N + 1`` columns.
    ``D_r F = sig * phi``; ``kappa`` is the post-``r`` factor of the mixed
    second derivative and ``diag`` the second derivative on the diagonal.
    """

    F: np.ndarray
    Xr: np.ndarray
    sig: np.ndarray
    G: np.ndarray
    phi: np.ndarray
    kappa: np.ndarray
    diag: np.ndarray
    eps: float
    h: float


def _base(ps: PathState, N: int):
    h, eps = ps.h, ps.eps
    b1 = ps.coef("b1")[:, :N]
    s1 = ps.coef("sigma1")[:, :N]
    dB = ps.dB[:, :N]
    m = 1.0 + b1 * h + eps * s1 * dB
    if np.any(m <= 0.0):
        raise FloatingPointError("derivative propagator lost positivity; reduce eps or refine the mesh")
    G = np.ones((m.shape[0], N + 1))
    np.cumprod(m, axis=1, out=G[:, 1:])
    c = ps.coef("b2")[:, :N] * h + eps * ps.coef("sigma2")[:, :N] * dB
    J = _prefix(G[:, :N] * c / m)
    return m, G, J


def x_fields(ps: PathState, N: int | None = None) -> Fields:
    """Fields of the rescaled state ``X~_N = (X_N - x_N) / eps``."""
    N = ps.n if N is None else N
    _, G, J = _base(ps, N)
    sig = ps.coef("sigma")[:, :N]
    s1 = ps.coef("sigma1")[:, :N]
    P = G[:, N:N + 1] / G[:, 1:]
    H = J[:, N:N + 1] - J[:, 1:]
    kappa = P * (s1 + sig * H / G[:, :N])
    diag = ps.eps * sig ** 2 * P * H / G[:, 1:]
    F = (ps.X[:, N] - ps.x_ref[N]) / ps.eps
    return Fields(F, ps.X[:, :N], sig, G, P, kappa, diag, ps.eps, ps.h)


def y_fields(ps: PathState, N: int | None = None) -> Fields:
    """Fields of the rescaled additive functional ``Y~ = (Y - y) / eps``.

    ``Y`` is the Simpson sum of ``f(t_k, X_k)`` on nodes ``0..N``, and ``y``
    the same sum along the noiseless Euler reference.
    """
    p = ps.problem
    if not p.has_observable:
        raise ValueError("problem has no observable f")
    N = ps.n if N is None else N
    _, G, J = _base(ps, N)
    W = simpson_weights(N, ps.h)
    sig = ps.coef("sigma")[:, :N]
    s1 = ps.coef("sigma1")[:, :N]
    f1 = ps.coef("f1")[:, : N + 1]
    f2 = ps.coef("f2")[:, : N + 1]
    Gn = G
    wf1G = W * f1 * Gn
    A = _suffix(wf1G)[:, 1 : N + 1]               # sum_{k>r}
    B = _suffix(W * f2 * Gn ** 2)[:, 1 : N + 1]
    C = _suffix(wf1G * J)[:, 1 : N + 1]
    Jn = J[:, 1 : N + 1]                           # J_{r+1}
    Gr, Gr1 = G[:, :N], G[:, 1 : N + 1]
    inner = C - Jn * A
    phi = A / Gr1
    kappa = sig * B / (Gr * Gr1) + (s1 * A + sig * inner / Gr) / Gr1
    diag = ps.eps * sig ** 2 * (B + inner) / Gr1 ** 2
    t = ps.times[: N + 1]
    y_ref = float(W @ p.f(t, ps.x_ref[: N + 1]))
    F = (ps.coef("f")[:, : N + 1] @ W - y_ref) / ps.eps
    return Fields(F, ps.X[:, :N], sig, G, phi, kappa, diag, ps.eps, ps.h)


class ConditionalProjection:
    """Binned regression tables ``E[target_r | X_r]`` per grid node.

    Bins are equal-probability cells of a pilot sample; cells with fewer
    than ``MIN_CELL`` samples are merged into a neighbour. Lookup interpolates
    linearly between cell centroids and is constant beyond the end cells.
    """

    method = "markov_regression"

    def __init__(self, edges: np.ndarray, names):
        self.edges = edges                        # (N, N_BINS - 1) interior edges
        self.N = edges.shape[0]
        nb = edges.shape[1] + 1
        self.sums = {k: np.zeros((self.N, nb)) for k in names}
        self.sq = {k: np.zeros((self.N, nb)) for k in names}
        self.xsum = np.zeros((self.N, nb))
        self.count = np.zeros((self.N, nb))
        self.warnings = 0
        self._tables = None

    @classmethod
    def from_pilot(cls, Xr: np.ndarray, names, n_bins: int = N_BINS):
        levels = np.arange(1, n_bins) / n_bins
        edges = np.quantile(Xr, levels, axis=0).T
        return cls(np.ascontiguousarray(edges), names)

    def _bins(self, Xr):
        out = np.empty(Xr.shape, dtype=np.intp)
        for r in range(self.N):
            out[:, r] = np.searchsorted(self.edges[r], Xr[:, r], side="right")
        return out

    def accumulate(self, Xr: np.ndarray, targets: dict) -> None:
        nb = self.edges.shape[1] + 1
        flat = (self._bins(Xr) + nb * np.arange(self.N)[None, :]).ravel()
        size = self.N * nb
        self.count += np.bincount(flat, minlength=size).reshape(self.N, nb)
        self.xsum += np.bincount(flat, Xr.ravel(), minlength=size).reshape(self.N, nb)
        for k, v in targets.items():
            self.sums[k] += np.bincount(flat, v.ravel(), minlength=size).reshape(self.N, nb)
            self.sq[k] += np.bincount(flat, (v * v).ravel(), minlength=size).reshape(self.N, nb)
        self._tables = None

    def merge(self, other: "ConditionalProjection") -> None:
        self.count += other.count
        self.xsum += other.xsum
        for k in self.sums:
            self.sums[k] += other.sums[k]
            self.sq[k] += other.sq[k]
        self._tables = None

    def finalize(self):
        """Merge sparse cells and build centroid/value tables."""
        if self._tables is not None:
            return self._tables
        centers, values, counts, ses = [], [], [], []
        warn = 0
        for r in range(self.N):
            groups, cur = [], []
            # a degenerate slice (e.g. the fixed initial state) empties all but one bin by design
            live = self.edges[r, -1] > self.edges[r, 0]
            for j in range(self.count.shape[1]):
                if self.count[r, j] == 0 and live:
                    warn += 1
                cur.append(j)
                if self.count[r, cur].sum() >= MIN_CELL:
                    groups.append(cur)
                    cur = []
            if cur:
                if groups:
                    groups[-1].extend(cur)
                else:
                    groups.append(cur)
            cnt = np.array([self.count[r, g].sum() for g in groups])
            if cnt.sum() == 0:
                raise ValueError(f"no samples at node {r}")
            keep = cnt > 0
            cnt = cnt[keep]
            groups = [g for g, k in zip(groups, keep) if k]
            centers.append(np.array([self.xsum[r, g].sum() for g in groups]) / cnt)
            row, se = {}, {}
            for k in self.sums:
                s = np.array([self.sums[k][r, g].sum() for g in groups])
                q = np.array([self.sq[k][r, g].sum() for g in groups])
                mean = s / cnt
                var = np.maximum(q / cnt - mean ** 2, 0.0)
                row[k], se[k] = mean, np.sqrt(var / np.maximum(cnt - 1, 1))
            values.append(row)
            ses.append(se)
            counts.append(cnt)
        self.warnings = warn
        self._tables = (centers, values, counts, ses)
        return self._tables

    def predict(self, name: str, Xr: np.ndarray) -> np.ndarray:
        centers, values, _, _ = self.finalize()
        out = np.empty(Xr.shape)
        for r in range(self.N):
            c, v = centers[r], values[r][name]
            if c.size == 1:
                out[:, r] = v[0]
            else:
                out[:, r] = np.interp(Xr[:, r], c, v)
        return out

    def g(self, r: int, x, name: str = "phi") -> np.ndarray:
        """Table value at node ``r`` for states ``x``."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        centers, values, _, _ = self.finalize()
        c, v = centers[r], values[r][name]
        return np.full(x.shape, v[0]) if c.size == 1 else np.interp(x, c, v)

    def cell_stats(self, r: int, name: str = "phi"):
        """Centroids, means, standard errors and counts of node ``r``."""
        centers, values, counts, ses = self.finalize()
        return centers[r], values[r][name], ses[r][name], counts[r]


def assemble(fl: Fields, ghat: np.ndarray, kbar: np.ndarray) -> dict:
    """Per-path ``Theta``, ``||u||^2``, ``<D Theta, u>``, ``||D Theta||^2``.

    ``D_theta Theta = sum_r h [D_theta D_r F u_r + D_r F E[D_theta D_r F | F_r] 1{theta < r}]``.
    """
    h, eps = fl.h, fl.eps
    N = fl.sig.shape[1]
    G = fl.G
    u = fl.sig * ghat
    DF = fl.sig * fl.phi
    theta = h * np.sum(DF * u, axis=1)
    unorm2 = h * np.sum(u * u, axis=1)
    q = h * G[:, :N] * (fl.kappa * u + DF * kbar)
    S1 = _suffix(q)[:, 1 : N + 1]                     # r > theta
    S2 = _prefix(h * fl.sig * u / G[:, 1 : N + 1])[:, :N]  # r < theta
    dtheta = eps * (fl.sig * S1 / G[:, 1 : N + 1] + fl.kappa * G[:, :N] * S2) + h * fl.diag * u
    return {
        "theta": theta,
        "u_norm2": unorm2,
        "dtheta_u": h * np.sum(dtheta * u, axis=1),
        "dtheta_norm2": h * np.sum(dtheta * dtheta, axis=1),
        "u": u,
        "dtheta": dtheta,
    }


def _fields(ps, N, functional):
    return x_fields(ps, N) if functional == "X" else y_fields(ps, N)


@dataclass
class MalliavinSample:
    """Per-path functionals of one ensemble.

    ``aux`` holds optional extra per-path columns (limit-process controls,
    Skorokhod functional).
    """

    path_id: np.ndarray
    F: np.ndarray
    theta: np.ndarray
    u_norm2: np.ndarray
    dtheta_u: np.ndarray
    dtheta_norm2: np.ndarray
    eps: float = float("nan")
    t: float = float("nan")
    functional: str = "X"
    aux: dict = field(default_factory=dict)
    projection_warnings: int = 0

    def __len__(self):
        return self.F.size

    def subset(self, rows) -> "MalliavinSample":
        return MalliavinSample(
            self.path_id[rows], self.F[rows], self.theta[rows], self.u_norm2[rows],
            self.dtheta_u[rows], self.dtheta_norm2[rows], self.eps, self.t, self.functional,
            {k: v[rows] for k, v in self.aux.items()}, self.projection_warnings,
        )

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(f"#schema=malliavin_sample/1 functional={self.functional} eps={self.eps!r} t={self.t!r}\n")
            w = csv.writer(fh)
            w.writerow(["path_id", "F", "theta", "u_norm2", "dtheta_u", "dtheta_norm2"])
            for row in zip(self.path_id, self.F, self.theta, self.u_norm2, self.dtheta_u, self.dtheta_norm2):
                w.writerow([int(row[0])] + [repr(float(v)) for v in row[1:]])


def _chunks(paths, chunk):
    return [np.arange(a, min(a + chunk, paths), dtype=np.uint64) for a in range(0, paths, chunk)]


def conditional_projection(p: Problem, eps: float, t: float, method: str = "markov_regression",
                           budget: int = 20000, n: int = 128, seed: int = 0,
                           functional: str = "X", sk: SkeletonPath | None = None):
    """Estimate ``E[phi_r | X_r]`` and ``E[kappa_r | X_r]``.

    ``markov_regression`` bins ``budget`` simulated paths; ``branching``
    returns a :class:`BranchingProjection` that averages ``budget`` fresh
    continuations per query point.
    """
    sk = sk or solve_skeleton(p, n)
    N = sk.index(t)
    if method == "branching":
        return BranchingProjection(p, eps, sk, N, budget, seed, functional)
    if method != "markov_regression":
        raise ValueError(f"unknown method {method!r}")
    return _fit_projection(p, eps, sk, N, seed, _chunks(budget, CHUNK), functional)


def _fit_projection(p, eps, sk, N, seed, chunks, functional):
    def fields(ids):
        ps = simulate_sde(p, eps, noise(seed, ids, sk.n, p.horizon), sk)
        return _fields(ps, N, functional)

    first = fields(chunks[0])
    proj = ConditionalProjection.from_pilot(first.Xr, ("phi", "kappa"))
    proj.accumulate(first.Xr, {"phi": first.phi, "kappa": first.kappa})

    def part(ids):
        fl = fields(ids)
        loc = ConditionalProjection(proj.edges, ("phi", "kappa"))
        loc.accumulate(fl.Xr, {"phi": fl.phi, "kappa": fl.kappa})
        return loc

    for loc in map_ordered(part, chunks[1:]):
        proj.merge(loc)
    proj.finalize()
    return proj


class BranchingProjection:
    """Nested Monte Carlo: ``M`` fresh continuations from ``(t_r, x)``.

    Continuation noise uses stream tag ``1 + r`` so it never collides with
    the outer paths.
    """

    method = "branching"

    def __init__(self, p, eps, sk, N, M, seed, functional="X"):
        self.p, self.eps, self.sk, self.N, self.M, self.seed = p, eps, sk, N, M, seed
        self.functional = functional
        self.warnings = 0

    def estimate(self, r: int, x, name: str = "phi"):
        """Mean and standard error of the continuation average at each ``x``."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        p, sk, M = self.p, self.sk, self.M
        n, h = sk.n, sk.h
        ids = np.arange(x.size * M, dtype=np.uint64)
        dB = noise(self.seed, ids, n, p.horizon, stream=1 + r).increments
        dB[:, :r] = 0.0
        X = np.empty((ids.size, n + 1))
        X[:, : r + 1] = np.repeat(x, M)[:, None]
        t = sk.times
        for i in range(r, n):
            X[:, i + 1] = X[:, i] + p.b(t[i], X[:, i]) * h + self.eps * p.sigma(t[i], X[:, i]) * dB[:, i]
        from .paths import NoiseStream
        ns = NoiseStream(self.seed, ids, n, p.horizon, dB)
        ps = PathState(p, self.eps, ns, sk, np.zeros(n + 1), X)
        fl = _fields(ps, self.N, self.functional)
        v = getattr(fl, name)[:, r].reshape(x.size, M)
        return v.mean(axis=1), v.std(axis=1, ddof=1) / np.sqrt(M)

    def g(self, r: int, x, name: str = "phi"):
        return self.estimate(r, x, name)[0]

    def predict(self, name: str, Xr: np.ndarray) -> np.ndarray:
        out = np.empty(Xr.shape)
        for r in range(Xr.shape[1]):
            out[:, r] = self.g(r, Xr[:, r], name)
        return out


def theta(ps: PathState, proj, t: float | None = None, functional: str = "X"):
    """``(Theta, ||u||^2)`` per path."""
    N = ps.n if t is None else ps.skeleton.index(t)
    fl = _fields(ps, N, functional)
    g = proj.predict("phi", fl.Xr)
    u = fl.sig * g
    return fl.h * np.sum(fl.sig * fl.phi * u, axis=1), fl.h * np.sum(u * u, axis=1)


def theta_gradient(ps: PathState, proj, t: float | None = None, functional: str = "X"):
    """``(<D Theta, u>, ||D Theta||^2)`` per path."""
    N = ps.n if t is None else ps.skeleton.index(t)
    fl = _fields(ps, N, functional)
    out = assemble(fl, proj.predict("phi", fl.Xr), proj.predict("kappa", fl.Xr))
    return out["dtheta_u"], out["dtheta_norm2"]


def additive_fields(ps: PathState, proj, t: float | None = None) -> MalliavinSample:
    """:class:`MalliavinSample` of ``Y~`` for an already simulated block."""
    N = ps.n if t is None else ps.skeleton.index(t)
    fl = y_fields(ps, N)
    out = assemble(fl, proj.predict("phi", fl.Xr), proj.predict("kappa", fl.Xr))
    return MalliavinSample(ps.noise.path_ids.astype(np.int64), fl.F, out["theta"], out["u_norm2"],
                           out["dtheta_u"], out["dtheta_norm2"], ps.eps, float(ps.times[N]), "Y")


def malliavin_sample(p: Problem, eps: float, t: float = 1.0, n: int = 128, paths: int = 10000,
                     seed: int = 0, functional: str = "X", limit: bool = False,
                     sk: SkeletonPath | None = None, chunk: int = CHUNK) -> MalliavinSample:
    """Two-pass ensemble: fit the projection, then evaluate every path.

    With ``limit=True`` the limit processes are simulated on the same noise
    and ``aux`` gains ``U`` (the Gaussian limit of ``F``), ``DF_DU``
    (``<DF, DU>``) and, for ``X``, ``skorokhod`` (``delta(V_t DU_t)``) and
    ``DV_DU`` (``<DV, DU>``).
    """
    sk = sk or solve_skeleton(p, n)
    N = sk.index(t)
    chunks = _chunks(paths, chunk)
    proj = _fit_projection(p, eps, sk, N, seed, chunks, functional)
    W = simpson_weights(N, sk.h)
    dU = limit_derivative(p, sk, t, functional) if limit else None

    def evaluate(ids):
        ns = noise(seed, ids, sk.n, p.horizon)
        ps = simulate_sde(p, eps, ns, sk)
        fl = _fields(ps, N, functional)
        out = assemble(fl, proj.predict("phi", fl.Xr), proj.predict("kappa", fl.Xr))
        res = {k: out[k] for k in ("theta", "u_norm2", "dtheta_u", "dtheta_norm2")}
        res["F"] = fl.F
        if limit:
            lp = simulate_limit_pair(p, ns, sk, t)
            if functional == "X":
                res["U"] = lp.U[:, N]
                res["skorokhod"] = lp.skorokhod()
                res["DV_DU"] = sk.h * lp.DV @ lp.DU
            else:
                f1 = p.f1(sk.times[: N + 1], ps.x_ref[: N + 1])
                res["U"] = lp.U[:, : N + 1] @ (W * f1)
            res["DF_DU"] = sk.h * (fl.sig * fl.phi) @ dU
        return res

    parts = map_ordered(evaluate, chunks)
    cat = {k: np.concatenate([q[k] for q in parts]) for k in parts[0]}
    aux = {k: cat[k] for k in ("U", "skorokhod", "DF_DU", "DV_DU") if k in cat}
    return MalliavinSample(
        np.arange(paths, dtype=np.int64), cat["F"], cat["theta"], cat["u_norm2"],
        cat["dtheta_u"], cat["dtheta_norm2"], float(eps), float(t), functional, aux, proj.warnings,
    )


@dataclass
class NegativeMoment:
    estimate: float
    stderr: float
    top5_share: float
    trimmed: float
    n: int


def negative_moment(samples, p0: float) -> NegativeMoment:
    """Monte Carlo ``E[s^{-p0}]`` with heavy-tail diagnostics.

    The headline estimate is untrimmed; ``trimmed`` drops the largest 0.1%
    of contributions. ``stderr`` is the jackknife standard error.
    """
    s = np.asarray(samples, dtype=float).ravel()
    if p0 <= 0:
        raise ValueError("p0 must be positive")
    bad = np.flatnonzero(~(s > 0))
    if bad.size:
        raise ValueError(f"nonpositive sample at path {int(bad[0])}: {s[bad[0]]!r}")
    v = s ** (-p0)
    n = v.size
    est = float(v.mean())
    if n > 1:
        loo = (v.sum() - v) / (n - 1)
        se = float(np.sqrt((n - 1) / n * np.sum((loo - loo.mean()) ** 2)))
    else:
        se = float("nan")
    srt = np.sort(v)
    top5 = float(srt[-5:].sum() / v.sum())
    k = int(np.floor(0.001 * n))
    trimmed = float(srt[: n - k].mean()) if k else est
    return NegativeMoment(est, se, top5, trimmed, n)


@dataclass
class VolterraRow:
    kernel: str
    t: float
    estimate: float
    stderr: float
    top5_share: float


@dataclass
class VolterraTable:
    rows: list
    slopes: dict
    slope_se: dict


def volterra_negative_moment_check(p: Problem, eps: float, p0: float, t_list, n: int = 128,
                                   paths: int = 100000, seed: int = 0) -> VolterraTable:
    """``E[(int_0^t k(t, r) sigma^2(r, X_r) dr)^{-p0}]`` for ``k = 1`` and
    ``k = (t - r)^2`` with log-log slopes in ``t``."""
    sk = solve_skeleton(p, n)
    idx = [sk.index(t) for t in t_list]
    if abs(float(p.sigma(0.0, p.x0))) == 0.0:
        raise ValueError("sigma(0, X0) must be nonzero")
    acc = {(k, i): [] for k in ("one", "square") for i in idx}
    for ids in _chunks(paths, CHUNK):
        ps = simulate_sde(p, eps, noise(seed, ids, n, p.horizon), sk)
        s2 = ps.coef("sigma") ** 2
        for i in idx:
            w = simpson_weights(i, sk.h)
            acc[("one", i)].append(s2[:, : i + 1] @ w)
            acc[("square", i)].append(s2[:, : i + 1] @ (w * (sk.times[i] - sk.times[: i + 1]) ** 2))
    rows, slopes, ses = [], {}, {}
    for k in ("one", "square"):
        ests = []
        for t, i in zip(t_list, idx):
            nm = negative_moment(np.concatenate(acc[(k, i)]), p0)
            rows.append(VolterraRow(k, float(t), nm.estimate, nm.stderr, nm.top5_share))
            ests.append(nm.estimate)
        x, y = np.log(np.asarray(t_list, dtype=float)), np.log(ests)
        A = np.vstack([x, np.ones_like(x)]).T
        coef, res, *_ = np.linalg.lstsq(A, y, rcond=None)
        slopes[k] = float(coef[0])
        dof = max(len(x) - 2, 1)
        s2 = float(np.sum((y - A @ coef) ** 2)) / dof
        ses[k] = float(np.sqrt(s2 / np.sum((x - x.mean()) ** 2)))
    return VolterraTable(rows, slopes, ses)


def skorokhod_lower_functional(lp, t: float | None = None) -> np.ndarray:
    """``delta(V_t DU_t) = V_t U_t - <DV_t, DU_t>`` per path."""
    return lp.skorokhod()


def limit_derivative(p: Problem, sk: SkeletonPath, t: float = 1.0, functional: str = "X") -> np.ndarray:
    """Deterministic interval derivative ``D_r U`` of the Euler limit at ``t``.

    For ``functional="Y"`` this is the derivative of ``sum_k W_k f'(x_k) U_k``.
    """
    from .paths import euler_skeleton

    N, h = sk.index(t), sk.h
    x = euler_skeleton(p, sk.n, p.horizon)
    tt = sk.times
    lam = 1.0 + p.b1(tt[:N], x[:N]) * h
    L = np.concatenate([[1.0], np.cumprod(lam)])  # L_k = prod_{j<k} lam_j
    sig = p.sigma(tt[:N], x[:N])
    if functional == "X":
        return sig * L[N] / L[1:]
    W = simpson_weights(N, h)
    c = W * p.f1(tt[: N + 1], x[: N + 1]) * L
    tail = np.cumsum(c[::-1])[::-1]  # tail[k] = sum_{j>=k}
    return sig / L[1:] * tail[1:]


def scheme_limit_variance(p: Problem, sk: SkeletonPath, t: float = 1.0, functional: str = "X") -> float:
    """Exact variance of the Euler limit ``U`` (or its additive functional).

    This is the ``eps -> 0`` limit of ``Var F`` at a fixed mesh; it differs
    from the continuous-time variance by ``O(h)``.
    """
    d = limit_derivative(p, sk, t, functional)
    return float(sk.h * np.sum(d * d))
