"""Epsilon sweeps, rate fits, bound components and persisted runs."""

from __future__ import annotations

import csv
import datetime as _dt
import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from .deterministic import beta_variance, gamma_variance, solve_skeleton
from .distance import BATCHES, DistanceReport, distance_report, nadaraya_watson, pinsker_check, quantile_knots, silverman
from .functionals import malliavin_sample, scheme_limit_variance
from .problem import Problem, builtin, load_problem, validate

DEFAULT_EPS = (0.4, 0.283, 0.2, 0.141, 0.1, 0.0707, 0.05)
ENVELOPE = 50.0


class InsufficientSignal(ValueError):
    pass


@dataclass
class SweepPlan:
    """Everything needed to reproduce one sweep."""

    problem: str
    t: float = 1.0
    eps: tuple = DEFAULT_EPS
    paths: int = 100_000
    mesh: int = 128
    seed: int = 0
    functional: str = "X"
    observable: tuple | None = None
    problem_doc: dict | None = None
    method: str = "regression"
    bw_factor: float = 1.0
    p0: float = 2.0
    target: str = "scheme"

    def __post_init__(self):
        self.eps = tuple(float(e) for e in self.eps)
        if not self.eps:
            raise ValueError("empty eps list")
        if any(not 0.0 < e < 1.0 for e in self.eps):
            raise ValueError("eps values must lie in (0, 1)")
        if any(a <= b for a, b in zip(self.eps, self.eps[1:])):
            raise ValueError("eps values must be strictly decreasing")
        if self.paths < 1000:
            raise ValueError("paths must be >= 1000")
        if self.functional not in ("X", "Y"):
            raise ValueError("functional must be 'X' or 'Y'")
        if self.target not in ("scheme", "continuous"):
            raise ValueError("target must be 'scheme' or 'continuous'")
        if self.observable is not None:
            self.observable = tuple(self.observable)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["eps"] = list(self.eps)
        d["observable"] = list(self.observable) if self.observable else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SweepPlan":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown plan keys: {sorted(extra)}")
        return cls(**d)

    def resolve(self) -> Problem:
        p = load_problem(self.problem_doc) if self.problem_doc else builtin(self.problem)
        if self.observable:
            p = p.with_observable(*self.observable)
        return p


# -- rate fits ---------------------------------------------------------------

@dataclass
class RateFit:
    name: str
    eps: np.ndarray
    values: np.ndarray
    stderrs: np.ndarray
    used: np.ndarray
    slope: float = float("nan")
    intercept: float = float("nan")
    r2: float = float("nan")
    slope_se: float = float("nan")
    status: str = "ok"

    @property
    def excluded(self) -> list:
        return [float(e) for e, u in zip(self.eps, self.used) if not u]


def rate_fit(eps, values, stderrs=None, name: str = "value") -> RateFit:
    """Least squares of ``log value`` on ``log eps``.

    Points with ``value < 3 * stderr`` are excluded as noise floor. Raises
    :class:`InsufficientSignal` if fewer than three points remain.
    """
    eps = np.asarray(eps, dtype=float)
    v = np.asarray(values, dtype=float)
    se = np.zeros_like(v) if stderrs is None else np.asarray(stderrs, dtype=float)
    used = np.isfinite(v) & (v > 0) & ~(v < 3.0 * se)
    if used.sum() < 3:
        raise InsufficientSignal(f"insufficient signal for {name}: {int(used.sum())} usable points")
    x, y = np.log(eps[used]), np.log(v[used])
    A = np.vstack([x, np.ones_like(x)]).T
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    res = y - A @ coef
    sst = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(res @ res) / sst if sst > 0 else 1.0
    dof = x.size - 2
    s2 = float(res @ res) / dof if dof > 0 else 0.0
    sxx = float(np.sum((x - x.mean()) ** 2))
    return RateFit(name, eps, v, se, used, float(coef[0]), float(coef[1]), r2, math.sqrt(s2 / sxx))


def _safe_fit(eps, values, stderrs, name) -> RateFit:
    try:
        return rate_fit(eps, values, stderrs, name)
    except InsufficientSignal:
        v = np.asarray(values, float)
        se = np.asarray(stderrs, float)
        return RateFit(name, np.asarray(eps, float), v, se, ~(v < 3 * se), status="insufficient signal")


# -- bound components ---------------------------------------------------------

def _batch_se(stat, n, batches=BATCHES):
    vals = np.array([stat(rows) for rows in np.array_split(np.arange(n), batches)])
    return float(vals.std(ddof=1) / math.sqrt(batches))


def _square(m, se):
    """``m^2`` and a first-order standard error."""
    return m * m, 2.0 * abs(m) * se + se * se


@dataclass
class BoundComponents:
    eps: float
    t: float
    mean: float
    mean_se: float
    mean_sq: float
    mean_sq_se: float
    var_gap: float
    var_gap_se: float
    var_gap_sq: float
    var_gap_sq_se: float
    dtheta4_root: float
    dtheta4_root_se: float
    neg_theta8: float
    neg_theta16: float
    u_norm8: float
    A_F: float
    C_F: float
    term_mean: float
    term_var: float
    term_dtheta: float
    bound: float
    fisher_hat: float
    envelope_flag: bool
    limit_variance: float

    def to_dict(self) -> dict:
        return {k: (bool(v) if isinstance(v, (bool, np.bool_)) else float(v)) for k, v in asdict(self).items()}


def bound_components(ms, sigma2: float, limit_variance: float, fisher_hat: float = float("nan"),
                     resolution: float = 0.0, fisher_se: float = 0.0) -> BoundComponents:
    """Every ingredient of the three-term Fisher bound, with ``c = 1``.

    When ``ms.aux`` carries the limit ``U`` on the same noise, ``E F`` is
    estimated as ``E[F - U]`` and ``Var F - limit_variance`` as
    ``Var F - Var U`` (both exact identities since ``E U = 0`` and
    ``Var U = limit_variance``), which removes the leading Monte Carlo noise.
    With ``DF_DU`` in ``aux`` the covariance with ``U`` is computed by
    Gaussian integration by parts instead.
    ``resolution`` is the floating-point resolution of ``F`` itself; it is
    added to both standard errors so that rounding is never fitted as signal.
    """
    F = np.asarray(ms.F, dtype=float)
    n = F.size
    U = ms.aux.get("U")
    if U is None:
        D = F
        def gap(rows):
            return F[rows].var(ddof=1) - limit_variance
    elif "DF_DU" in ms.aux:
        # Var F - |DU|^2 = 2 Cov(U, F - U) + Var(F - U) and Cov(U, F) = E<DF, DU>;
        # <DV, DU> has mean E[UV] = 0 and cancels the O(eps) part of the noise
        D = F - U
        c = np.asarray(ms.aux["DF_DU"], dtype=float)
        if "DV_DU" in ms.aux:
            c = c - ms.eps * np.asarray(ms.aux["DV_DU"], dtype=float)
        def gap(rows):
            return 2.0 * (c[rows].mean() - limit_variance) + D[rows].var(ddof=1)
    else:
        D = F - U
        def gap(rows):
            return F[rows].var(ddof=1) - U[rows].var(ddof=1)
    m = float(D.mean())
    m_se = float(D.std(ddof=1) / math.sqrt(n)) + resolution
    g = float(gap(slice(None)))
    g_se = _batch_se(gap, n) + 2.0 * resolution * float(F.std())
    dt2 = np.asarray(ms.dtheta_norm2, dtype=float) ** 2
    m4 = float(dt2.mean())
    root = math.sqrt(m4)
    root_se = float(dt2.std(ddof=1) / math.sqrt(n)) / (2.0 * root) if root > 0 else 0.0
    th = np.asarray(ms.theta, dtype=float)
    nt8 = float(np.mean(th ** -8.0))
    nt16 = float(np.mean(th ** -16.0))
    u8 = float(np.mean(np.asarray(ms.u_norm2, dtype=float) ** 4))
    A = (u8 * nt8) ** 0.25 / sigma2 ** 2
    C = A + (u8 * nt16) ** 0.25
    msq, msq_se = _square(m, m_se)
    gsq, gsq_se = _square(g, g_se)
    t1, t2, t3 = msq / sigma2 ** 2, A * gsq, C * root
    bound = t1 + t2 + t3
    # flagged only when the excess is beyond two standard errors
    flag = bool(np.isfinite(fisher_hat) and fisher_hat - 2.0 * fisher_se > ENVELOPE * bound)
    return BoundComponents(
        float(ms.eps), float(ms.t), m, m_se, msq, msq_se, g, g_se, gsq, gsq_se, root, root_se,
        nt8, nt16, u8, A, C, t1, t2, t3, bound, float(fisher_hat), flag, float(limit_variance),
    )


# -- sweeps --------------------------------------------------------------------

@dataclass
class SweepResult:
    plan: SweepPlan
    target_variance: float
    reports: list
    components: list
    failures: dict
    fits: dict = field(default_factory=dict)
    samples: dict = field(default_factory=dict)


def target_variance(p: Problem, sk, t: float, functional: str, target: str = "continuous") -> float:
    """Limit variance: the continuous-time ``beta^2``/``gamma^2`` or the
    exact limit of the Euler scheme on the mesh (``target="scheme"``)."""
    if target == "scheme":
        return scheme_limit_variance(p, sk, t, functional)
    return beta_variance(p, sk, t) if functional == "X" else gamma_variance(p, sk, t)


def _fits(res: SweepResult) -> dict:
    reps, comps = res.reports, res.components
    eps = [r.eps for r in reps]
    fits = {
        "fisher": _safe_fit(eps, [r.fisher_hat for r in reps], [r.fisher_se for r in reps], "fisher"),
        "kolmogorov": _safe_fit(eps, [r.kolmogorov_hat for r in reps], [r.kolmogorov_se for r in reps], "kolmogorov"),
    }
    if comps:
        ce = [c.eps for c in comps]
        if res.plan.functional == "X":
            fits["mean_sq"] = _safe_fit(ce, [c.mean_sq for c in comps], [c.mean_sq_se for c in comps], "mean_sq")
            fits["var_gap_sq"] = _safe_fit(ce, [c.var_gap_sq for c in comps], [c.var_gap_sq_se for c in comps], "var_gap_sq")
            fits["dtheta4_root"] = _safe_fit(ce, [c.dtheta4_root for c in comps], [c.dtheta4_root_se for c in comps], "dtheta4_root")
        else:
            fits["abs_mean"] = _safe_fit(ce, [abs(c.mean) for c in comps], [c.mean_se for c in comps], "abs_mean")
            fits["abs_var_gap"] = _safe_fit(ce, [abs(c.var_gap) for c in comps], [c.var_gap_se for c in comps], "abs_var_gap")
    return fits


def sweep(plan: SweepPlan, keep_samples: bool = False, check: bool = True) -> SweepResult:
    """Run every epsilon of ``plan`` on common random numbers.

    Each point yields a :class:`DistanceReport` against ``N(0, target)`` and
    its :class:`BoundComponents`. A failing epsilon is recorded in
    ``failures`` and skipped.
    """
    p = plan.resolve()
    if check:
        rep = validate(p)
        bad = [c for c in rep.checks if not c.passed and (c.name != "A3" or plan.functional == "Y")]
        if bad:
            raise ValueError(f"problem fails validation: {', '.join(c.name for c in bad)}")
    if plan.functional == "Y" and not p.has_observable:
        raise ValueError("additive sweep needs an observable f")
    sk = solve_skeleton(p, plan.mesh)
    s2 = target_variance(p, sk, plan.t, plan.functional, plan.target)
    lv = scheme_limit_variance(p, sk, plan.t, plan.functional)
    res = SweepResult(plan, s2, [], [], {})
    scale = (1.0 + float(np.max(np.abs(sk.x)))) * plan.mesh * np.finfo(float).eps
    for e in plan.eps:
        try:
            ms = malliavin_sample(p, e, plan.t, plan.mesh, plan.paths, plan.seed, plan.functional, limit=True, sk=sk)
            r = distance_report(ms, 0.0, s2, plan.method, bw_factor=plan.bw_factor)
            c = bound_components(ms, s2, lv, r.fisher_hat, scale / e, r.fisher_se)
        except (ValueError, FloatingPointError, ArithmeticError) as exc:
            res.failures[repr(e)] = f"{type(exc).__name__}: {exc}"
            continue
        res.reports.append(r)
        res.components.append(c)
        if keep_samples:
            res.samples[e] = ms
    res.fits = _fits(res)
    return res


def additive_sweep(plan: SweepPlan, **kw) -> SweepResult:
    """Sweep of the rescaled additive functional against ``N(0, gamma_t^2)``."""
    if plan.functional != "Y":
        plan = SweepPlan.from_dict({**plan.to_dict(), "functional": "Y"})
    return sweep(plan, **kw)


# -- lower bound ---------------------------------------------------------------

@dataclass
class LowerBound:
    estimate: float
    stderr: float
    beta2: float
    comparison: list
    paths: int

    @property
    def consistent(self) -> bool:
        return all(row["ok"] for row in self.comparison)


def _lower_stat(U, d, beta2):
    if np.all(d == 0.0):
        return 0.0
    knots = quantile_knots(U)
    m = nadaraya_watson(U, d, knots, silverman(U))
    mu = np.interp(U, knots, m)
    inside = (U >= knots[0]) & (U <= knots[-1])
    return float(np.mean(np.abs(mu[inside]))) ** 2 / (4.0 * beta2 ** 2)


def lower_bound_experiment(p: Problem, t: float = 1.0, paths: int = 100_000, mesh: int = 128, seed: int = 0,
                           reports=None) -> LowerBound:
    """``(E|E[delta(V DU) | U]|)^2 / (4 beta^4)`` from limit-pair paths.

    ``E[delta | U]`` is a Nadaraya-Watson regression on ``U_t``; the
    standard error refits on 32 batches. ``reports`` (a sweep's
    :class:`DistanceReport` list) are compared as ``fisher_hat / eps^2``.
    """
    from .paths import noise, simulate_limit_pair

    sk = solve_skeleton(p, mesh)
    b2 = beta_variance(p, sk, t)
    U, d = [], []
    for a in range(0, paths, 8192):
        ids = np.arange(a, min(a + 8192, paths), dtype=np.uint64)
        lp = simulate_limit_pair(p, noise(seed, ids, mesh, p.horizon), sk, t)
        U.append(lp.U[:, lp.t_index])
        d.append(lp.skorokhod())
    U, d = np.concatenate(U), np.concatenate(d)
    est = _lower_stat(U, d, b2)
    se = _batch_se(lambda rows: _lower_stat(U[rows], d[rows], b2), U.size)
    comp = []
    for r in reports or []:
        ratio = r.fisher_hat / r.eps ** 2
        rse = r.fisher_se / r.eps ** 2
        slack = ratio - (est - 2.0 * math.hypot(rse, se))
        comp.append({"eps": r.eps, "ratio": ratio, "ratio_se": rse, "ok": bool(slack >= 0.0)})
    return LowerBound(est, se, b2, comp, paths)


# -- persistence -----------------------------------------------------------------

REPORT_COLS = ("eps", "t", "n", "fisher_hat", "fisher_se", "kolmogorov_hat", "kolmogorov_band", "kolmogorov_se",
               "mu", "sigma2", "method", "excluded_mass", "warn", "mean_F", "var_F", "pinsker_pass", "pinsker_slack")
FIT_COLS = ("name", "status", "slope", "slope_se", "intercept", "r2", "n_used", "excluded")


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_csv(path, schema, cols, rows):
    with open(path, "w", newline="") as fh:
        fh.write(f"#schema={schema}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in cols])


def report_rows(reports):
    out = []
    for r in reports:
        d = r.to_dict()
        v = pinsker_check(r)
        d["pinsker_pass"], d["pinsker_slack"] = v.passed, v.slack
        out.append(d)
    return out


def fit_rows(fits):
    return [{"name": f.name, "status": f.status, "slope": f.slope, "slope_se": f.slope_se,
             "intercept": f.intercept, "r2": f.r2, "n_used": int(np.sum(f.used)),
             "excluded": ";".join(repr(e) for e in f.excluded)} for f in fits.values()]


def new_run_dir(root, label: str) -> str:
    stamp = _dt.datetime.now(_dt.timezone.utc).strftime("%Y%m%dT%H%M%S")
    base = os.path.join(root, f"{stamp}-{label}")
    path, k = base, 1
    while os.path.exists(path):
        path, k = f"{base}-{k}", k + 1
    os.makedirs(path)
    return path


def write_meta(run_dir, plan_dict: dict, extra: dict | None = None) -> None:
    meta = {"version": __version__, "seed": plan_dict.get("seed"), "mesh": plan_dict.get("mesh"),
            "plan": plan_dict, **(extra or {})}
    with open(os.path.join(run_dir, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def persist(res: SweepResult, root: str = "runs", run_dir: str | None = None, extra: dict | None = None) -> str:
    """Write plan.json, reports.csv, ratefits.csv, bound_components.csv, meta.json."""
    run_dir = run_dir or new_run_dir(root, res.plan.problem)
    os.makedirs(run_dir, exist_ok=True)
    with open(os.path.join(run_dir, "plan.json"), "w") as fh:
        json.dump(res.plan.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_csv(os.path.join(run_dir, "reports.csv"), "reports/1", REPORT_COLS, report_rows(res.reports))
    _write_csv(os.path.join(run_dir, "ratefits.csv"), "ratefits/1", FIT_COLS, fit_rows(res.fits))
    comps = [c.to_dict() for c in res.components]
    cols = tuple(BoundComponents.__dataclass_fields__)
    _write_csv(os.path.join(run_dir, "bound_components.csv"), "bound_components/1", cols, comps)
    write_meta(run_dir, res.plan.to_dict(), {"target_variance": res.target_variance, "failures": res.failures,
                                             "bound_constant": "c=1 (shape only)", **(extra or {})})
    return run_dir


def read_csv(path):
    """Rows of a ``#schema=`` CSV as dicts of strings, plus the schema tag."""
    with open(path, newline="") as fh:
        head = fh.readline().strip()
        if not head.startswith("#schema="):
            raise ValueError(f"{path}: missing schema header")
        return head[len("#schema="):], list(csv.DictReader(fh))
