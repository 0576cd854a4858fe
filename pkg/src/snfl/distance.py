"""Distances to a target normal law estimated from samples."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import ndtr

N_KNOTS = 128
COVERAGE = 0.99
BATCHES = 32
_BLOCK = 16384
_SQRT2PI = math.sqrt(2.0 * math.pi)


@dataclass
class ScoreModel:
    """Score ``rho(x)`` tabulated on knots, linear in between, NaN outside."""

    method: str
    knots: np.ndarray
    values: np.ndarray
    bandwidth: float
    n_eff: int
    meta: dict = field(default_factory=dict)

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.interp(x, self.knots, self.values)
        out[(x < self.knots[0]) | (x > self.knots[-1])] = np.nan
        return out


def silverman(x: np.ndarray) -> float:
    """Silverman's rule-of-thumb Gaussian bandwidth."""
    x = np.asarray(x, dtype=float)
    sd = x.std(ddof=1)
    q75, q25 = np.percentile(x, [75, 25])
    scale = min(sd, (q75 - q25) / 1.34) if q75 > q25 else sd
    return 1.06 * scale * x.size ** (-0.2)


def quantile_knots(x: np.ndarray, n_knots: int = N_KNOTS, coverage: float = COVERAGE) -> np.ndarray:
    lo = 0.5 * (1.0 - coverage)
    return np.quantile(x, np.linspace(lo, 1.0 - lo, n_knots))


def _kernel_sums(x, knots, bw, weights_list):
    """Per-knot sums of Gaussian kernel weights times each array in ``weights_list``."""
    out = [np.zeros(knots.size) for _ in weights_list]
    for a in range(0, x.size, _BLOCK):
        z = (knots[:, None] - x[None, a:a + _BLOCK]) / bw
        k = np.exp(-0.5 * z * z)
        for o, w in zip(out, weights_list):
            o += k @ w[a:a + _BLOCK]
    return out


def nadaraya_watson(x, y, knots, bandwidth) -> np.ndarray:
    """Gaussian-kernel Nadaraya-Watson estimate of ``E[y | x]`` at ``knots``."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    den, num = _kernel_sums(x, np.asarray(knots, float), bandwidth, [np.ones_like(x), y])
    return num / np.maximum(den, 1e-300)


def _check_samples(x, minimum=1000):
    x = np.asarray(x, dtype=float)
    if x.size < minimum:
        raise ValueError(f"need at least {minimum} samples, got {x.size}")
    if not np.all(np.isfinite(x)) or x.std() == 0.0:
        raise ValueError("degenerate sample (zero variance or non-finite)")
    return x


def score_from_responses(F, R, n_knots: int = N_KNOTS, bw_factor: float = 1.0, minimum: int = 1000) -> ScoreModel:
    """``rho = -E[R | F]`` with a global least-squares line plus a
    Nadaraya-Watson fit of the residual.

    Removing the linear part first leaves the kernel smoother only the
    nonlinear remainder, so an exactly linear conditional mean is returned
    without smoothing bias.
    """
    F = _check_samples(F, minimum)
    R = np.asarray(R, dtype=float)
    Fc = F - F.mean()
    slope = float(Fc @ (R - R.mean()) / (Fc @ Fc))
    icpt = float(R.mean())
    resid = R - icpt - slope * Fc
    knots = quantile_knots(F, n_knots)
    bw = bw_factor * silverman(F)
    m = icpt + slope * (knots - F.mean())
    if np.any(resid != 0.0):
        m = m + nadaraya_watson(F, resid, knots, bw)
    return ScoreModel("regression", knots, -m, bw, F.size, {"slope": slope, "intercept": icpt})


def responses(ms, rows=None) -> np.ndarray:
    """``R = (F - mean F) / Theta + <D Theta, u> / Theta^2`` (on ``rows``)."""
    rows = slice(None) if rows is None else rows
    th = np.asarray(ms.theta, dtype=float)[rows]
    bad = np.flatnonzero(~(th > 0))
    if bad.size:
        raise ValueError(f"Theta must be positive (path {int(bad[0])})")
    F = np.asarray(ms.F, dtype=float)[rows]
    return (F - F.mean()) / th + np.asarray(ms.dtheta_u, dtype=float)[rows] / th ** 2


def score_by_regression(ms, n_knots: int = N_KNOTS, bw_factor: float = 1.0) -> ScoreModel:
    """Score of ``F`` from the Malliavin representation."""
    return score_from_responses(ms.F, responses(ms), n_knots, bw_factor)


def score_by_kde(samples, bw_factor: float = 1.0, n_knots: int = N_KNOTS) -> ScoreModel:
    """``p'/p`` of a Gaussian kernel density on central-quantile knots."""
    x = _check_samples(samples)
    bw = bw_factor * silverman(x)
    knots = quantile_knots(x, n_knots)
    s0, s1 = _kernel_sums(x, knots, bw, [np.ones_like(x), x])
    norm = x.size * bw * _SQRT2PI
    p = s0 / norm
    # p'(k) = sum (x_i - k) K / (n bw^3 sqrt(2 pi))
    dp = (s1 - knots * s0) / (norm * bw * bw)
    keep = p >= 1e-12
    return ScoreModel("kde", knots[keep], dp[keep] / p[keep], bw, x.size, {"dropped": int((~keep).sum())})


@dataclass
class FisherEstimate:
    estimate: float
    stderr: float
    excluded: float
    warn: bool


def _fisher_terms(sm, x, mu, sigma2):
    v = sm(x) + (x - mu) / sigma2
    return v[np.isfinite(v)] ** 2


def fisher_distance(sm: ScoreModel, samples, mu: float, sigma2: float, batches: int = BATCHES,
                    refit=None) -> FisherEstimate:
    """Monte Carlo ``E[(rho(F) + (F - mu) / sigma2)^2]`` over in-range samples.

    The standard error comes from ``batches`` contiguous batches. If
    ``refit(rows)`` is given it must return a score model fitted on those
    rows only; the batch statistic then includes the score estimation noise.
    """
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive")
    x = np.asarray(samples, dtype=float)
    terms = _fisher_terms(sm, x, mu, sigma2)
    excluded = 1.0 - terms.size / x.size
    est = float(terms.mean()) if terms.size else float("nan")
    parts = np.array_split(np.arange(x.size), batches)
    vals = []
    for rows in parts:
        model = refit(rows) if refit is not None else sm
        t = _fisher_terms(model, x[rows], mu, sigma2)
        if t.size:
            vals.append(t.mean())
    vals = np.asarray(vals)
    se = float(vals.std(ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else float("nan")
    return FisherEstimate(est, se, excluded, excluded > 0.05)


def kolmogorov_distance(samples, mu: float, sigma2: float):
    """``sup |F_n - Phi|`` and the DKW 95% band half-width."""
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive")
    x = np.sort(np.asarray(samples, dtype=float))
    n = x.size
    cdf = ndtr((x - mu) / math.sqrt(sigma2))
    i = np.arange(1, n + 1)
    d = max(float(np.max(i / n - cdf)), float(np.max(cdf - (i - 1) / n)))
    return d, math.sqrt(math.log(2.0 / 0.05) / (2.0 * n))


def gaussian_fisher_closed(mu1: float, s1: float, mu2: float, s2: float) -> float:
    """Fisher distance of ``N(mu1, s1)`` to ``N(mu2, s2)`` (variances)."""
    if s1 <= 0 or s2 <= 0:
        raise ValueError("variances must be positive")
    return (mu1 - mu2) ** 2 / s2 ** 2 + s1 * (1.0 / s2 - 1.0 / s1) ** 2


@dataclass
class DistanceReport:
    eps: float
    t: float
    n: int
    fisher_hat: float
    fisher_se: float
    kolmogorov_hat: float
    kolmogorov_band: float
    kolmogorov_se: float
    mu: float
    sigma2: float
    method: str
    excluded_mass: float
    warn: bool
    mean_F: float = float("nan")
    var_F: float = float("nan")

    def to_dict(self) -> dict:
        return {k: (float(v) if isinstance(v, (np.floating, float)) else v) for k, v in asdict(self).items()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def distance_report(ms, mu: float, sigma2: float, method: str = "regression",
                    batches: int = BATCHES, bw_factor: float = 1.0) -> DistanceReport:
    """Fisher and Kolmogorov distances of ``ms.F`` to ``N(mu, sigma2)``.

    The Fisher standard error refits the score on each of ``batches`` path
    batches, so it includes the score estimation noise. The Kolmogorov
    standard error is the DKW half-width divided by 1.96: the batch spread
    of a supremum statistic misses its positive noise floor.
    """
    F = np.asarray(ms.F, dtype=float)
    if method == "regression":
        R = responses(ms)
        sm = score_from_responses(F, R, bw_factor=bw_factor)
        refit = lambda rows: score_from_responses(F[rows], responses(ms, rows), bw_factor=bw_factor, minimum=2)
    elif method == "kde":
        sm = score_by_kde(F, bw_factor)
        refit = lambda rows: score_by_kde(F[rows], bw_factor) if rows.size >= 1000 else _kde_small(F[rows], bw_factor)
    else:
        raise ValueError(f"unknown method {method!r}")
    fe = fisher_distance(sm, F, mu, sigma2, batches, refit)
    kol, band = kolmogorov_distance(F, mu, sigma2)
    return DistanceReport(
        eps=float(getattr(ms, "eps", float("nan"))), t=float(getattr(ms, "t", float("nan"))), n=int(F.size),
        fisher_hat=fe.estimate, fisher_se=fe.stderr, kolmogorov_hat=kol, kolmogorov_band=band,
        kolmogorov_se=band / 1.96, mu=float(mu), sigma2=float(sigma2),
        method=method, excluded_mass=fe.excluded, warn=fe.warn, mean_F=float(F.mean()), var_F=float(F.var(ddof=1)),
    )


def _kde_small(x, bw_factor):
    bw = bw_factor * silverman(x)
    knots = quantile_knots(x)
    s0, s1 = _kernel_sums(x, knots, bw, [np.ones_like(x), x])
    keep = s0 > 0
    return ScoreModel("kde", knots[keep], ((s1 - knots * s0) / (bw * bw))[keep] / s0[keep], bw, x.size)


@dataclass
class PinskerVerdict:
    passed: bool
    slack: float
    allowance: float


def pinsker_check(report) -> PinskerVerdict:
    """Check ``d_Kol <= sqrt(I) + allowance``.

    ``report`` is a :class:`DistanceReport` or a ``(fisher_hat,
    kolmogorov_hat)`` pair. The allowance combines the DKW band and a 95%
    margin on ``sqrt(I)``; ``slack = sqrt(I) - d_Kol``.
    """
    if isinstance(report, DistanceReport):
        fh, kol = report.fisher_hat, report.kolmogorov_hat
        se = report.fisher_se if np.isfinite(report.fisher_se) else 0.0
        root_se = se / (2.0 * math.sqrt(fh)) if fh > se else math.sqrt(max(se, 0.0))
        allowance = report.kolmogorov_band + 1.96 * root_se
    else:
        fh, kol = report
        allowance = 0.0
    root = math.sqrt(max(fh, 0.0))
    return PinskerVerdict(kol <= root + allowance, root - kol, allowance)


def render_value(estimate: float, stderr: float) -> str:
    """``"est ± se"``, or ``"≤ stderr"`` when the estimate is below its error."""
    if np.isfinite(stderr) and estimate <= stderr:
        return f"≤ {stderr:.3g}"
    return f"{estimate:.4g} ± {stderr:.2g}"
