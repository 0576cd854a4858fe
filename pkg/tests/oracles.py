"""Independent reference implementations used by the tests.

Each oracle is written the slow, obvious way so that it shares no code path
with the package implementation it checks.
"""

import math

import numpy as np
from scipy import integrate

from snfl.deterministic import solve_skeleton
from snfl.functionals import x_fields, y_fields
from snfl.paths import NoiseStream, simulate_sde

M32 = 0xFFFFFFFF


def philox_scalar(ctr, key, rounds=10):
    """Philox4x32 on python integers, one block."""
    c = list(ctr)
    k = list(key)
    for i in range(rounds):
        if i:
            k = [(k[0] + 0x9E3779B9) & M32, (k[1] + 0xBB67AE85) & M32]
        p0 = 0xD2511F53 * c[0]
        p1 = 0xCD9E8D57 * c[2]
        c = [
            ((p1 >> 32) ^ c[1] ^ k[0]) & M32,
            p1 & M32,
            ((p0 >> 32) ^ c[3] ^ k[1]) & M32,
            p0 & M32,
        ]
    return c


def euler_loop(b, sigma, x0, eps, dB, h):
    """Euler-Maruyama of one path with an explicit python loop."""
    x = [x0]
    for i, d in enumerate(dB):
        t = i * h
        x.append(x[-1] + float(b(t, x[-1])) * h + eps * float(sigma(t, x[-1])) * d)
    return np.array(x)


def _fields_for(p, dB, eps, sk, which):
    ns = NoiseStream(0, np.arange(dB.shape[0], dtype=np.uint64), sk.n, p.horizon, dB)
    ps = simulate_sde(p, eps, ns, sk)
    return (x_fields if which == "X" else y_fields)(ps)


def fd_first(p, dB, eps, n, which="X", eta=1e-6):
    """``dF / d(dB_r)`` for one path by central differences."""
    sk = solve_skeleton(p, n)
    up = np.repeat(dB[None, :], n, axis=0)
    dn = up.copy()
    up[np.arange(n), np.arange(n)] += eta
    dn[np.arange(n), np.arange(n)] -= eta
    return (_fields_for(p, up, eps, sk, which).F - _fields_for(p, dn, eps, sk, which).F) / (2 * eta)


def fd_second(p, dB, eps, n, which="X", eta=1e-6):
    """``d^2 F / d(dB_theta) d(dB_r)``: differences of the analytic first
    derivative, rows ``theta``."""
    sk = solve_skeleton(p, n)
    up = np.repeat(dB[None, :], n, axis=0)
    dn = up.copy()
    up[np.arange(n), np.arange(n)] += eta
    dn[np.arange(n), np.arange(n)] -= eta
    fu, fd = _fields_for(p, up, eps, sk, which), _fields_for(p, dn, eps, sk, which)
    return (fu.sig * fu.phi - fd.sig * fd.phi) / (2 * eta)


def dtheta_bruteforce(fl, d2, ghat, kbar, row=0):
    """``D_theta Theta`` from explicit matrices: ``sum_r h (D2[theta, r] u_r +
    D_r F D_theta u_r)`` with ``D_theta u_r = eps sigma_theta G_r / G_{theta+1}
    kbar_r`` for ``theta < r`` and zero otherwise."""
    h, eps = fl.h, fl.eps
    N = fl.sig.shape[1]
    sig, G = fl.sig[row], fl.G[row]
    u = sig * ghat[row]
    DF = sig * fl.phi[row]
    Du = np.zeros((N, N))
    for th in range(N):
        for r in range(th + 1, N):
            Du[th, r] = eps * sig[th] * G[r] / G[th + 1] * kbar[row, r]
    return np.array([h * np.sum(d2[th] * u + DF * Du[th]) for th in range(N)])


def gaussian_fisher_mc(mu1, s1, mu2, s2, n, seed=0):
    """Exact-score Monte Carlo Fisher distance and its standard error."""
    rng = np.random.default_rng(seed)
    x = rng.normal(mu1, math.sqrt(s1), n)
    v = (-(x - mu1) / s1 + (x - mu2) / s2) ** 2
    return v.mean(), v.std(ddof=1) / math.sqrt(n)


def mixture_fisher(mu2=0.0, s2=5.0, sep=2.0):
    """Fisher distance of ``0.5 N(-sep, 1) + 0.5 N(sep, 1)`` to ``N(mu2, s2)``
    by adaptive quadrature of the closed-form score."""
    def pdf(x):
        return 0.5 * (np.exp(-0.5 * (x + sep) ** 2) + np.exp(-0.5 * (x - sep) ** 2)) / math.sqrt(2 * math.pi)

    def score(x):
        return -x + sep * np.tanh(sep * x)

    val, _ = integrate.quad(lambda x: (score(x) + (x - mu2) / s2) ** 2 * pdf(x), -np.inf, np.inf)
    return val


def gamma_p1_linear():
    """``gamma_1^2`` for ``b = -x, sigma = 1, f = x``: integral of ``(1 - e^{-(1-r)})^2``."""
    return 1.0 - 2.0 * (1.0 - math.exp(-1.0)) + (1.0 - math.exp(-2.0)) / 2.0


def kolmogorov_bruteforce(x, cdf):
    """``sup |F_n - F|`` by checking both sides of every jump."""
    x = np.sort(x)
    n = x.size
    best = 0.0
    for i, v in enumerate(x):
        c = cdf(v)
        best = max(best, abs((i + 1) / n - c), abs(i / n - c))
    return best


def ols_slope(x, y):
    x, y = np.asarray(x, float), np.asarray(y, float)
    xm, ym = x.mean(), y.mean()
    return float(np.sum((x - xm) * (y - ym)) / np.sum((x - xm) ** 2))
