"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from .distance import render_value
from .experiments import (
    DEFAULT_EPS, SweepPlan, additive_sweep, lower_bound_experiment, new_run_dir, persist, read_csv, sweep,
    write_meta, _write_csv,
)
from .functionals import volterra_negative_moment_check
from .problem import BUILTIN_NAMES, builtin, validate

VERBS = ("validate", "sweep", "bound", "lower", "additive", "volterra", "report", "plot")
PLAN_FLAGS = ("t", "eps", "paths", "mesh", "seed", "p0")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="snfl", description="Small-noise diffusion experiments.")
    sub = ap.add_subparsers(dest="verb", required=True, parser_class=_Parser)
    for verb in ("validate", "sweep", "bound", "lower", "additive", "volterra"):
        sp = sub.add_parser(verb)
        sp.add_argument("--problem")
        sp.add_argument("--config", help="JSON plan file; flags override its values")
        sp.add_argument("--t", type=str, help="evaluation time (comma list for volterra)")
        sp.add_argument("--eps", type=str, help="comma-separated epsilon list")
        sp.add_argument("--paths", type=int)
        sp.add_argument("--mesh", type=int)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--p0", type=float)
        sp.add_argument("--f", help="observable as 'f;f1;f2' expressions")
        sp.add_argument("--out", default="runs")
    for verb in ("report", "plot"):
        sp = sub.add_parser(verb)
        sp.add_argument("run_dir")
        if verb == "plot":
            sp.add_argument("--what", default="fisher")
            sp.add_argument("--out")
    return ap


def _float_list(s):
    return [float(v) for v in s.split(",") if v.strip()]


def resolve_plan(args, functional: str = "X") -> dict:
    """Plan dictionary from ``--config`` with command-line overrides."""
    plan = {}
    if args.config:
        with open(args.config) as fh:
            plan = json.load(fh)
    if args.problem:
        plan["problem"] = args.problem
    if "problem" not in plan:
        raise UsageError("--problem is required")
    if "problem_doc" not in plan or plan.get("problem_doc") is None:
        try:
            builtin(plan["problem"])
        except KeyError:
            raise UsageError(f"unknown problem {plan['problem']!r}; builtins: {', '.join(BUILTIN_NAMES)}")
    if args.t is not None:
        plan["t"] = float(args.t) if "," not in args.t else _float_list(args.t)
    if args.eps is not None:
        plan["eps"] = _float_list(args.eps)
    for k in ("paths", "mesh", "seed", "p0"):
        v = getattr(args, k)
        if v is not None:
            plan[k] = v
    if args.f:
        parts = args.f.split(";")
        if len(parts) != 3:
            raise UsageError("--f needs three expressions 'f;f1;f2'")
        plan["observable"] = parts
    plan.setdefault("functional", functional)
    return plan


def _sweep_plan(d: dict) -> SweepPlan:
    try:
        return SweepPlan.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc))


# -- rendering -----------------------------------------------------------------

def _table(header, rows):
    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
    fmt = lambda r: "  ".join(str(c).rjust(w) for c, w in zip(r, widths))
    return "\n".join([fmt(header), fmt(["-" * w for w in widths])] + [fmt(r) for r in rows])


def _fit_line(f):
    if f["status"] != "ok":
        return f"{f['name']} slope: {f['status']}"
    ex = f" (excluded eps: {f['excluded'].replace(';', ', ')})" if f["excluded"] else ""
    return (f"{f['name']} slope: {float(f['slope']):.4f} ± {float(f['slope_se']):.4f}"
            f"  R2={float(f['r2']):.4f}  n={f['n_used']}{ex}")


def render_report(run_dir: str) -> str:
    """Aligned text table of a persisted run with rate-fit footers."""
    _, reports = read_csv(os.path.join(run_dir, "reports.csv"))
    _, fits = read_csv(os.path.join(run_dir, "ratefits.csv"))
    rows = []
    for r in reports:
        fh, fse = float(r["fisher_hat"]), float(r["fisher_se"])
        rows.append([
            f"{float(r['eps']):.4g}",
            render_value(fh, fse),
            f"{float(r['kolmogorov_hat']):.4f} ± {float(r['kolmogorov_band']):.4f}",
            "pass" if r["pinsker_pass"] == "true" else "FAIL",
        ])
    out = [_table(["eps", "fisher", "kolmogorov", "pinsker"], rows), ""]
    out += [_fit_line(f) for f in fits]
    return "\n".join(out) + "\n"


def render_svg(run_dir: str, what: str = "fisher") -> str:
    """Log-log scatter of ``what`` against eps with the persisted fit line."""
    _, fits = read_csv(os.path.join(run_dir, "ratefits.csv"))
    fit = next((f for f in fits if f["name"] == what), None)
    if fit is None:
        raise KeyError(f"no rate fit named {what!r} in {run_dir}")
    if what in ("fisher", "kolmogorov"):
        _, rows = read_csv(os.path.join(run_dir, "reports.csv"))
        col = f"{what}_hat"
    else:
        _, rows = read_csv(os.path.join(run_dir, "bound_components.csv"))
        col = {"abs_mean": "mean", "abs_var_gap": "var_gap"}.get(what, what)
    eps = np.array([float(r["eps"]) for r in rows])
    val = np.abs(np.array([float(r[col]) for r in rows]))
    ok = val > 0
    lx, ly = np.log10(eps[ok]), np.log10(val[ok])
    slope, icpt = float(fit["slope"]), float(fit["intercept"])
    have_fit = fit["status"] == "ok"
    W, H, M = 480, 360, 50
    xlo, xhi = lx.min() - 0.1, lx.max() + 0.1
    yv = list(ly)
    if have_fit:
        yv += [slope * x + icpt / math.log(10.0) for x in (xlo, xhi)]
    ylo, yhi = min(yv) - 0.1, max(yv) + 0.1
    sx = lambda x: M + (x - xlo) / (xhi - xlo) * (W - 2 * M)
    sy = lambda y: H - M - (y - ylo) / (yhi - ylo) * (H - 2 * M)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" data-what="{what}" '
        f'data-slope="{slope!r}">',
        f'<rect x="{M}" y="{M}" width="{W - 2 * M}" height="{H - 2 * M}" fill="none" stroke="black"/>',
        f'<text x="{W / 2}" y="{H - 12}" text-anchor="middle" font-size="12">log10 eps</text>',
        f'<text x="14" y="{H / 2}" font-size="12" transform="rotate(-90 14 {H / 2})" '
        f'text-anchor="middle">log10 {what}</text>',
    ]
    for x, y in zip(lx, ly):
        parts.append(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="3.5" fill="steelblue"/>')
    if have_fit:
        y0, y1 = (slope * x + icpt / math.log(10.0) for x in (xlo, xhi))
        parts.append(f'<line x1="{sx(xlo):.2f}" y1="{sy(y0):.2f}" x2="{sx(xhi):.2f}" y2="{sy(y1):.2f}" '
                     f'stroke="firebrick"/>')
        parts.append(f'<text x="{M + 8}" y="{M + 18}" font-size="12">slope = {slope!r}</text>')
    else:
        parts.append(f'<text x="{M + 8}" y="{M + 18}" font-size="12">{fit["status"]}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# -- verbs ---------------------------------------------------------------------

def _cmd_validate(args):
    plan = resolve_plan(args)
    p = _sweep_plan({k: v for k, v in plan.items() if k in SweepPlan.__dataclass_fields__}).resolve()
    rep = validate(p)
    print(f"problem {rep.label}  grid {rep.grid}  lipschitz~{rep.lipschitz:.4g}")
    for c in rep.checks:
        w = f"  witness (t, x) = {c.witness}" if c.witness else ""
        print(f"  {c.name}: {'pass' if c.passed else 'FAIL'}  value={c.value:.4g}{w}  {c.note}".rstrip())
    return 0 if rep.passed else 2


def _run_sweep(args, functional="X", lower=False):
    plan = _sweep_plan(resolve_plan(args, functional))
    res = additive_sweep(plan) if functional == "Y" else sweep(plan)
    extra = {}
    lb = None
    if lower:
        lb = lower_bound_experiment(plan.resolve(), plan.t, plan.paths, plan.mesh, plan.seed, res.reports)
        extra["lower_bound"] = {"estimate": lb.estimate, "stderr": lb.stderr, "beta2": lb.beta2,
                                "consistent": lb.consistent}
    run_dir = persist(res, args.out, extra=extra)
    if lb is not None:
        _write_csv(os.path.join(run_dir, "lower.csv"), "lower/1", ("eps", "ratio", "ratio_se", "ok"), lb.comparison)
    print(run_dir)
    print(render_report(run_dir), end="")
    if lb is not None:
        print(f"lower bound: {lb.estimate:.4g} ± {lb.stderr:.2g}  "
              f"{'consistent' if lb.consistent else 'INCONSISTENT'} with every fisher/eps^2")
    if res.failures:
        print(f"failed eps: {', '.join(res.failures)}", file=sys.stderr)
    return 0 if res.reports else 2


def _cmd_bound(args):
    code = _run_sweep(args)
    return code


def _cmd_volterra(args):
    plan = resolve_plan(args)
    p = builtin(plan["problem"]) if not plan.get("problem_doc") else _sweep_plan(plan).resolve()
    tl = plan.get("t", [0.25, 0.5, 1.0])
    tl = tl if isinstance(tl, list) else [tl]
    eps = plan.get("eps", [0.2])
    eps = eps[0] if isinstance(eps, list) else float(eps)
    p0 = float(plan.get("p0", 2.0))
    tab = volterra_negative_moment_check(p, eps, p0, tl, plan.get("mesh", 128), plan.get("paths", 100_000),
                                         plan.get("seed", 0))
    run_dir = new_run_dir(args.out, f"{plan['problem']}-volterra")
    rows = [{"kernel": r.kernel, "t": r.t, "estimate": r.estimate, "stderr": r.stderr, "top5_share": r.top5_share}
            for r in tab.rows]
    _write_csv(os.path.join(run_dir, "volterra.csv"), "volterra/1", ("kernel", "t", "estimate", "stderr", "top5_share"), rows)
    resolved = {**plan, "t": tl, "eps": eps, "p0": p0}
    write_meta(run_dir, resolved, {"slopes": tab.slopes, "slope_se": tab.slope_se})
    print(run_dir)
    print(_table(["kernel", "t", "estimate", "stderr"],
                 [[r.kernel, f"{r.t:g}", f"{r.estimate:.6g}", f"{r.stderr:.2g}"] for r in tab.rows]))
    for k in tab.slopes:
        print(f"{k} slope: {tab.slopes[k]:.4f} ± {tab.slope_se[k]:.4f}")
    return 0


def _cmd_report(args):
    print(render_report(args.run_dir), end="")
    return 0


def _cmd_plot(args):
    svg = render_svg(args.run_dir, args.what)
    out = args.out or os.path.join(args.run_dir, f"{args.what}.svg")
    with open(out, "w") as fh:
        fh.write(svg)
    print(out)
    return 0


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
        handler = {
            "validate": _cmd_validate,
            "sweep": lambda a: _run_sweep(a),
            "bound": _cmd_bound,
            "lower": lambda a: _run_sweep(a, lower=True),
            "additive": lambda a: _run_sweep(a, functional="Y"),
            "volterra": _cmd_volterra,
            "report": _cmd_report,
            "plot": _cmd_plot,
        }[args.verb]
        return handler(args)
    except UsageError as exc:
        print(ap.format_usage().rstrip(), file=sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
