"""Command-line interface: fit, region export, simulation grid, oracle validation.

Exit codes: 0 success; 1 validation tolerance failure; 2 malformed input or
invalid flags; 3 too few studies to fit (n < 3); 4 corrected region undefined
(threshold factor 1 + h not positive).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import tempfile
import warnings
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from .estimators import i_squared
from .model import (
    ConfidenceRegion,
    DataError,
    Dataset,
    FitResult,
    RegionUndefinedError,
    Study,
    Sym2,
)
from .oracle import OracleConfig, mc_b_moments, rep_stream
from .regions import b_star, confidence_region, region_boundary
from .simlab import Scenario, gen_within_variances, grid_to_csv, run_grid
from .transforms import sroc_curve, summarize_counts, to_roc_space

__all__ = ["main", "read_table", "validation_preset"]

COUNT_HEADER = ["id", "tp", "fn", "fp", "tn"]
SUMMARY_HEADER = ["id", "y_sens", "y_spec", "var_sens", "var_spec"]

SROC_GRID = np.linspace(0.005, 0.995, 199)
BOUNDARY_POINTS = 256

# fixed stream for the frozen heterogeneous validation design, so every run
# and every machine sees the same within-study variances
DESIGN_SEED = 20240817

EXIT_TOLERANCE = 1
EXIT_BAD_INPUT = 2
EXIT_TOO_FEW = 3
EXIT_NO_REGION = 4


class _InputError(Exception):
    """Malformed table or flag combination; maps to exit code 2."""


def _parse_counts(row: list[str], line: int) -> Study:
    ident = row[0]
    try:
        tp, fn, fp, tn = (int(v) for v in row[1:])
    except ValueError:
        raise _InputError(f"row {line} (id {ident!r}): counts must be integers, got {row[1:]}")
    try:
        return summarize_counts(tp, fn, fp, tn, id=ident)
    except (DataError, ValueError) as exc:
        raise _InputError(f"row {line} (id {ident!r}): {exc}")


def _parse_summary(row: list[str], line: int) -> Study:
    ident = row[0]
    try:
        y_sens, y_spec, var_sens, var_spec = (float(v) for v in row[1:])
    except ValueError:
        raise _InputError(f"row {line} (id {ident!r}): summaries must be numeric, got {row[1:]}")
    try:
        return Study(y_a=y_sens, y_b=y_spec, s_a=var_sens, s_b=var_spec, id=ident)
    except DataError as exc:
        raise _InputError(f"row {line} (id {ident!r}): {exc}")


def read_table(path: str) -> Dataset:
    """Parse a study table in count or summary form, auto-detected from the header."""
    try:
        fh = open(path, newline="", encoding="utf-8-sig")
    except OSError as exc:
        raise _InputError(f"cannot read {path}: {exc}")
    with fh:
        rows = [r for r in csv.reader(fh)]
    rows = [r for r in rows if any(cell.strip() for cell in r)]
    if not rows:
        raise _InputError(f"{path}: empty file")
    header = [cell.strip() for cell in rows[0]]
    if header == COUNT_HEADER:
        parse = _parse_counts
    elif header == SUMMARY_HEADER:
        parse = _parse_summary
    else:
        raise _InputError(
            f"{path}: unrecognized header {','.join(header)!r}; expected "
            f"{','.join(COUNT_HEADER)!r} or {','.join(SUMMARY_HEADER)!r}"
        )
    studies = []
    for i, row in enumerate(rows[1:], start=2):
        row = [cell.strip() for cell in row]
        if len(row) != 5:
            raise _InputError(f"row {i}: expected 5 fields, got {len(row)}")
        studies.append(parse(row, i))
    return Dataset(studies)


def _write_atomic(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _emit(text: str, path: str | None) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        _write_atomic(path, text)


def _default_seed(value: int | None) -> int:
    """Resolve a seed: explicit flag, then the DTA_SEED env var, then 0."""
    if value is not None:
        return value
    env = os.environ.get("DTA_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise _InputError(f"DTA_SEED={env!r} is not an integer")


# ---------------------------------------------------------------------------
# fit


def _sym_json(m: Sym2) -> list[list[float]]:
    return [[m.a11, m.a12], [m.a12, m.a22]]


def _region_json(r: ConfidenceRegion) -> dict:
    return {
        "center": [r.center[0], r.center[1]],
        "shape": _sym_json(r.shape),
        "threshold": r.threshold,
        "h": r.h,
        "alpha": r.alpha,
        "method": r.method,
    }


def _safe_sroc(fit: FitResult, warn_sink: list[str]) -> list[list[float]]:
    if fit.sigma.a22 <= 0:
        warn_sink.append(
            "sroc curve omitted: between-study specificity variance is zero"
        )
        return []
    pts = sroc_curve(fit.beta, fit.sigma, SROC_GRID)
    return [[t, sens] for t, sens in pts]


def _fit_report(d: Dataset, alpha: float, estimator: str) -> tuple[dict, dict]:
    """Compute the full report; returns (json_dict, plot_ingredients)."""
    collected: list[str] = []
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        ccr, moment_fit = confidence_region(d, "ccr", alpha, "moment_bc")
        ncr_moment, _ = confidence_region(d, "ncr", alpha, "moment_bc")
        reml_fit = None
        ncr_reml = None
        if estimator in ("reml", "both"):
            ncr_reml, reml_fit = confidence_region(d, "ncr", alpha, "reml")
    messages = [str(w.message) for w in caught]

    _, s = d.arrays()
    primary = reml_fit if estimator == "reml" else moment_fit
    ncr_primary = ncr_reml if estimator == "reml" else ncr_moment
    report = {
        "beta": [primary.beta[0], primary.beta[1]],
        "sigma": _sym_json(primary.sigma),
        "v": _sym_json(primary.v),
        "estimator": primary.estimator,
        "h": moment_fit.h,
        "b_terms": {"b1": moment_fit.b.b1, "b2": moment_fit.b.b2, "b3": moment_fit.b.b3},
        "regions": {"ncr": _region_json(ncr_primary), "ccr": _region_json(ccr)},
        "i2": {
            "sens": i_squared(s[:, 0], max(primary.sigma.a11, 0.0)),
            "spec": i_squared(s[:, 1], max(primary.sigma.a22, 0.0)),
        },
        "sroc": _safe_sroc(primary, messages),
        "warnings": list(dict.fromkeys(messages)),
    }
    if estimator == "both":
        assert reml_fit is not None and ncr_reml is not None
        report["reml"] = {
            "beta": [reml_fit.beta[0], reml_fit.beta[1]],
            "sigma": _sym_json(reml_fit.sigma),
            "v": _sym_json(reml_fit.v),
            "regions": {"ncr": _region_json(ncr_reml)},
        }
    plot = {
        "fit": primary,
        "ncr": ncr_primary,
        "ccr": ccr,
        "sroc": report["sroc"],
    }
    return report, plot


def _svg_path(points: Sequence[tuple[float, float]], close: bool) -> str:
    px = [f"{40 + 420 * fpr:.3f},{20 + 420 * (1 - sens):.3f}" for fpr, sens in points]
    return "M" + " L".join(px) + ("Z" if close else "")


def _render_svg(d: Dataset, plot: dict) -> str:
    """Static SVG 1.1 plot in ROC space: unit square, studies, summary, regions, SROC."""
    fit: FitResult = plot["fit"]
    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        '<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="500" height="500" '
        'viewBox="0 0 500 500">',
        '<rect x="0" y="0" width="500" height="500" fill="white"/>',
        '<rect x="40" y="20" width="420" height="420" fill="none" stroke="#444"/>',
    ]
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        x = 40 + 420 * frac
        y = 20 + 420 * (1 - frac)
        parts.append(
            f'<text x="{x:.0f}" y="455" font-family="sans-serif" font-size="11" '
            f'text-anchor="middle">{frac:g}</text>'
        )
        parts.append(
            f'<text x="34" y="{y + 4:.0f}" font-family="sans-serif" font-size="11" '
            f'text-anchor="end">{frac:g}</text>'
        )
    parts.append(
        '<text x="250" y="482" font-family="sans-serif" font-size="13" '
        'text-anchor="middle">False positive rate</text>'
    )
    parts.append(
        '<text x="12" y="230" font-family="sans-serif" font-size="13" text-anchor="middle" '
        'transform="rotate(-90 12 230)">Sensitivity</text>'
    )
    if plot["sroc"]:
        parts.append(
            f'<path d="{_svg_path(plot["sroc"], close=False)}" fill="none" '
            'stroke="#333333" stroke-width="1.5"/>'
        )
    for region, color in ((plot["ncr"], "#1f77b4"), (plot["ccr"], "#d62728")):
        pts = to_roc_space(region_boundary(region, BOUNDARY_POINTS))
        parts.append(
            f'<path d="{_svg_path(pts, close=True)}" fill="none" stroke="{color}" '
            'stroke-width="1.5"/>'
        )
    for st in d.studies:
        fpr, sens = to_roc_space([(st.y_a, st.y_b)])[0]
        x, y = 40 + 420 * fpr, 20 + 420 * (1 - sens)
        label = escape(st.id or "study")
        parts.append(
            f'<circle cx="{x:.3f}" cy="{y:.3f}" r="3.5" fill="#888888" fill-opacity="0.7">'
            f"<title>{label}</title></circle>"
        )
    fpr, sens = to_roc_space([fit.beta])[0]
    x, y = 40 + 420 * fpr, 20 + 420 * (1 - sens)
    parts.append(f'<circle cx="{x:.3f}" cy="{y:.3f}" r="5" fill="#000000"/>')
    legend = [("NCR", "#1f77b4"), ("CCR", "#d62728"), ("SROC", "#333333")]
    for i, (name, color) in enumerate(legend):
        ly = 36 + 16 * i
        parts.append(f'<line x1="52" y1="{ly}" x2="76" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        parts.append(
            f'<text x="82" y="{ly + 4}" font-family="sans-serif" font-size="11">{name}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_fit(args: argparse.Namespace) -> int:
    d = read_table(args.input)
    if d.n < 3:
        sys.stderr.write(f"need at least 3 studies to fit, got {d.n}\n")
        return EXIT_TOO_FEW
    report, plot = _fit_report(d, args.alpha, args.estimator)
    _emit(json.dumps(report, indent=2) + "\n", args.json)
    if args.svg is not None:
        _write_atomic(args.svg, _render_svg(d, plot))
    return 0


# ---------------------------------------------------------------------------
# region


def cmd_region(args: argparse.Namespace) -> int:
    d = read_table(args.input)
    if d.n < 3:
        sys.stderr.write(f"need at least 3 studies to fit, got {d.n}\n")
        return EXIT_TOO_FEW
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        region, _ = confidence_region(d, args.method, args.alpha, "moment_bc")
    pts = region_boundary(region, args.points)
    if args.space == "roc":
        header = "fpr,sensitivity"
        rows = to_roc_space(pts)
    else:
        header = "y_sens,y_spec"
        rows = [(p[0], p[1]) for p in pts]
    lines = [header] + [f"{u:.17g},{v:.17g}" for u, v in rows]
    _emit("\n".join(lines) + "\n", args.out)
    return 0


# ---------------------------------------------------------------------------
# simulate


def _float_list(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip() != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated number list: {text!r}")
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip() != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated integer list: {text!r}")
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def cmd_simulate(args: argparse.Namespace) -> int:
    seed = _default_seed(args.seed)
    combos = [(t, r, n) for t in args.tau2 for r in args.rho for n in args.n]
    child_seeds = np.random.SeedSequence(seed).generate_state(len(combos), np.uint64)
    try:
        scenarios = [
            Scenario(tau2=t, rho=r, n=n, reps=args.reps, alpha=0.05, seed=int(child_seeds[i]))
            for i, (t, r, n) in enumerate(combos)
        ]
    except ValueError as exc:
        raise _InputError(str(exc))
    results = run_grid(scenarios)
    _emit(grid_to_csv(results), args.out)
    return 0


# ---------------------------------------------------------------------------
# validate


def validation_preset(
    name: str, reps: int, seed: int
) -> tuple[OracleConfig, Sym2 | None, tuple[float, float, float]]:
    """Named oracle configuration: (config, forced sigma_hat or None, expected b).

    homogeneous: 32 equal studies, closed-form expectation (4/n, 6/n, 0).
    heterogeneous: 16 studies with variances drawn once from the fixed design
    stream, expectation from the analytic trace formulas.
    degenerate: the re-estimated covariance is pinned to the truth, so all
    three moments are exactly zero.
    """
    if name == "homogeneous":
        sigma = Sym2(0.4, 0.0, 0.4)
        cfg = OracleConfig(
            n=32, sigma_true=sigma, within_vars=tuple((0.2, 0.2) for _ in range(32)),
            reps=reps, seed=seed,
        )
        return cfg, None, (4.0 / 32, 6.0 / 32, 0.0)
    if name == "heterogeneous":
        sigma = Sym2(0.4, 0.08, 0.4)
        sv = gen_within_variances(16, rep_stream(DESIGN_SEED, 0))
        cfg = OracleConfig(
            n=16, sigma_true=sigma, within_vars=tuple((a, b) for a, b in sv),
            reps=reps, seed=seed,
        )
        design = Dataset(
            Study(0.0, 0.0, a, b, id=f"design{i + 1:02d}") for i, (a, b) in enumerate(sv)
        )
        expected = b_star(design, sigma)
        return cfg, None, (expected.b1, expected.b2, expected.b3)
    if name == "degenerate":
        sigma = Sym2(0.0, 0.0, 0.0)
        cfg = OracleConfig(
            n=8, sigma_true=sigma, within_vars=tuple((0.2, 0.3) for _ in range(8)),
            reps=reps, seed=seed,
        )
        return cfg, sigma, (0.0, 0.0, 0.0)
    raise _InputError(f"unknown preset {name!r}")


def cmd_validate(args: argparse.Namespace) -> int:
    seed = _default_seed(args.seed)
    cfg, override, expected = validation_preset(args.preset, args.reps, seed)
    try:
        est, ses = mc_b_moments(cfg, sigma_hat_override=override)
    except ValueError as exc:
        raise _InputError(str(exc))
    slack = 2.0 / cfg.n**2
    ok = True
    print(f"preset={args.preset} n={cfg.n} reps={cfg.reps} seed={seed}")
    for name, mc, se, ana in zip(("b1", "b2", "b3"), (est.b1, est.b2, est.b3), ses, expected):
        tol = 3.0 * se + slack
        good = abs(mc - ana) <= tol
        ok = ok and good
        print(
            f"{name}: analytic={ana:.6f} mc={mc:.6f} se={se:.2g} "
            f"|diff|={abs(mc - ana):.6f} tol={tol:.6f} {'PASS' if good else 'FAIL'}"
        )
    print("PASS" if ok else "FAIL")
    return 0 if ok else EXIT_TOLERANCE


# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dtameta",
        description="Bivariate random-effects meta-analysis of diagnostic accuracy "
        "with corrected confidence regions.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="fit a study table, write a JSON report and optional SVG")
    p_fit.add_argument("--input", required=True, help="CSV in count or summary form")
    p_fit.add_argument("--alpha", type=float, default=0.05)
    p_fit.add_argument("--estimator", choices=["moment", "reml", "both"], default="moment")
    p_fit.add_argument("--json", default=None, help="report path (stdout when omitted)")
    p_fit.add_argument("--svg", default=None, help="optional ROC-space plot path")
    p_fit.set_defaults(func=cmd_fit)

    p_reg = sub.add_parser("region", help="export confidence-region boundary points as CSV")
    p_reg.add_argument("--input", required=True)
    p_reg.add_argument("--method", choices=["ncr", "ccr"], default="ccr")
    p_reg.add_argument("--alpha", type=float, default=0.05)
    p_reg.add_argument("--points", type=int, default=BOUNDARY_POINTS)
    p_reg.add_argument("--space", choices=["logit", "roc"], default="logit")
    p_reg.add_argument("--out", default=None, help="CSV path (stdout when omitted)")
    p_reg.set_defaults(func=cmd_region)

    p_sim = sub.add_parser("simulate", help="run a coverage simulation grid, emit CSV")
    p_sim.add_argument("--tau2", type=_float_list, required=True, help="comma-separated list")
    p_sim.add_argument("--rho", type=_float_list, required=True, help="comma-separated list")
    p_sim.add_argument("--n", type=_int_list, required=True, help="comma-separated list")
    p_sim.add_argument("--reps", type=int, default=1000)
    p_sim.add_argument("--seed", type=int, default=None, help="defaults to DTA_SEED, then 0")
    p_sim.add_argument("--out", default=None, help="CSV path (stdout when omitted)")
    p_sim.set_defaults(func=cmd_simulate)

    p_val = sub.add_parser("validate", help="check analytic trace formulas against Monte Carlo")
    p_val.add_argument(
        "--preset", choices=["homogeneous", "heterogeneous", "degenerate"], required=True
    )
    p_val.add_argument("--reps", type=int, default=200_000)
    p_val.add_argument("--seed", type=int, default=None, help="defaults to DTA_SEED, then 0")
    p_val.set_defaults(func=cmd_validate)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _InputError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_BAD_INPUT
    except RegionUndefinedError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_NO_REGION
    except ValueError as exc:  # covers DataError and bad numeric flags
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_BAD_INPUT


if __name__ == "__main__":
    sys.exit(main())
