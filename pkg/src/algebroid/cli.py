"""Command-line orchestration: load a spec, run selected check suites, and
emit deterministic human- or machine-readable reports.

Exit codes: 0 all selected checks pass, 1 at least one check fails, 2 input
or schema error, 3 numerical indeterminacy (free-algebroid rank ambiguity).
Reports with the same config (including seed) are byte-identical.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys

import numpy as np

from . import calculus as ca
from . import foliation as fo
from . import freealg as fa
from .exprjet import ParseError
from .spec_model import (
    AlgebroidSpec, CheckReport, SchemaError, load_spec_file,
    check_anchor_morphism, check_jacobi, report_from_residuals,
    sample_points, validate_spec, DEFAULT_POINTS, DEFAULT_SEED,
)

EXIT_PASS = 0
EXIT_FAIL = 1
EXIT_INPUT = 2
EXIT_INDETERMINATE = 3

TOLERANCES = {
    "anchor_morphism": 1e-9,
    "jacobi": 1e-9,
    "cartan_s_frame": 1e-9,
    "s_frame_vs_covariant": 1e-9,
    "tau_intertwine": 1e-10,
    "alpha_curvature_flat": 1e-7,
    "tau_curvature_flat": 1e-7,
    "killing_frame": 1e-7,
    "killing_frame_vs_sym": 1e-10,
    "generalized_sym": 1e-9,
    "generalized_skew": 1e-9,
    "symplectic_closed": 1e-9,
    "symplectic_residual": 1e-9,
    "poisson_residual": 1e-9,
    "koszul_delta": 1e-9,
    "flat_frame_gate": 1e-7,
    "flat_frame": 1e-6,
    "cartan_extended": 1e-8,
    "jacobiator_covariant_constancy": 1e-8,
    "killing_generators": 1e-7,
    "killing_extended": 1e-7,
    "geodesic_orthogonality": 1e-6,
    "geodesic_energy_drift": 1e-8,
}


class InputError(Exception):
    """Bad invocation or spec content that maps to exit code 2."""


def _tol(name: str, override) -> float:
    return override if override is not None else TOLERANCES[name]


def _pointwise_report(name, spec, points, func, tolerance) -> CheckReport:
    residuals = [func(spec, p) for p in points]
    return report_from_residuals(name, residuals, points, tolerance)


def run_check_suite(spec: AlgebroidSpec, points, flags, tol_override=None,
                    psi_candidate=None) -> list[CheckReport]:
    """Execute the selected checks; returns one CheckReport per check."""
    reports: list[CheckReport] = []

    if flags.get("axioms"):
        if spec.mode != "lie":
            raise InputError("--axioms needs a lie-mode spec (anchored bundles "
                             "carry no bracket; use `validate` instead)")
        reports.append(check_anchor_morphism(spec, points,
                                             _tol("anchor_morphism", tol_override)))
        reports.append(check_jacobi(spec, points, _tol("jacobi", tol_override)))

    if flags.get("cartan"):
        if spec.mode != "lie":
            raise InputError("--cartan needs a lie-mode spec")
        s_report = _pointwise_report(
            "cartan_s_frame", spec, points,
            lambda s, p: ca.compatibility_tensor_frame(s, p).max_abs(),
            _tol("cartan_s_frame", tol_override))
        reports.append(s_report)
        reports.append(_pointwise_report(
            "s_frame_vs_covariant", spec, points,
            lambda s, p: float(np.max(np.abs(
                ca.compatibility_tensor_frame(s, p).components
                - ca.compatibility_tensor_covariant(s, p).components))),
            _tol("s_frame_vs_covariant", tol_override)))
        reports.append(ca.tau_intertwine_check(
            spec, points, _tol("tau_intertwine", tol_override)))
        if s_report.passed:
            # Cartan compatibility implies both induced connections are flat
            reports.append(_pointwise_report(
                "alpha_curvature_flat", spec, points,
                lambda s, p: ca.a_curvature(s, p, "alpha").max_abs(),
                _tol("alpha_curvature_flat", tol_override)))
            reports.append(_pointwise_report(
                "tau_curvature_flat", spec, points,
                lambda s, p: ca.a_curvature(s, p, "tau").max_abs(),
                _tol("tau_curvature_flat", tol_override)))

    if flags.get("killing"):
        if spec.metric is None:
            raise InputError("--killing needs a metric block")
        reports.append(_pointwise_report(
            "killing_frame", spec, points,
            lambda s, p: ca.killing_residual_frame(s, p).max_abs(),
            _tol("killing_frame", tol_override)))
        reports.append(_pointwise_report(
            "killing_frame_vs_sym", spec, points,
            lambda s, p: float(np.max(np.abs(
                ca.killing_residual_frame(s, p).components
                - 2.0 * ca.killing_residual_sym(s, p).components))),
            _tol("killing_frame_vs_sym", tol_override)))

    if flags.get("generalized"):
        if spec.metric is None or spec.two_form is None:
            raise InputError("--generalized needs both metric and two_form blocks")
        reports.append(_pointwise_report(
            "generalized_sym", spec, points,
            lambda s, p: float(np.max(np.abs(ca.generalized_residuals(s, p).sym))),
            _tol("generalized_sym", tol_override)))
        reports.append(_pointwise_report(
            "generalized_skew", spec, points,
            lambda s, p: float(np.max(np.abs(ca.generalized_residuals(s, p).skew))),
            _tol("generalized_skew", tol_override)))

    if flags.get("symplectic"):
        if spec.symplectic is None:
            raise InputError("--symplectic needs a symplectic block")
        reports.append(_pointwise_report(
            "symplectic_closed", spec, points, ca.symplectic_closedness_residual,
            _tol("symplectic_closed", tol_override)))
        reports.append(_pointwise_report(
            "symplectic_residual", spec, points,
            lambda s, p: ca.structure_residual(s, p, "symplectic").max_abs(),
            _tol("symplectic_residual", tol_override)))

    if flags.get("poisson"):
        if spec.poisson is None:
            raise InputError("--poisson needs a poisson block")
        reports.append(_pointwise_report(
            "poisson_residual", spec, points,
            lambda s, p: ca.structure_residual(s, p, "poisson").max_abs(),
            _tol("poisson_residual", tol_override)))

    if flags.get("koszul"):
        if psi_candidate is None:
            raise InputError("--koszul needs --psi-file")
        if spec.metric is None:
            raise InputError("--koszul needs a metric block")
        reports.append(ca.koszul_delta_check(
            spec, psi_candidate, points, _tol("koszul_delta", tol_override)))

    if flags.get("flat_frame"):
        if spec.mode != "lie":
            raise InputError("--flat-frame needs a lie-mode spec")
        gate = _pointwise_report(
            "flat_frame_gate", spec, points,
            lambda s, p: ca.connection_curvature(s, p).max_abs(),
            _tol("flat_frame_gate", tol_override))
        reports.append(gate)
        if gate.passed:
            _, probe_reports = ca.flat_frame_probe(
                spec, spec.chart.center(),
                flat_tolerance=_tol("flat_frame_gate", tol_override),
                tolerance=_tol("flat_frame", tol_override))
            reports.extend(probe_reports)

    return reports


def _load_psi_file(path, spec: AlgebroidSpec):
    from .exprjet import parse_expr
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    cube = doc.get("psi", doc) if isinstance(doc, dict) else doc
    r, n = spec.rank, spec.dimension
    coords = list(spec.chart.coords)
    if (not isinstance(cube, list) or len(cube) != r
            or any(len(row) != r for row in cube)
            or any(len(row[b]) != n for row in cube for b in range(r))):
        raise SchemaError("psi", f"expected shape ({r}, {r}, {n})")
    try:
        return tuple(tuple(tuple(parse_expr(cube[a][b][i], coords)
                                 for i in range(n)) for b in range(r))
                     for a in range(r))
    except ParseError as exc:
        raise SchemaError("psi", f"expression error: {exc}") from exc


# --------------------------------------------------------------------------
# Report emission


def _emit(payload: dict, fmt: str, out_path) -> None:
    if fmt == "json":
        text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    else:
        lines = []
        for key, value in payload.items():
            if key == "checks":
                continue
            if isinstance(value, dict):
                value = {k: v for k, v in value.items() if k != "per_point"}
            lines.append(f"{key}: {value}")
        for check in payload.get("checks", []):
            status = "PASS" if check["pass"] else "FAIL"
            lines.append(
                f"[{status}] {check['name']}: max={check['max_residual']:.6e} "
                f"mean={check['mean_residual']:.6e} tol={check['tolerance']:.1e} "
                f"worst_point={check['worst_point']}")
        text = "\n".join(lines) + "\n"
    if out_path:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _verdict(reports) -> str:
    return "pass" if all(r.passed for r in reports) else "fail"


def _finish(payload, reports, args) -> int:
    payload["checks"] = [r.to_dict() for r in reports]
    payload["verdict"] = _verdict(reports)
    _emit(payload, args.format, args.out)
    return EXIT_PASS if payload["verdict"] == "pass" else EXIT_FAIL


# --------------------------------------------------------------------------
# Subcommands


def _cmd_validate(args) -> int:
    spec = load_spec_file(args.spec)
    points = sample_points(spec.chart, args.points, args.seed)
    reports = validate_spec(spec, points,
                            tolerance=args.tol if args.tol else 1e-9)
    payload = {"spec": args.spec, "seed": args.seed, "points": args.points}
    return _finish(payload, reports, args)


def _cmd_check(args) -> int:
    spec = load_spec_file(args.spec)
    points = sample_points(spec.chart, args.points, args.seed)
    flags = {
        "axioms": args.axioms, "cartan": args.cartan, "killing": args.killing,
        "generalized": args.generalized, "symplectic": args.symplectic,
        "poisson": args.poisson, "koszul": args.koszul,
        "flat_frame": args.flat_frame,
    }
    if not any(flags.values()):
        flags["axioms"] = True
    psi = _load_psi_file(args.psi_file, spec) if args.psi_file else None
    reports = run_check_suite(spec, points, flags, tol_override=args.tol,
                              psi_candidate=psi)
    payload = {"spec": args.spec, "seed": args.seed, "points": args.points}
    return _finish(payload, reports, args)


def _cmd_free(args) -> int:
    spec = load_spec_file(args.spec)
    points = sample_points(spec.chart, args.points, args.seed)
    quotient = fa.free_extend(spec, args.degree, "quotient", seed=args.seed)
    almost = fa.free_extend(spec, args.degree, "almost", seed=args.seed)

    reports = [fa.cartan_check_extended(
        quotient, points, _tol("cartan_extended", args.tol))]
    if args.degree >= 3:
        reports.append(fa.jacobiator_check(
            almost, points, _tol("jacobiator_covariant_constancy", args.tol)))
    propagation_ran = False
    if spec.metric is not None:
        gen = _pointwise_report(
            "killing_generators", spec, points,
            lambda s, p: ca.killing_residual_frame(s, p).max_abs(),
            _tol("killing_generators", args.tol))
        reports.append(gen)
        if gen.passed:
            reports.append(fa.propagate_compatibility(
                quotient, points, _tol("killing_extended", args.tol)))
            propagation_ran = True

    profile = fa.anchor_rank_profile(quotient, points)
    per_point = [{"point": [float(c) for c in p], **entry}
                 for p, entry in zip(points, profile)]
    payload = {
        "spec": args.spec, "seed": args.seed, "points": args.points,
        "degree": args.degree,
        "basis_counts": quotient.counts(),
        "almost_basis_counts": almost.counts(),
        "hall_order": quotient.hall_order,
        "propagation_checked": propagation_ran,
        "anchor_rank_profile": {
            "rank_generators_min": min(e["rank_generators"] for e in profile),
            "rank_generators_max": max(e["rank_generators"] for e in profile),
            "rank_extended_min": min(e["rank_extended"] for e in profile),
            "rank_extended_max": max(e["rank_extended"] for e in profile),
            "max_closure_defect": max(e["closure_defect"] for e in profile),
            "per_point": per_point,
        },
    }
    return _finish(payload, reports, args)


def _cmd_geodesic(args) -> int:
    spec = load_spec_file(args.spec)
    try:
        x0 = [float(v) for v in args.x0.split(",")]
        v0 = [float(v) for v in args.v0.split(",")]
    except ValueError as exc:
        raise InputError(f"bad --x0/--v0: {exc}") from exc
    if len(x0) != spec.dimension or len(v0) != spec.dimension:
        raise InputError(f"--x0/--v0 must have {spec.dimension} components")
    trace = fo.geodesic_integrate(spec, x0, v0, args.t_max, args.h)
    reports = [fo.orthogonality_monitor(
        spec, trace, tolerance=_tol("geodesic_orthogonality", args.tol))]
    energy = CheckReport(
        name="geodesic_energy_drift", points=len(trace.times),
        max_residual=trace.energy_drift,
        mean_residual=float(np.mean(np.abs(trace.energies - trace.energies[0]))),
        tolerance=_tol("geodesic_energy_drift", args.tol),
        worst_point=tuple(float(c) for c in trace.positions[-1]))
    reports.append(energy)

    if args.trace_csv:
        n, r = spec.dimension, spec.rank
        with open(args.trace_csv, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t"] + [f"x_{c}" for c in spec.chart.coords]
                            + [f"v_{c}" for c in spec.chart.coords]
                            + ["energy"] + [f"orth_{a + 1}" for a in range(r)])
            for k in range(len(trace.times)):
                writer.writerow([repr(float(trace.times[k]))]
                                + [repr(float(x)) for x in trace.positions[k]]
                                + [repr(float(v)) for v in trace.velocities[k]]
                                + [repr(float(trace.energies[k]))]
                                + [repr(float(o)) for o in trace.orth_raw[k]])

    payload = {"spec": args.spec, "x0": x0, "v0": v0, "t_max": args.t_max,
               "h": args.h, "exited_domain": trace.exited,
               "exit_time": trace.exit_time}
    return _finish(payload, reports, args)


# --------------------------------------------------------------------------


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="algebroid",
        description="Check compatibility structures on anchored bundles and "
                    "Lie algebroids with connections, at sampled chart points.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--spec", required=True, help="spec JSON file")
        p.add_argument("--points", type=int, default=DEFAULT_POINTS)
        p.add_argument("--seed", type=int, default=DEFAULT_SEED)
        p.add_argument("--tol", type=float, default=None,
                       help="override the per-check default tolerances")
        p.add_argument("--format", choices=("text", "json"), default="json")
        p.add_argument("--out", default=None,
                       help="write the report here (default: stdout)")

    p_validate = sub.add_parser("validate", help="structural axioms and "
                                                 "definiteness/nondegeneracy")
    common(p_validate)

    p_check = sub.add_parser("check", help="compatibility residual checks")
    common(p_check)
    p_check.add_argument("--axioms", action="store_true",
                         help="anchor-morphism and Jacobi checks (default)")
    p_check.add_argument("--cartan", action="store_true",
                         help="compatibility tensor S, formula agreement, "
                              "intertwining, induced flatness")
    p_check.add_argument("--killing", action="store_true")
    p_check.add_argument("--generalized", action="store_true")
    p_check.add_argument("--symplectic", action="store_true")
    p_check.add_argument("--poisson", action="store_true")
    p_check.add_argument("--koszul", action="store_true",
                         help="connection-perturbation test; needs --psi-file")
    p_check.add_argument("--flat-frame", action="store_true", dest="flat_frame")
    p_check.add_argument("--psi-file", dest="psi_file", default=None)

    p_free = sub.add_parser("free", help="free Cartan-Lie algebroid truncation")
    common(p_free)
    p_free.add_argument("--degree", type=int, default=3)

    p_geo = sub.add_parser("geodesic", help="geodesic orthogonality monitor")
    common(p_geo)
    p_geo.add_argument("--x0", required=True, help="comma-separated start point")
    p_geo.add_argument("--v0", required=True, help="comma-separated start velocity")
    p_geo.add_argument("--t-max", dest="t_max", type=float, default=1.0)
    p_geo.add_argument("--h", type=float, default=1e-3)
    p_geo.add_argument("--trace-csv", dest="trace_csv", default=None,
                       help="dump the trace as CSV")

    args = parser.parse_args(argv)
    handlers = {"validate": _cmd_validate, "check": _cmd_check,
                "free": _cmd_free, "geodesic": _cmd_geodesic}
    try:
        if args.points < 1:
            raise InputError("--points must be >= 1")
        if args.tol is not None and args.tol <= 0.0:
            raise InputError("--tol must be positive")
        return handlers[args.command](args)
    except (SchemaError, ParseError, InputError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (fa.IndeterminateRankError, fa.NonLocallyFreeError) as exc:
        print(f"indeterminate: {exc}", file=sys.stderr)
        return EXIT_INDETERMINATE


if __name__ == "__main__":
    sys.exit(main())
