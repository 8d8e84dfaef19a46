"""Command-line front end.

Subcommands::

    exactlump check PROBLEM [--samples N] [--tol T] [--no-flow] [--seed S] [--out FILE]
    exactlump reduce PROBLEM (--grid SPEC | --points FILE) [--out FILE] [--force]
    exactlump flow-compare PROBLEM [--x0 VEC] [--t-end T] [--dt DT] [--out FILE]
    exactlump examples (--list | NAME) [--out FILE]

``check`` exits 0 for lumpable, 2 for not-lumpable, 3 for inconclusive and
1 on any error (bad file, failed integration, ...). No verdict is printed
together with exit code 1.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .flows import flow_commutation_error
from .lumpability import (
    FAIL,
    FLOW_REACH_TOL,
    LumpingProblem,
    project_point,
    check,
    construct_lumped_field,
    detect_first_integral,
    sample_points,
)
from .problemfile import dumps, load, problem_hash
from .systems import BUILTINS, builtin

__all__ = ["main", "build_parser", "report_document", "parse_grid", "EXIT_CODES"]

TOOL = "exactlump"
SCHEMA = 1
EXIT_CODES = {"lumpable": 0, "not-lumpable": 2, "inconclusive": 3}
EXIT_ERROR = 1


class CommandError(Exception):
    """A user-facing failure; reported on stderr with exit code 1."""


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors, which would read as "not-lumpable".
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def _jsonable(obj):
    # JSON has no NaN or infinity; emit null so every report is strict JSON.
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return _jsonable(obj.item())
    return obj


def _with_overrides(p: LumpingProblem, samples=None, seed=None, tol=None) -> LumpingProblem:
    sample = p.sample
    if samples is not None:
        if samples < 1:
            raise CommandError("--samples must be positive")
        sample = dataclasses.replace(sample, count=samples)
    if seed is not None:
        sample = dataclasses.replace(sample, seed=seed)
    tolerances = p.tolerances
    if tol is not None:
        if not tol > 0:
            raise CommandError("--tol must be positive")
        tolerances = dataclasses.replace(tolerances, rank_tol=tol, residual_tol=tol)
    return dataclasses.replace(p, sample=sample, tolerances=tolerances)


def report_document(p: LumpingProblem, report) -> dict:
    """JSON-ready report: provenance header plus the full check result."""
    body = report.to_dict()
    witnesses = {}
    for name, worst in body["worst"].items():
        failed = (
            any(getattr(v, name).status == FAIL for v in report.points)
            if name in ("kernel_inclusion", "rank_condition", "wedge_condition")
            else (body.get(name) or {}).get("status") == FAIL
        )
        if failed:
            witnesses[name] = worst
    doc = {
        "schema": SCHEMA,
        "tool": TOOL,
        "version": __version__,
        "problem": {"name": p.name, "n": p.n, "m": p.m},
        "problem_hash": problem_hash(p),
        "seed": p.sample.seed,
        "samples": p.sample.count,
        "tolerances": dataclasses.asdict(p.tolerances),
        "verdict": body.pop("verdict"),
        "witnesses": witnesses,
    }
    doc.update(body)
    return _jsonable(doc)


def _write_text(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text, encoding="utf-8")


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) for v in row])
    return buf.getvalue()


def parse_grid(spec: str, m: int) -> np.ndarray:
    """``"a:step:b"`` per macro coordinate, comma separated; returns the Cartesian product."""
    parts = [s.strip() for s in spec.split(",")]
    if len(parts) != m:
        raise CommandError(f"--grid needs {m} comma-separated 'start:step:stop' ranges, got {len(parts)}")
    axes = []
    for part in parts:
        try:
            a, h, b = (float(t) for t in part.split(":"))
        except ValueError:
            raise CommandError(f"bad grid range {part!r}; expected 'start:step:stop'") from None
        if not (h > 0 and b >= a and all(map(math.isfinite, (a, h, b)))):
            raise CommandError(f"bad grid range {part!r}; need step > 0 and stop >= start")
        count = int(math.floor((b - a) / h + 1e-9)) + 1
        axes.append(np.round(a + h * np.arange(count), 12))
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in mesh], axis=-1)


def _read_points(path: str, m: int) -> np.ndarray:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CommandError(f"cannot read points file: {exc}") from exc
    rows = [r for r in csv.reader(io.StringIO(text)) if r and any(c.strip() for c in r)]
    out = []
    for k, row in enumerate(rows):
        try:
            vals = [float(c) for c in row]
        except ValueError:
            if k == 0:
                continue  # header row
            raise CommandError(f"{path}:{k + 1}: non-numeric entry") from None
        if len(vals) != m:
            raise CommandError(f"{path}:{k + 1}: expected {m} values, got {len(vals)}")
        out.append(vals)
    if not out:
        raise CommandError(f"{path}: no points")
    return np.array(out)


def _parse_vector(text: str, n: int, flag: str) -> np.ndarray:
    try:
        vals = [float(t) for t in text.replace(" ", "").split(",")]
    except ValueError:
        raise CommandError(f"{flag} must be comma-separated numbers") from None
    if len(vals) != n:
        raise CommandError(f"{flag} needs {n} entries, got {len(vals)}")
    return np.array(vals)


def _build_lumped(p: LumpingProblem, reach_tol: float | None = None):
    # Same construction as ``check``: fiber points are grown only from the
    # declared fiber seed. Anchoring at x0 would let the warm start follow
    # the micro trajectory and mask a non-lumpable field.
    points, _ = sample_points(p, count=min(p.sample.count, 50))
    first_integral = detect_first_integral(p, points) if p.m == 1 and len(points) else None
    return construct_lumped_field(p, first_integral=first_integral, reach_tol=reach_tol)


# --------------------------------------------------------------------------
# Subcommands


def cmd_check(args) -> int:
    p = _with_overrides(load(args.problem), args.samples, args.seed, args.tol)
    report = check(p, run_flow=not args.no_flow, workers=args.workers)
    doc = report_document(p, report)
    _write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", args.out)
    if args.out is not None:
        print(f"verdict: {doc['verdict']}")
    return EXIT_CODES[doc["verdict"]]


def cmd_reduce(args) -> int:
    p = load(args.problem)
    if not args.force:
        verdict = check(p, run_flow=False).verdict
        if verdict != "lumpable":
            print(f"error: check gives {verdict!r}; pass --force to tabulate anyway", file=sys.stderr)
            return EXIT_ERROR
    ys = parse_grid(args.grid, p.m) if args.grid is not None else _read_points(args.points, p.m)
    lumped = _build_lumped(p)
    values, failures = lumped.evaluate_many(ys)
    header = [f"y{i + 1}" for i in range(p.m)] + [f"v{i + 1}" for i in range(p.m)]
    _write_text(_csv_text(header, np.hstack([ys, values])), args.out)
    print(
        f"{len(ys)} rows, {failures} fiber-solve failures, method {lumped.method}, max image offset {lumped.max_offset:.3e}",
        file=sys.stderr,
    )
    return 0


def cmd_flow_compare(args) -> int:
    p = load(args.problem)
    if args.x0 is not None:
        x0 = _parse_vector(args.x0, p.n, "--x0")
    elif p.flow.x0 is not None:
        x0 = np.array(p.flow.x0)
    else:
        raise CommandError("no --x0 given and the problem declares no flow_x0")
    try:
        x0 = project_point(p, x0)
    except (RuntimeError, ArithmeticError) as exc:
        raise CommandError(f"cannot project x0 onto the constraints: {exc}") from exc
    t_end = p.flow.t_end if args.t_end is None else args.t_end
    dt = args.dt if args.dt is not None else abs(t_end) / max(p.flow.points - 1, 1)
    if not dt > 0:
        raise CommandError("--dt must be positive")
    count = int(math.floor(abs(t_end) / dt + 1e-9))
    times = np.round(np.sign(t_end) * dt * np.arange(count + 1), 12)
    if abs(times[-1]) < abs(t_end) - 1e-12:
        times = np.append(times, t_end)
    lumped = _build_lumped(p, reach_tol=FLOW_REACH_TOL)
    worst, errors = flow_commutation_error(p, lumped, x0, times)
    _write_text(_csv_text(["t", "error"], np.column_stack([times, errors])), args.out)
    k = int(np.argmax(errors))
    summary = f"max error {worst:.6e} at t = {times[k]:.6g} over {len(times)} times"
    print(summary, file=sys.stderr if args.out is None else sys.stdout)
    return 0


def cmd_examples(args) -> int:
    if args.list:
        for name in BUILTINS:
            print(name)
        return 0
    if args.name is None:
        raise CommandError("give a built-in NAME or --list")
    try:
        p = builtin(args.name)
    except KeyError as exc:
        raise CommandError(str(exc.args[0])) from None
    _write_text(dumps(p), args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog=TOOL, description="Decide exact lumpability of ODE systems.")
    parser.add_argument("--version", action="version", version=f"{TOOL} {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    c = sub.add_parser("check", help="run every lumpability criterion and emit a JSON report")
    c.add_argument("problem")
    c.add_argument("--samples", type=int, help="number of sample points (default from file)")
    c.add_argument("--tol", type=float, help="rank and residual tolerance")
    c.add_argument("--no-flow", action="store_true", help="skip the flow-commutation check")
    c.add_argument("--seed", type=int, help="sampling seed (default from file)")
    c.add_argument("--workers", type=int, default=1, help="threads for pointwise checks")
    c.add_argument("--out", help="write the report here instead of stdout")
    c.set_defaults(func=cmd_check)

    r = sub.add_parser("reduce", help="tabulate the lumped field as CSV")
    r.add_argument("problem")
    g = r.add_mutually_exclusive_group(required=True)
    g.add_argument("--grid", help="'start:step:stop' per macro coordinate, comma separated")
    g.add_argument("--points", help="CSV file of macro states")
    r.add_argument("--out", help="CSV output path (default stdout)")
    r.add_argument("--force", action="store_true", help="tabulate even if the check does not pass")
    r.set_defaults(func=cmd_reduce)

    f = sub.add_parser("flow-compare", help="error curve |pi(Phi_t x0) - Phi~_t(pi x0)| as CSV")
    f.add_argument("problem")
    f.add_argument("--x0", help="comma-separated initial state (default from file)")
    f.add_argument("--t-end", type=float, help="final time (default from file)")
    f.add_argument("--dt", type=float, help="spacing of the output time grid")
    f.add_argument("--out", help="CSV output path (default stdout)")
    f.set_defaults(func=cmd_flow_compare)

    e = sub.add_parser("examples", help="list or emit built-in problems")
    e.add_argument("name", nargs="?")
    e.add_argument("--list", action="store_true")
    e.add_argument("--out", help="write the problem file here instead of stdout")
    e.set_defaults(func=cmd_examples)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CommandError, OSError, ValueError, ArithmeticError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
