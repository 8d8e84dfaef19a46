"""Reading and writing lumping problems as TOML documents.

A problem file has these sections::

    name = "logistic3"            # optional

    [dims]
    n = 3
    m = 1

    [vars]
    names = ["x1", "x2", "x3"]

    [vector_field]
    exprs = ["x1*(1 - (x1 + x2 + x3))", ...]   # n expressions

    [lumping]
    exprs = ["x1 + x2 + x3"]                   # m expressions

    [constraints]                              # optional, g(x) = 0
    exprs = []

    [domain]
    lower = [0.0, 0.0, 0.0]
    upper = [1.0, 1.0, 1.0]
    require = []          # optional, keep points where every expression >= 0
    seeds = []            # optional, explicit sample points tried first

    [options]             # every key optional
    samples = 200
    seed = 0
    rank_tol = 1e-8
    residual_tol = 1e-8
    constraint_tol = 1e-10
    flow_tol = 1e-5
    fiber_seed = [0.0, 0.0, 0.0]
    fiber_points = 20
    flow_x0 = [0.1, 0.2, 0.3]
    flow_t_end = 1.0
    flow_points = 21

Any problem in a document is reported as :class:`ProblemFileError`, which
carries the line and column of the offending entry when they can be found.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
import sys
from pathlib import Path

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .expr import Expression, ParseError, parse
from .geometry import SmoothMap, VectorField
from .lumpability import FlowSpec, LumpingProblem, SampleSpec, Tolerances

__all__ = [
    "ProblemFileError",
    "loads",
    "load",
    "dumps",
    "dump",
    "to_document",
    "from_document",
    "problem_hash",
]

_OPTION_KEYS = {
    "samples": int,
    "seed": int,
    "rank_tol": float,
    "residual_tol": float,
    "constraint_tol": float,
    "flow_tol": float,
    "fiber_seed": list,
    "fiber_points": int,
    "flow_x0": list,
    "flow_t_end": float,
    "flow_points": int,
}
_SECTIONS = ("dims", "vars", "vector_field", "lumping", "constraints", "domain", "options")


class ProblemFileError(ValueError):
    """Invalid problem document; ``line`` and ``column`` are 1-based or None."""

    def __init__(self, message: str, source: str = "<string>", line: int | None = None, column: int | None = None):
        self.message = message
        self.source = source
        self.line = line
        self.column = column
        where = source if line is None else f"{source}:{line}:{column or 1}"
        super().__init__(f"{where}: {message}")


class _Locator:
    """Best-effort mapping from (section, key, literal) back to a text position."""

    def __init__(self, text: str | None, source: str):
        self.lines = [] if text is None else text.splitlines()
        self.source = source

    def _section_start(self, section: str | None) -> int:
        if section is None:
            return 0
        pattern = re.compile(r"^\s*\[\s*" + re.escape(section) + r"\s*\]")
        for k, line in enumerate(self.lines):
            if pattern.match(line):
                return k
        return -1

    def find(self, section: str | None, key: str | None = None, literal: str | None = None) -> tuple[int | None, int | None]:
        start = self._section_start(section)
        if start < 0:
            return None, None
        row = start
        if key is not None:
            pattern = re.compile(r"^\s*" + re.escape(key) + r"\s*=")
            for k in range(start + (section is not None), len(self.lines)):
                if k > start and section is not None and self.lines[k].lstrip().startswith("["):
                    break
                if pattern.match(self.lines[k]):
                    row = k
                    break
            else:
                return start + 1, 1
        if literal is not None:
            for k in range(row, len(self.lines)):
                col = self.lines[k].find(literal)
                if col >= 0:
                    return k + 1, col + 1
        return row + 1, 1

    def error(self, message: str, section: str | None = None, key: str | None = None, literal: str | None = None):
        line, col = self.find(section, key, literal)
        return ProblemFileError(message, self.source, line, col)


def _number_list(value, what: str, size: int, loc: _Locator, section: str, key: str) -> tuple[float, ...]:
    if not isinstance(value, list) or len(value) != size:
        raise loc.error(f"{what} must be a list of {size} numbers", section, key)
    out = []
    for v in value:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise loc.error(f"{what} entries must be numbers, got {v!r}", section, key)
        if not math.isfinite(v):
            raise loc.error(f"{what} entries must be finite", section, key)
        out.append(float(v))
    return tuple(out)


def _expressions(doc: dict, section: str, names, loc: _Locator, required: bool = True) -> list[Expression]:
    table = doc.get(section)
    if table is None:
        if required:
            raise loc.error(f"missing section [{section}]")
        return []
    exprs = table.get("exprs")
    if not isinstance(exprs, list) or not all(isinstance(e, str) for e in exprs):
        raise loc.error(f"[{section}] exprs must be a list of strings", section, "exprs")
    out = []
    for e in exprs:
        try:
            out.append(parse(e, names))
        except ParseError as exc:
            line, col = loc.find(section, "exprs", json.dumps(e))
            if col is not None and exc.position is not None:
                col += 1 + exc.position
            raise ProblemFileError(f"[{section}] {exc}", loc.source, line, col) from exc
    return out


def from_document(doc: dict, source: str = "<string>", text: str | None = None) -> LumpingProblem:
    """Build a :class:`LumpingProblem` from a parsed TOML mapping."""
    loc = _Locator(text, source)
    unknown = sorted(set(doc) - set(_SECTIONS) - {"name"})
    if unknown:
        raise loc.error(f"unknown section(s) {unknown}", unknown[0])
    dims = doc.get("dims")
    if not isinstance(dims, dict):
        raise loc.error("missing section [dims]")
    n, m = dims.get("n"), dims.get("m")
    for key, val in (("n", n), ("m", m)):
        if isinstance(val, bool) or not isinstance(val, int) or val < 1:
            raise loc.error(f"[dims] {key} must be a positive integer", "dims", key)
    if not m < n:
        raise loc.error(f"[dims] m = {m} must be smaller than n = {n}", "dims", "m")

    names = doc.get("vars", {}).get("names")
    if not isinstance(names, list) or not all(isinstance(s, str) for s in names):
        raise loc.error("[vars] names must be a list of strings", "vars", "names")
    if len(names) != n:
        raise loc.error(f"[vars] lists {len(names)} names, expected n = {n}", "vars", "names")
    if len(set(names)) != n:
        raise loc.error("[vars] names must be distinct", "vars", "names")
    for s in names:
        if not re.fullmatch(r"[A-Za-z_][A-Za-z_0-9]*", s) or s in ("sin", "cos", "exp", "log", "sqrt", "neg"):
            raise loc.error(f"invalid variable name {s!r}", "vars", "names", json.dumps(s))

    field = _expressions(doc, "vector_field", names, loc)
    if len(field) != n:
        raise loc.error(f"[vector_field] has {len(field)} expressions, expected n = {n}", "vector_field", "exprs")
    lump = _expressions(doc, "lumping", names, loc)
    if len(lump) != m:
        raise loc.error(f"[lumping] has {len(lump)} expressions, expected m = {m}", "lumping", "exprs")
    cons = _expressions(doc, "constraints", names, loc, required=False)

    domain = doc.get("domain")
    if not isinstance(domain, dict):
        raise loc.error("missing section [domain]")
    lower = _number_list(domain.get("lower"), "[domain] lower", n, loc, "domain", "lower")
    upper = _number_list(domain.get("upper"), "[domain] upper", n, loc, "domain", "upper")
    if any(lo > hi for lo, hi in zip(lower, upper)):
        raise loc.error("[domain] lower exceeds upper", "domain", "lower")
    require = _expressions({"domain": {"exprs": domain.get("require", [])}}, "domain", names, loc)
    seeds_raw = domain.get("seeds", [])
    if not isinstance(seeds_raw, list):
        raise loc.error("[domain] seeds must be a list of points", "domain", "seeds")
    seeds = tuple(_number_list(s, "[domain] seed point", n, loc, "domain", "seeds") for s in seeds_raw)

    opts = doc.get("options", {})
    for key, val in opts.items():
        kind = _OPTION_KEYS.get(key)
        if kind is None:
            raise loc.error(f"unknown option {key!r}", "options", key)
        ok = isinstance(val, list) if kind is list else (
            isinstance(val, int) and not isinstance(val, bool) if kind is int else isinstance(val, (int, float)) and not isinstance(val, bool)
        )
        if not ok:
            raise loc.error(f"option {key!r} must be {kind.__name__}", "options", key)
    fiber_seed = opts.get("fiber_seed")
    if fiber_seed is not None:
        fiber_seed = _number_list(fiber_seed, "fiber_seed", n, loc, "options", "fiber_seed")
    x0 = opts.get("flow_x0")
    if x0 is not None:
        x0 = _number_list(x0, "flow_x0", n, loc, "options", "flow_x0")
    defaults = Tolerances()
    tolerances = Tolerances(
        **{k: float(opts.get(k, getattr(defaults, k))) for k in ("rank_tol", "residual_tol", "constraint_tol", "flow_tol")}
    )
    for k in ("rank_tol", "residual_tol", "constraint_tol", "flow_tol"):
        if not getattr(tolerances, k) > 0:
            raise loc.error(f"option {k!r} must be positive", "options", k)
    for k in ("samples", "flow_points", "fiber_points"):
        if k in opts and opts[k] < 1:
            raise loc.error(f"option {k!r} must be positive", "options", k)

    name = doc.get("name", "")
    if not isinstance(name, str):
        raise loc.error("name must be a string", None, "name")
    try:
        return LumpingProblem(
            v=VectorField(tuple(field)),
            pi=SmoothMap(tuple(lump)),
            constraints=SmoothMap(tuple(cons)) if cons else None,
            sample=SampleSpec(
                lower=lower,
                upper=upper,
                count=int(opts.get("samples", 200)),
                seed=int(opts.get("seed", 0)),
                require=tuple(require),
                seeds=seeds,
            ),
            fiber_seed=fiber_seed,
            tolerances=tolerances,
            flow=FlowSpec(x0=x0, t_end=float(opts.get("flow_t_end", 1.0)), points=int(opts.get("flow_points", 11))),
            fiber_points=int(opts.get("fiber_points", 20)),
            name=name,
        )
    except ValueError as exc:
        raise ProblemFileError(str(exc), source) from exc


def loads(text: str, source: str = "<string>") -> LumpingProblem:
    """Parse problem-file text."""
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+), column (\d+)", str(exc))
        line, col = (int(m.group(1)), int(m.group(2))) if m else (None, None)
        raise ProblemFileError(f"TOML syntax error: {exc}", source, line, col) from exc
    return from_document(doc, source, text)


def load(path) -> LumpingProblem:
    """Read a problem file; I/O failures surface as ``OSError``."""
    path = Path(path)
    return loads(path.read_text(encoding="utf-8"), str(path))


def to_document(p: LumpingProblem) -> dict:
    """Canonical mapping for ``p``: expressions re-rendered, floats as floats."""
    doc: dict = {}
    if p.name:
        doc["name"] = p.name
    doc["dims"] = {"n": p.n, "m": p.m}
    doc["vars"] = {"names": list(p.variables)}
    doc["vector_field"] = {"exprs": [e.render() for e in p.v.components]}
    doc["lumping"] = {"exprs": [e.render() for e in p.pi.components]}
    if p.constraints is not None:
        doc["constraints"] = {"exprs": [e.render() for e in p.constraints.components]}
    s = p.sample
    domain = {"lower": [float(v) for v in s.lower], "upper": [float(v) for v in s.upper]}
    if s.require:
        domain["require"] = [e.render() for e in s.require]
    if s.seeds:
        domain["seeds"] = [[float(v) for v in pt] for pt in s.seeds]
    doc["domain"] = domain
    t = p.tolerances
    opts = {
        "samples": s.count,
        "seed": s.seed,
        "rank_tol": t.rank_tol,
        "residual_tol": t.residual_tol,
        "constraint_tol": t.constraint_tol,
        "flow_tol": t.flow_tol,
        "fiber_points": p.fiber_points,
        "flow_t_end": float(p.flow.t_end),
        "flow_points": p.flow.points,
    }
    if p.fiber_seed is not None:
        opts["fiber_seed"] = [float(v) for v in p.fiber_seed]
    if p.flow.x0 is not None:
        opts["flow_x0"] = [float(v) for v in p.flow.x0]
    doc["options"] = opts
    return doc


def dumps(p: LumpingProblem) -> str:
    return tomli_w.dumps(to_document(p))


def dump(p: LumpingProblem, path) -> None:
    Path(path).write_text(dumps(p), encoding="utf-8")


def problem_hash(p: LumpingProblem) -> str:
    """SHA-256 of the canonical document, stable under ``loads(dumps(p))``."""
    blob = json.dumps(to_document(p), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()
