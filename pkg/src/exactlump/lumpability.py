"""Decision engine for exact lumpability of ``dx/dt = v(x)`` under a map ``pi``.

Three pointwise criteria are evaluated at sampled points:

* kernel inclusion: ``ker Dpi`` is annihilated by ``lvd(pi, v)``;
* rank condition: stacking ``lvd`` under ``Dpi`` does not raise the rank;
* wedge condition: each row of ``lvd`` alone lies in the row span of ``Dpi``.

They are mathematically equivalent, so their agreement is itself checked.
On top of these, ``Dpi v`` is compared along fibers, the lumped field is
built by solving for fiber points, and the micro and macro flows are
compared. On constraint manifolds ``{g = 0}`` all matrices are restricted
to the tangent space ``ker Dg``.

Every residual is classified against its tolerance ``tol``: below ``tol``
passes, above ``10 * tol`` fails decisively, anything between is
borderline and makes the overall verdict inconclusive.
"""

from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import linalg
from .expr import DomainError, Expression
from .flows import IntegrationError, flow_commutation_error
from .geometry import (
    ConvergenceError,
    OffManifoldError,
    SmoothMap,
    SubmersionError,
    VectorField,
    check_submersion,
    gauss_newton,
    lvd,
    pushforward,
    vertical_kernel,
)

__all__ = [
    "PASS",
    "FAIL",
    "BORDERLINE",
    "DECISIVE_FACTOR",
    "Tolerances",
    "SampleSpec",
    "FlowSpec",
    "LumpingProblem",
    "CriterionResult",
    "PointVerdict",
    "FiberResult",
    "FirstIntegralResult",
    "FlowResult",
    "CheckReport",
    "LumpedField",
    "TangencyError",
    "FiberSolveError",
    "classify",
    "sample_points",
    "project_point",
    "analyze_point",
    "check_kernel_inclusion",
    "check_rank_condition",
    "check_wedge_condition",
    "check_fiber_constancy",
    "sample_fiber",
    "fiber_pairs",
    "detect_first_integral",
    "construct_lumped_field",
    "aggregate",
    "check",
]

PASS, FAIL, BORDERLINE = "pass", "fail", "borderline"
DECISIVE_FACTOR = 10.0
MAX_FAILURE_FRACTION = 0.1
# Largest distance from the image at which the lumped field is extended
# during flow integration (see LumpedField).
FLOW_REACH_TOL = 0.05


class TangencyError(ValueError):
    """The field is not tangent to the constraint manifold."""


class FiberSolveError(RuntimeError):
    """No point of the requested fiber could be found."""


def classify(residual: float, tol: float) -> str:
    if residual < tol:
        return PASS
    if residual > DECISIVE_FACTOR * tol:
        return FAIL
    return BORDERLINE


# --------------------------------------------------------------------------
# Problem definition


@dataclass(frozen=True)
class Tolerances:
    rank_tol: float = 1e-8
    residual_tol: float = 1e-8
    constraint_tol: float = 1e-10
    flow_tol: float = 1e-5


@dataclass(frozen=True)
class SampleSpec:
    """Monte-Carlo domain: a box, optional seed points, and inequality filters.

    Box draws (and ``seeds``) are projected onto the constraint manifold when
    one is declared. A point is kept only if every ``require`` expression is
    non-negative there.
    """

    lower: tuple[float, ...]
    upper: tuple[float, ...]
    count: int = 200
    seed: int = 0
    require: tuple[Expression, ...] = ()
    seeds: tuple[tuple[float, ...], ...] = ()


@dataclass(frozen=True)
class FlowSpec:
    x0: tuple[float, ...] | None = None
    t_end: float = 1.0
    points: int = 11


@dataclass(frozen=True)
class LumpingProblem:
    v: VectorField
    pi: SmoothMap
    sample: SampleSpec
    constraints: SmoothMap | None = None
    fiber_seed: tuple[float, ...] | None = None
    tolerances: Tolerances = Tolerances()
    flow: FlowSpec = FlowSpec()
    fiber_points: int = 20
    name: str = ""

    def __post_init__(self):
        n, m = self.n, self.m
        if self.v.domain_dim != n or self.v.codim != n:
            raise ValueError("vector field must map R^n to R^n")
        if self.pi.domain_dim != n:
            raise ValueError(f"lumping map has {self.pi.domain_dim} variables, expected {n}")
        if not m < n:
            raise ValueError(f"lumping must reduce dimension, got m = {m}, n = {n}")
        if self.constraints is not None and self.constraints.domain_dim != n:
            raise ValueError("constraints must be defined on R^n")
        s = self.sample
        if len(s.lower) != n or len(s.upper) != n:
            raise ValueError("sample box needs one bound pair per variable")
        if not all(np.isfinite(s.lower)) or not all(np.isfinite(s.upper)):
            raise ValueError("sample box bounds must be finite")
        if any(lo > hi for lo, hi in zip(s.lower, s.upper)):
            raise ValueError("sample box has lower > upper")
        if s.count < 1:
            raise ValueError("sample count must be positive")
        for vec, what in ((self.fiber_seed, "fiber_seed"), (self.flow.x0, "flow x0")):
            if vec is not None and len(vec) != n:
                raise ValueError(f"{what} must have {n} entries")

    @property
    def n(self) -> int:
        return self.v.domain_dim

    @property
    def m(self) -> int:
        return self.pi.codim

    @property
    def variables(self) -> tuple[str, ...]:
        return self.v.variables


# --------------------------------------------------------------------------
# Results


@dataclass
class CriterionResult:
    status: str
    residual: float

    @property
    def passed(self) -> bool:
        return self.status == PASS

    def to_dict(self) -> dict:
        return {"status": self.status, "residual": self.residual}


@dataclass
class PointVerdict:
    point: np.ndarray
    kernel_dim: int
    kernel_inclusion: CriterionResult
    kernel_raw_residual: float
    rank_condition: CriterionResult
    rank_dpi: int
    rank_o2: int
    wedge_condition: CriterionResult
    wedge_rows: list[CriterionResult]
    wedge_combined: bool
    min_singular_dpi: float
    tangency_residual: float = 0.0

    @property
    def statuses(self) -> tuple[str, str, str]:
        return (self.kernel_inclusion.status, self.rank_condition.status, self.wedge_condition.status)

    @property
    def agree(self) -> bool:
        """False when one criterion passes while another fails decisively."""
        s = self.statuses
        return not (PASS in s and FAIL in s)

    def to_dict(self) -> dict:
        return {
            "point": self.point.tolist(),
            "kernel_dim": self.kernel_dim,
            "kernel_inclusion": {**self.kernel_inclusion.to_dict(), "raw_residual": self.kernel_raw_residual},
            "rank_condition": {**self.rank_condition.to_dict(), "rank_dpi": self.rank_dpi, "rank_o2": self.rank_o2},
            "wedge_condition": {
                **self.wedge_condition.to_dict(),
                "per_row": [r.to_dict() for r in self.wedge_rows],
                "combined": self.wedge_combined,
            },
            "min_singular_dpi": self.min_singular_dpi,
            "agree": self.agree,
        }


@dataclass
class FiberResult:
    status: str
    max_residual: float
    pairs: int
    skipped: int
    witness: tuple[list[float], list[float]] | None = None

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "max_residual": self.max_residual,
            "pairs": self.pairs,
            "skipped": self.skipped,
            "witness": None if self.witness is None else list(self.witness),
        }


@dataclass
class FirstIntegralResult:
    detected: bool
    max_pushforward: float
    rank_one_everywhere: bool

    def to_dict(self) -> dict:
        return {
            "detected": self.detected,
            "max_pushforward": self.max_pushforward,
            "rank_one_everywhere": self.rank_one_everywhere,
        }


@dataclass
class FlowResult:
    status: str
    max_error: float
    x0: list[float]
    times: list[float]
    errors: list[float]
    message: str = ""
    max_image_offset: float = 0.0

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "max_error": self.max_error,
            "max_image_offset": self.max_image_offset,
            "x0": self.x0,
            "times": self.times,
            "errors": self.errors,
            "message": self.message,
        }


@dataclass
class CheckReport:
    verdict: str
    pass_rates: dict[str, float]
    worst: dict[str, dict]
    points: list[PointVerdict]
    disagreements: int
    fiber_constancy: FiberResult | None = None
    first_integral: FirstIntegralResult | None = None
    flow_commutation: FlowResult | None = None
    sampler: dict = field(default_factory=dict)
    min_singular_dpi: float = float("nan")

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "pass_rates": self.pass_rates,
            "worst": self.worst,
            "disagreements": self.disagreements,
            "fiber_constancy": None if self.fiber_constancy is None else self.fiber_constancy.to_dict(),
            "first_integral": None if self.first_integral is None else self.first_integral.to_dict(),
            "flow_commutation": None if self.flow_commutation is None else self.flow_commutation.to_dict(),
            "sampler": self.sampler,
            "min_singular_dpi": self.min_singular_dpi,
            "points": [pv.to_dict() for pv in self.points],
        }


# --------------------------------------------------------------------------
# Sampling


def project_point(p: LumpingProblem, x) -> np.ndarray:
    """Gauss-Newton projection of ``x`` onto the constraint set (identity if none)."""
    if p.constraints is None:
        return np.asarray(x, dtype=float)
    tol = p.tolerances.constraint_tol
    xp, _, _ = gauss_newton(p.constraints.value_and_jacobian, x, tol=0.1 * tol, rank_tol=p.tolerances.rank_tol)
    return xp


def _admissible(p: LumpingProblem, x) -> bool:
    try:
        return all(r.evaluate(x) >= 0 for r in p.sample.require)
    except DomainError:
        return False


def sample_points(p: LumpingProblem, count: int | None = None, seed: int | None = None) -> tuple[np.ndarray, dict]:
    """Draw on-manifold, admissible sample points.

    Returns ``(points, stats)`` where ``stats`` counts draws, projection
    failures and points rejected by the ``require`` filters.
    """
    s = p.sample
    count = s.count if count is None else count
    rng = np.random.default_rng(s.seed if seed is None else seed)
    lower, upper = np.array(s.lower, dtype=float), np.array(s.upper, dtype=float)
    points, failures, excluded, draws = [], 0, 0, 0
    candidates = iter(s.seeds)
    max_draws = 50 * count + len(s.seeds)
    while len(points) < count and draws < max_draws:
        draws += 1
        raw = next(candidates, None)
        x = rng.uniform(lower, upper) if raw is None else np.asarray(raw, dtype=float)
        try:
            x = project_point(p, x)
        except (ConvergenceError, ArithmeticError):
            failures += 1
            continue
        if not _admissible(p, x):
            excluded += 1
            continue
        points.append(x)
    stats = {"requested": count, "returned": len(points), "draws": draws, "projection_failures": failures, "excluded": excluded}
    return np.array(points).reshape(-1, p.n), stats


# --------------------------------------------------------------------------
# Pointwise criteria


@dataclass
class _PointData:
    Dpi: np.ndarray
    lvd: np.ndarray
    kernel: np.ndarray
    tangent: np.ndarray
    min_singular: float
    tangency: float


def _point_data(p: LumpingProblem, x) -> _PointData:
    tol = p.tolerances
    x = np.asarray(x, dtype=float)
    Dpi, smin = check_submersion(p.pi, x, tol.rank_tol)
    L = lvd(p.pi, p.v, x)
    if p.constraints is None:
        return _PointData(Dpi, L, linalg.nullspace(Dpi, tol.rank_tol), np.eye(p.n), smin, 0.0)
    gv, Dg = p.constraints.value_and_jacobian(x)
    if np.linalg.norm(gv) >= tol.constraint_tol:
        raise OffManifoldError(f"|g(x)| = {np.linalg.norm(gv):.3e} at x = {x.tolist()}")
    vx = p.v(x)
    tangency = float(np.linalg.norm(Dg @ vx))
    if tangency > tol.residual_tol * (1 + np.linalg.norm(vx)):
        raise TangencyError(f"|Dg v| = {tangency:.3e} at x = {x.tolist()}: field leaves the constraint manifold")
    kernel = vertical_kernel(p.pi, p.constraints, x, tol.rank_tol, tol.constraint_tol)
    tangent = linalg.nullspace(Dg, tol.rank_tol).T
    return _PointData(Dpi, L, kernel, tangent, smin, tangency)


def _kernel_inclusion(p: LumpingProblem, d: _PointData) -> tuple[CriterionResult, float]:
    if d.kernel.shape[0] == 0:
        return CriterionResult(PASS, 0.0), 0.0
    raw = float(np.max(np.linalg.norm(d.kernel @ d.lvd.T, axis=-1)))
    residual = raw / (1.0 + float(np.linalg.norm(d.lvd, 2)))
    return CriterionResult(classify(residual, p.tolerances.residual_tol), residual), raw


def _rank_condition(p: LumpingProblem, d: _PointData) -> tuple[CriterionResult, int, int]:
    tol = p.tolerances.rank_tol
    base = d.Dpi @ d.tangent
    o2 = np.vstack([base, d.lvd @ d.tangent])
    r, r2 = linalg.rank(base, tol), linalg.rank(o2, tol)
    margin = linalg.rank_margin(o2, r)
    return CriterionResult(classify(margin, tol), margin), r, r2


def _wedge_condition(p: LumpingProblem, d: _PointData) -> tuple[CriterionResult, list[CriterionResult], bool]:
    tol = p.tolerances.rank_tol
    base = d.Dpi @ d.tangent
    rows = d.lvd @ d.tangent
    r = linalg.rank(base, tol)
    # On a constraint manifold the restricted Dpi may legitimately drop rank
    # (e.g. R^4 -> R^3 restricted to S^3), so full row rank is only demanded
    # in the unconstrained case.
    full = p.constraints is None
    per_row = []
    for row in rows:
        preserved = linalg.augmented_rank_preserved(base, row, tol, require_full_rank=full)
        margin = linalg.rank_margin(np.vstack([base, row]), r)
        status = classify(margin, tol)
        if preserved and status == FAIL:
            status = BORDERLINE
        per_row.append(CriterionResult(status, margin))
    worst = max(per_row, key=lambda c: c.residual)
    combined = linalg.rank(np.vstack([base, rows]), tol) == r
    return CriterionResult(worst.status, worst.residual), per_row, combined


def check_kernel_inclusion(p: LumpingProblem, x) -> CriterionResult:
    """``max |lvd w| / (1 + |lvd|)`` over an orthonormal basis ``w`` of the fiber directions."""
    return _kernel_inclusion(p, _point_data(p, x))[0]


def check_rank_condition(p: LumpingProblem, x) -> CriterionResult:
    """Rank of ``[Dpi; lvd]`` against rank of ``Dpi``, both restricted to the tangent space."""
    return _rank_condition(p, _point_data(p, x))[0]


def check_wedge_condition(p: LumpingProblem, x) -> CriterionResult:
    """Each ``lvd`` row separately appended to ``Dpi`` must keep the rank."""
    return _wedge_condition(p, _point_data(p, x))[0]


def analyze_point(p: LumpingProblem, x) -> PointVerdict:
    """All three pointwise criteria at ``x`` from one set of derivatives."""
    x = np.asarray(x, dtype=float)
    d = _point_data(p, x)
    ki, raw = _kernel_inclusion(p, d)
    rc, r, r2 = _rank_condition(p, d)
    wc, rows, combined = _wedge_condition(p, d)
    return PointVerdict(
        point=x,
        kernel_dim=int(d.kernel.shape[0]),
        kernel_inclusion=ki,
        kernel_raw_residual=raw,
        rank_condition=rc,
        rank_dpi=r,
        rank_o2=r2,
        wedge_condition=wc,
        wedge_rows=rows,
        wedge_combined=combined,
        min_singular_dpi=d.min_singular,
        tangency_residual=d.tangency,
    )


# --------------------------------------------------------------------------
# Fibers


def _fiber_residual(p: LumpingProblem, y: np.ndarray):
    def F(x):
        val, J = p.pi.value_and_jacobian(x)
        r = val - y
        if p.constraints is not None:
            gv, Dg = p.constraints.value_and_jacobian(x)
            r = np.concatenate([r, gv])
            J = np.vstack([J, Dg])
        return r, J

    return F


def _solve_fiber(p: LumpingProblem, y, x_start, max_iter: int = 50, accept_tol: float | None = None) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    tol = 0.1 * p.tolerances.constraint_tol
    try:
        x, _, _ = gauss_newton(
            _fiber_residual(p, y),
            x_start,
            tol=tol,
            max_iter=max_iter,
            rank_tol=p.tolerances.rank_tol,
            max_step=1.0 + float(np.linalg.norm(x_start)),
            accept_tol=accept_tol,
        )
    except ConvergenceError as exc:
        raise FiberSolveError(f"no fiber point for y = {y.tolist()}: {exc}") from exc
    except ArithmeticError as exc:
        raise FiberSolveError(f"no fiber point for y = {y.tolist()}: {exc}") from exc
    return x


def sample_fiber(
    p: LumpingProblem,
    x,
    count: int,
    rng: np.random.Generator | None = None,
    step: float | None = None,
    max_iter: int = 50,
) -> tuple[np.ndarray, int]:
    """Points on the fiber through ``x``, found by random vertical steps plus projection.

    Each step goes a random length along a random direction of the
    vertical kernel; Gauss-Newton then returns to ``{pi = pi(x)}`` (and
    ``{g = 0}``). A failed projection is retried with half the step up to
    five times before the draw is dropped.

    Returns ``(points, dropped)``.
    """
    x = np.asarray(x, dtype=float)
    rng = np.random.default_rng(0) if rng is None else rng
    tol = p.tolerances
    K = vertical_kernel(p.pi, p.constraints, x, tol.rank_tol, tol.constraint_tol)
    y = p.pi(x)
    step = 0.25 * (1.0 + float(np.linalg.norm(x))) if step is None else step
    points, dropped = [], 0
    for _ in range(count):
        if K.shape[0] == 0:
            dropped += 1
            continue
        direction = rng.standard_normal(K.shape[0]) @ K
        direction /= np.linalg.norm(direction)
        h = step * rng.uniform(0.2, 1.0)
        for _ in range(6):
            try:
                xf = _solve_fiber(p, y, x + h * direction, max_iter=max_iter)
            except FiberSolveError:
                h *= 0.5
                continue
            points.append(xf)
            break
        else:
            dropped += 1
    return np.array(points).reshape(-1, p.n), dropped


def fiber_pairs(p: LumpingProblem, points, per_point: int = 2, seed: int = 1) -> tuple[list[tuple[np.ndarray, np.ndarray]], int]:
    """Pairs ``(x, x')`` on common fibers for the first ``p.fiber_points`` points."""
    rng = np.random.default_rng([p.sample.seed, seed])
    pairs, dropped = [], 0
    for x in np.asarray(points)[: p.fiber_points]:
        try:
            fib, d = sample_fiber(p, x, per_point, rng)
        except (SubmersionError, OffManifoldError):
            dropped += per_point
            continue
        dropped += d
        pairs.extend((x, xf) for xf in fib)
    return pairs, dropped


def check_fiber_constancy(p: LumpingProblem, pairs: Sequence, skipped: int = 0) -> FiberResult:
    """``Dpi v`` must agree at both ends of every same-fiber pair."""
    tol = p.tolerances.residual_tol
    worst, witness = 0.0, None
    for x, xf in pairs:
        x, xf = np.asarray(x, dtype=float), np.asarray(xf, dtype=float)
        gap = float(np.linalg.norm(p.pi(x) - p.pi(xf)))
        if gap >= tol:
            raise ValueError(f"pair is not on one fiber: |pi(x) - pi(x')| = {gap:.3e}")
        a, b = pushforward(p.pi, p.v, x), pushforward(p.pi, p.v, xf)
        r = float(np.linalg.norm(a - b)) / (1.0 + float(np.linalg.norm(a)))
        if r > worst or witness is None:
            worst, witness = max(worst, r), (x.tolist(), xf.tolist())
    if not pairs:
        return FiberResult(BORDERLINE, float("nan"), 0, skipped)
    return FiberResult(classify(worst, tol), worst, len(pairs), skipped, witness)


# --------------------------------------------------------------------------
# First integrals and the lumped field


def detect_first_integral(p: LumpingProblem, points) -> FirstIntegralResult:
    """Is the scalar ``pi`` conserved (``Dpi v = 0``) with ``rank Dpi = 1`` at every point?"""
    if p.m != 1:
        raise ValueError("first-integral detection needs a scalar lumping map")
    points = np.asarray(points, dtype=float).reshape(-1, p.n)
    if len(points) == 0:
        raise ValueError("no sample points")
    push = np.abs(pushforward(p.pi, p.v, points)[:, 0])
    ranks = [linalg.rank(J, p.tolerances.rank_tol) for J in p.pi.jacobian(points)]
    rank_one = all(r == 1 for r in ranks)
    worst = float(np.max(push))
    return FirstIntegralResult(rank_one and worst < p.tolerances.residual_tol, worst, rank_one)


class LumpedField:
    """Macro field ``y -> Dpi_x v(x)`` for any ``x`` with ``pi(x) = y`` and ``g(x) = 0``.

    ``method`` is ``"fiber-solve"`` (Gauss-Newton from the nearest cached
    fiber point) or ``"closed-form"`` (identically zero, for first
    integrals). Solved fiber points are cached; inserts take a lock so the
    field may be shared between threads.

    By default a target outside the reachable image raises
    :class:`FiberSolveError`. With ``reach_tol`` set, targets within that
    distance of the image are evaluated at their least-squares fiber point,
    i.e. the field is extended by its value at the nearest image point.
    Flow integration needs this because Runge-Kutta stage points leave a
    curved image by O(h^2). The largest accepted offset is kept in
    ``max_offset``.
    """

    def __init__(
        self, problem: LumpingProblem, method: str, seeds=(), reach_tol: float | None = None, max_iter: int = 100
    ):
        if method not in ("fiber-solve", "closed-form"):
            raise ValueError(f"unknown method {method!r}")
        self.problem = problem
        self.method = method
        self.reach_tol = reach_tol
        self.max_iter = max_iter
        self._lock = threading.Lock()
        seeds = np.asarray(seeds, dtype=float).reshape(-1, problem.n)
        self._xs = [x for x in seeds]
        self._ys = [problem.pi(x) for x in seeds]
        self.seed_count = len(self._xs)
        self.max_offset = 0.0
        if method == "fiber-solve" and not self._xs:
            raise ValueError("fiber-solve needs at least one seed point")

    @property
    def dim(self) -> int:
        return self.problem.m

    @property
    def cache_size(self) -> int:
        return len(self._xs)

    def _nearest(self, y: np.ndarray) -> np.ndarray:
        ys = np.asarray(self._ys)
        k = int(np.argmin(np.linalg.norm(ys - y, axis=1)))
        return self._xs[k]

    def fiber_point(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if y.shape != (self.dim,):
            raise ValueError(f"y must have shape ({self.dim},)")
        start = self._nearest(y)
        x = _solve_fiber(self.problem, y, start, max_iter=self.max_iter, accept_tol=self.reach_tol)
        y_hit = self.problem.pi(x)
        with self._lock:
            self._xs.append(x)
            self._ys.append(y_hit)
            self.max_offset = max(self.max_offset, float(np.linalg.norm(y_hit - y)))
        return x

    def __call__(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if self.method == "closed-form":
            return np.zeros(self.dim)
        x = self.fiber_point(y)
        return pushforward(self.problem.pi, self.problem.v, x)

    def evaluate_many(self, ys) -> tuple[np.ndarray, int]:
        """Evaluate at each row of ``ys``; unreachable rows become NaN. Returns ``(values, failures)``."""
        ys = np.asarray(ys, dtype=float).reshape(-1, self.dim)
        out = np.full(ys.shape, np.nan)
        failures = 0
        for k, y in enumerate(ys):
            try:
                out[k] = self(y)
            except FiberSolveError:
                failures += 1
        return out, failures


def _seed_points(p: LumpingProblem, anchors=None) -> np.ndarray:
    seeds = []
    if p.fiber_seed is not None:
        seeds.append(project_point(p, p.fiber_seed))
    if anchors is not None:
        seeds.extend(np.asarray(anchors, dtype=float).reshape(-1, p.n))
    if not seeds:
        pts, _ = sample_points(p, count=1)
        seeds.extend(pts)
    return np.array(seeds).reshape(-1, p.n)


def construct_lumped_field(
    p: LumpingProblem,
    anchors=None,
    first_integral: FirstIntegralResult | None = None,
    reach_tol: float | None = None,
) -> LumpedField:
    """Build the lumped field ``y -> Dpi_x v(x)`` with ``x`` in the fiber over ``y``.

    A detected first integral gives the zero field directly. Otherwise
    fiber points are solved from ``p.fiber_seed``, any ``anchors`` (known
    on-manifold points), or a sampled point if neither is given.
    ``reach_tol`` is passed to :class:`LumpedField`.
    """
    if first_integral is not None and first_integral.detected:
        return LumpedField(p, "closed-form")
    return LumpedField(p, "fiber-solve", _seed_points(p, anchors), reach_tol=reach_tol)


# --------------------------------------------------------------------------
# Flow comparison and aggregation


def _flow_check(p: LumpingProblem, lumped: LumpedField, x0) -> FlowResult:
    x0 = np.asarray(x0, dtype=float)
    times = np.linspace(0.0, p.flow.t_end, max(p.flow.points, 2))
    try:
        worst, errors = flow_commutation_error(p, lumped, x0, times)
    except (IntegrationError, FiberSolveError) as exc:
        return FlowResult("error", float("nan"), x0.tolist(), times.tolist(), [], str(exc))
    return FlowResult(
        classify(worst, p.tolerances.flow_tol),
        worst,
        x0.tolist(),
        times.tolist(),
        errors.tolist(),
        max_image_offset=lumped.max_offset,
    )


def _worst(entries):
    worst = max(entries, key=lambda e: e[0], default=(float("nan"), None))
    return {"residual": worst[0], "witness": None if worst[1] is None else worst[1].tolist()}


def aggregate(
    p: LumpingProblem,
    verdicts: Sequence[PointVerdict],
    flow_result: FlowResult | None = None,
    fiber_result: FiberResult | None = None,
    first_integral: FirstIntegralResult | None = None,
    sampler: dict | None = None,
) -> CheckReport:
    """Combine per-point verdicts and global checks into one decision.

    ``lumpable`` needs every criterion to pass everywhere (and the flow
    and fiber checks, when run). ``not-lumpable`` needs a decisive failure
    with a witness and no criterion disagreement. Everything else, including
    a failure fraction above 10% in sampling, is ``inconclusive``.
    """
    if not verdicts:
        raise ValueError("no point verdicts to aggregate")
    sampler = dict(sampler or {})
    n = len(verdicts)
    names = ("kernel_inclusion", "rank_condition", "wedge_condition")
    pass_rates = {k: sum(getattr(v, k).passed for v in verdicts) / n for k in names}
    worst = {k: _worst([(getattr(v, k).residual, v.point) for v in verdicts]) for k in names}
    statuses = [s for v in verdicts for s in v.statuses]
    if fiber_result is not None:
        pass_rates["fiber_constancy"] = float(fiber_result.status == PASS)
        worst["fiber_constancy"] = {"residual": fiber_result.max_residual, "witness": fiber_result.witness}
        statuses.append(fiber_result.status)
    if flow_result is not None:
        pass_rates["flow_commutation"] = float(flow_result.status == PASS)
        worst["flow_commutation"] = {"residual": flow_result.max_error, "witness": flow_result.x0}
        statuses.append(BORDERLINE if flow_result.status == "error" else flow_result.status)

    disagreements = sum(not v.agree for v in verdicts)
    attempted = sampler.get("draws", n) + sampler.get("fiber_draws", 0)
    failed = sampler.get("projection_failures", 0) + sampler.get("submersion_failures", 0) + sampler.get("fiber_dropped", 0)
    failure_fraction = failed / attempted if attempted else 0.0
    sampler["failure_fraction"] = failure_fraction

    if disagreements:
        verdict = "inconclusive"
    elif FAIL in statuses:
        verdict = "not-lumpable"
    elif BORDERLINE in statuses or failure_fraction > MAX_FAILURE_FRACTION:
        verdict = "inconclusive"
    else:
        verdict = "lumpable"
    return CheckReport(
        verdict=verdict,
        pass_rates=pass_rates,
        worst=worst,
        points=list(verdicts),
        disagreements=disagreements,
        fiber_constancy=fiber_result,
        first_integral=first_integral,
        flow_commutation=flow_result,
        sampler=sampler,
        min_singular_dpi=float(min(v.min_singular_dpi for v in verdicts)),
    )


def _analyze_or_none(p: LumpingProblem, x) -> PointVerdict | None:
    try:
        return analyze_point(p, x)
    except SubmersionError:
        return None


def check(p: LumpingProblem, run_flow: bool = True, workers: int = 1) -> CheckReport:
    """Run the full lumpability check on ``p``.

    Parameters
    ----------
    p : LumpingProblem
    run_flow : bool
        Also integrate micro and macro flows and compare them.
    workers : int
        Threads for the pointwise criteria. Results keep sample order, so
        the report does not depend on this value.
    """
    points, stats = sample_points(p)
    if len(points) == 0:
        raise ValueError("sampler produced no admissible points")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda x: _analyze_or_none(p, x), points))
    else:
        results = [_analyze_or_none(p, x) for x in points]
    verdicts = [v for v in results if v is not None]
    submersion_failures = len(results) - len(verdicts)
    stats["submersion_failures"] = submersion_failures
    good = np.array([v.point for v in verdicts]).reshape(-1, p.n)

    pairs, dropped = fiber_pairs(p, good)
    stats["fiber_draws"] = len(pairs) + dropped
    stats["fiber_dropped"] = dropped
    fiber_result = check_fiber_constancy(p, pairs, dropped)

    first_integral = detect_first_integral(p, good) if p.m == 1 and len(good) else None
    flow_result = None
    if run_flow and len(good):
        x0 = good[0] if p.flow.x0 is None else project_point(p, p.flow.x0)
        lumped = construct_lumped_field(p, first_integral=first_integral, reach_tol=FLOW_REACH_TOL)
        flow_result = _flow_check(p, lumped, x0)
    if not verdicts:
        raise ValueError("no sample point passed the submersion check")
    return aggregate(p, verdicts, flow_result, fiber_result, first_integral, stats)
