import threading

import numpy as np
import pytest

from exactlump.geometry import SmoothMap, VectorField, pushforward
from exactlump.lumpability import (
    BORDERLINE,
    FAIL,
    PASS,
    CriterionResult,
    FiberSolveError,
    LumpingProblem,
    SampleSpec,
    TangencyError,
    Tolerances,
    aggregate,
    analyze_point,
    check,
    check_fiber_constancy,
    check_kernel_inclusion,
    check_rank_condition,
    check_wedge_condition,
    classify,
    construct_lumped_field,
    detect_first_integral,
    fiber_pairs,
    sample_fiber,
    sample_points,
)
from exactlump.expr import parse
from exactlump.systems import (
    geodesic_problem,
    hopf_map,
    hopf_problem,
    linear_problem,
    logistic_problem,
    u1_action,
)

SHEAR = dict(A=[[0, 1], [0, 0]], C=[[1, 0]])


@pytest.fixture(scope="module")
def hopf():
    return hopf_problem([1.0, 2.0, 3.0])


@pytest.fixture(scope="module")
def shear():
    return linear_problem(**SHEAR, x0=(1.0, 1.0), t_end=0.5)


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


# --------------------------------------------------------------------------
# problem definition and sampling


def test_classify_bands():
    assert classify(1e-9, 1e-8) == PASS
    assert classify(5e-8, 1e-8) == BORDERLINE
    assert classify(1e-8, 1e-8) == BORDERLINE
    assert classify(2e-7, 1e-8) == FAIL


def test_problem_validation():
    v = VectorField.from_sources(["x1", "x2"], ("x1", "x2"))
    box = SampleSpec((0.0, 0.0), (1.0, 1.0))
    with pytest.raises(ValueError, match="reduce dimension"):
        LumpingProblem(v, SmoothMap.from_sources(["x1", "x2"], ("x1", "x2")), box)
    with pytest.raises(ValueError, match="finite"):
        LumpingProblem(v, SmoothMap.from_sources(["x1"], ("x1", "x2")), SampleSpec((0.0, -np.inf), (1.0, 1.0)))
    with pytest.raises(ValueError, match="lower > upper"):
        LumpingProblem(v, SmoothMap.from_sources(["x1"], ("x1", "x2")), SampleSpec((2.0, 0.0), (1.0, 1.0)))
    with pytest.raises(ValueError, match="fiber_seed"):
        LumpingProblem(v, SmoothMap.from_sources(["x1"], ("x1", "x2")), box, fiber_seed=(0.0,))


def test_logistic_needs_reduction():
    with pytest.raises(ValueError):
        logistic_problem([1.0])
    with pytest.raises(ValueError):
        logistic_problem([0.0, 0.0])


def test_sampler_projects_and_filters():
    p = geodesic_problem()
    pts, stats = sample_points(p, count=100, seed=3)
    assert len(pts) == 100 and stats["returned"] == 100
    assert np.abs(p.constraints(pts)).max() < p.tolerances.constraint_tol
    assert np.all(np.linalg.norm(pts[:, 3:], axis=1) >= 0.1 - 1e-12)
    assert stats["draws"] == 100 + stats["excluded"] + stats["projection_failures"]


def test_sampler_is_seeded():
    p = logistic_problem([1.0, 2.0])
    a, _ = sample_points(p, count=5, seed=4)
    b, _ = sample_points(p, count=5, seed=4)
    c, _ = sample_points(p, count=5, seed=5)
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_sampler_counts_exclusions():
    names = ("x1", "x2")
    p = LumpingProblem(
        v=VectorField.from_sources(["x1", "x2"], names),
        pi=SmoothMap.from_sources(["x1"], names),
        sample=SampleSpec((-1.0, -1.0), (1.0, 1.0), count=50, require=(parse("x1", names),)),
    )
    pts, stats = sample_points(p)
    assert np.all(pts[:, 0] >= 0)
    assert stats["excluded"] > 0


# --------------------------------------------------------------------------
# pointwise criteria


def test_kernel_inclusion_hopf(hopf):
    for x in [unit([1, 2, 3, 4]), unit([0.3, -0.1, 0.2, 0.9]), unit([1, 0, 0, 0])]:
        r = check_kernel_inclusion(hopf, x)
        assert r.status == PASS and r.residual < 1e-10


def test_kernel_inclusion_shear(shear):
    x = np.array([0.3, -0.7])
    verdict = analyze_point(shear, x)
    # w = (0, 1) and lvd = CA = (0, 1): |lvd w| = 1, normalized by 1 + |lvd| = 2.
    assert verdict.kernel_raw_residual == pytest.approx(1.0)
    assert verdict.kernel_inclusion.residual == pytest.approx(0.5)
    assert verdict.kernel_inclusion.status == FAIL


def test_criteria_pass_for_zero_field():
    names = ("x1", "x2", "x3")
    p = LumpingProblem(
        VectorField.from_sources(["0", "0", "0"], names),
        SmoothMap.from_sources(["x1*x2 + sin(x3)"], names),
        SampleSpec((0.5,) * 3, (1.0,) * 3),
    )
    x = [0.6, 0.7, 0.8]
    assert check_kernel_inclusion(p, x).status == PASS
    assert check_rank_condition(p, x).status == PASS
    assert detect_first_integral(p, [x]).detected


def test_rank_condition_examples(shear):
    ident = linear_problem(np.eye(2), [[1, 0]])
    v = analyze_point(ident, [0.2, 0.5])
    assert (v.rank_dpi, v.rank_o2, v.rank_condition.status) == (1, 1, PASS)
    v = analyze_point(shear, [0.2, 0.5])
    assert (v.rank_dpi, v.rank_o2, v.rank_condition.status) == (1, 2, FAIL)
    logistic = logistic_problem([1.0, 1.0, 1.0])
    for x in np.random.default_rng(0).uniform(0, 1, (10, 3)):
        v = analyze_point(logistic, x)
        assert (v.rank_dpi, v.rank_o2, v.rank_condition.status) == (1, 1, PASS)


def test_wedge_condition_examples(shear):
    logistic = logistic_problem([1.0, 1.0])
    assert check_wedge_condition(logistic, [0.3, 0.1]).status == PASS
    v = analyze_point(shear, [0.2, 0.5])
    assert v.wedge_rows[0].status == FAIL
    assert not v.wedge_combined


def test_wedge_reports_rows_and_combined():
    # m = 2: pi = (x1, x2) on R^3 with v = (x1, x3, 0). Row 1 of lvd is fine, row 2 is not.
    names = ("x1", "x2", "x3")
    p = LumpingProblem(
        VectorField.from_sources(["x1", "x3", "0"], names),
        SmoothMap.from_sources(["x1", "x2"], names),
        SampleSpec((-1.0,) * 3, (1.0,) * 3),
    )
    v = analyze_point(p, [0.1, 0.2, 0.3])
    assert [r.status for r in v.wedge_rows] == [PASS, FAIL]
    assert v.wedge_condition.status == FAIL
    assert not v.wedge_combined


@pytest.mark.parametrize("name", ["logistic3", "hopf", "geodesic_sphere", "linear_shear", "linear_identity"])
def test_criteria_agree_on_builtins(name):
    from exactlump.systems import builtin

    p = builtin(name)
    pts, _ = sample_points(p, count=40)
    for x in pts:
        v = analyze_point(p, x)
        assert v.agree
        assert len(set(v.statuses)) == 1
        assert v.rank_o2 >= v.rank_dpi


def test_tangency_is_enforced():
    names = ("x1", "x2", "x3")
    p = LumpingProblem(
        VectorField.from_sources(["x1", "x2", "x3"], names),  # radial, leaves the sphere
        SmoothMap.from_sources(["x3"], names),
        SampleSpec((-1.0,) * 3, (1.0,) * 3),
        constraints=SmoothMap.from_sources(["x1^2 + x2^2 + x3^2 - 1"], names),
    )
    with pytest.raises(TangencyError):
        analyze_point(p, unit([1, 1, 1]))


# --------------------------------------------------------------------------
# fibers


def test_fiber_constancy_hand_pairs(shear):
    logistic = logistic_problem([1.0, 1.0])
    r = check_fiber_constancy(logistic, [(np.array([0.3, 0.2]), np.array([0.1, 0.4]))])
    assert r.status == PASS and r.max_residual < 1e-15
    r = check_fiber_constancy(shear, [(np.array([1.0, 0.0]), np.array([1.0, 5.0]))])
    assert r.status == FAIL
    assert r.max_residual == pytest.approx(5.0)
    assert r.witness == ([1.0, 0.0], [1.0, 5.0])


def test_fiber_constancy_rejects_pairs_off_fiber(shear):
    with pytest.raises(ValueError, match="not on one fiber"):
        check_fiber_constancy(shear, [(np.array([1.0, 0.0]), np.array([2.0, 0.0]))])


def test_hopf_fiber_action_pairs(hopf):
    rng = np.random.default_rng(1)
    pairs = []
    for _ in range(20):
        x = unit(rng.standard_normal(4))
        pairs.append((x, u1_action(rng.uniform(0, 2 * np.pi), x)))
    r = check_fiber_constancy(hopf, pairs)
    assert r.status == PASS and r.max_residual < 1e-10


def test_sample_fiber_linear():
    p = linear_problem(np.eye(2), [[1, 0]])
    pts, dropped = sample_fiber(p, [0.3, 0.4], 10)
    assert dropped == 0 and len(pts) == 10
    assert np.all(pts[:, 0] == 0.3)


def test_sample_fiber_hopf_circle():
    p = hopf_problem()
    pts, dropped = sample_fiber(p, [1.0, 0.0, 0.0, 0.0], 20, np.random.default_rng(2))
    assert dropped == 0 and len(pts) == 20
    # The fiber through (1, 0, 0, 0) is (cos t, 0, 0, sin t).
    assert np.abs(pts[:, 1:3]).max() < 1e-8
    assert np.abs(np.hypot(pts[:, 0], pts[:, 3]) - 1).max() < 1e-8
    assert np.abs(hopf_map(pts) - [0, 0, 1]).max() < 1e-10


def test_fiber_pairs_are_on_common_fibers():
    p = logistic_problem([1.0, 2.0, 3.0])
    pts, _ = sample_points(p, count=10)
    pairs, dropped = fiber_pairs(p, pts)
    assert dropped == 0 and len(pairs) == 20
    for x, xf in pairs:
        assert abs(p.pi(x) - p.pi(xf))[0] < 1e-10


# --------------------------------------------------------------------------
# first integrals and the lumped field


def test_first_integral_detection():
    g = geodesic_problem()
    pts, _ = sample_points(g, count=50)
    fi = detect_first_integral(g, pts)
    assert fi.detected and fi.rank_one_everywhere
    lg = logistic_problem([1.0, 1.0, 1.0])
    pts, _ = sample_points(lg, count=50)
    assert not detect_first_integral(lg, pts).detected
    with pytest.raises(ValueError):
        detect_first_integral(hopf_problem(), [[1.0, 0.0, 0.0, 0.0]])


def test_first_integral_rank_drops_on_stationary_set():
    g = geodesic_problem()
    fi = detect_first_integral(g, [[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]])
    assert not fi.rank_one_everywhere and not fi.detected


def test_logistic_lumped_field_on_grid():
    p = logistic_problem([1.0, 1.0, 1.0])
    lumped = construct_lumped_field(p)
    ys = np.round(np.arange(0, 2.0001, 0.1), 12)
    vals = np.array([lumped([y])[0] for y in ys])
    np.testing.assert_allclose(vals, ys * (1 - ys), atol=1e-8)
    assert abs(lumped([0.0])[0]) < 1e-10 and abs(lumped([1.0])[0]) < 1e-10
    assert lumped.cache_size > 1


def test_hopf_lumped_field(hopf):
    c = np.array([1.0, 2.0, 3.0])
    lumped = construct_lumped_field(hopf)
    rng = np.random.default_rng(3)
    ys = np.array([unit(rng.standard_normal(3)) for _ in range(30)])
    vals, failures = lumped.evaluate_many(ys)
    assert failures == 0
    np.testing.assert_allclose(vals, 2 * np.cross(c, ys), atol=1e-8)
    assert np.abs(np.sum(vals * ys, axis=1)).max() < 1e-8


def test_lumped_field_refuses_points_off_image(hopf):
    lumped = construct_lumped_field(hopf)
    with pytest.raises(FiberSolveError):
        lumped([0.0, 0.0, 2.0])
    vals, failures = lumped.evaluate_many([[0.0, 0.0, 2.0], [0.0, 0.0, 1.0]])
    assert failures == 1 and np.isnan(vals[0]).all() and np.isfinite(vals[1]).all()


def test_lumped_field_with_reach_extends_to_nearest_image_point(hopf):
    lumped = construct_lumped_field(hopf, reach_tol=0.05)
    val = lumped([0.0, 0.0, 1.01])
    # The least-squares point splits the 0.01 gap between the sphere and the image.
    np.testing.assert_allclose(val, 2 * np.cross([1.0, 2.0, 3.0], [0, 0, 1]), atol=0.05)
    assert 0 < lumped.max_offset < 0.05
    with pytest.raises(FiberSolveError):
        lumped([0.0, 0.0, 1.5])


def test_first_integral_gives_zero_field():
    g = geodesic_problem()
    pts, _ = sample_points(g, count=20)
    lumped = construct_lumped_field(g, first_integral=detect_first_integral(g, pts))
    assert lumped.method == "closed-form"
    assert not lumped([0.7]).any()


def test_lumped_field_matches_pushforward_at_fresh_points():
    for p in (logistic_problem([0.5, 1.5, 2.0]), hopf_problem([0.2, -0.4, 0.1])):
        lumped = construct_lumped_field(p)
        fresh, _ = sample_points(p, count=25, seed=123)
        for x in fresh:
            assert np.linalg.norm(lumped(p.pi(x)) - pushforward(p.pi, p.v, x)) < p.tolerances.residual_tol


def test_lumped_field_is_thread_safe(hopf):
    rng = np.random.default_rng(4)
    ys = np.array([unit(rng.standard_normal(3)) for _ in range(40)])
    reference = construct_lumped_field(hopf).evaluate_many(ys)[0]
    shared = construct_lumped_field(hopf)
    results = [None] * 4

    def work(k):
        results[k] = shared.evaluate_many(ys[k::4])[0]

    threads = [threading.Thread(target=work, args=(k,)) for k in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for k in range(4):
        np.testing.assert_allclose(results[k], reference[k::4], atol=1e-9)
    assert shared.cache_size == 1 + len(ys)


# --------------------------------------------------------------------------
# aggregation and the full check


def test_aggregate_needs_points(shear):
    with pytest.raises(ValueError):
        aggregate(shear, [])


def test_aggregate_flags_disagreement(shear):
    v = analyze_point(shear, [0.2, 0.5])
    v.rank_condition = CriterionResult(PASS, 0.0)
    report = aggregate(shear, [v])
    assert report.disagreements == 1 and report.verdict == "inconclusive"


def test_aggregate_high_failure_fraction_is_inconclusive():
    p = linear_problem(np.eye(2), [[1, 0]])
    v = analyze_point(p, [0.2, 0.5])
    report = aggregate(p, [v], sampler={"draws": 10, "projection_failures": 2})
    assert report.verdict == "inconclusive"
    assert report.sampler["failure_fraction"] == pytest.approx(0.2)


def test_shear_not_lumpable_with_witness(shear):
    report = check(shear)
    assert report.verdict == "not-lumpable"
    for name in ("kernel_inclusion", "rank_condition", "wedge_condition", "fiber_constancy", "flow_commutation"):
        assert report.pass_rates[name] == 0.0
        assert report.worst[name]["witness"] is not None
        assert report.worst[name]["residual"] > 10 * shear.tolerances.residual_tol
    assert report.flow_commutation.max_error > 0.1


def test_borderline_coupling_is_inconclusive():
    eps = 3e-8
    p = linear_problem([[0, eps], [0, 0]], [[1, 0]], x0=(1.0, 1.0), t_end=0.5)
    report = check(p)
    assert report.verdict == "inconclusive"
    assert set(report.points[0].statuses) == {BORDERLINE}


@pytest.mark.parametrize("builder", [lambda: logistic_problem([1.0, 1.0, 1.0]), geodesic_problem])
def test_lumpable_builtins(builder):
    report = check(builder())
    assert report.verdict == "lumpable"
    assert all(rate == 1.0 for rate in report.pass_rates.values())
    assert report.disagreements == 0


def test_workers_do_not_change_the_report():
    p = logistic_problem([1.0, 2.0, 0.5], samples=60)
    a = check(p, run_flow=False, workers=1).to_dict()
    b = check(p, run_flow=False, workers=4).to_dict()
    assert a == b


def test_check_reports_minimum_singular_value():
    p = logistic_problem([3.0, 4.0], samples=20)
    report = check(p, run_flow=False)
    assert report.min_singular_dpi == pytest.approx(5.0)
    assert report.flow_commutation is None


def test_tolerances_are_configurable():
    t = Tolerances(rank_tol=1e-6)
    assert t.rank_tol == 1e-6 and t.residual_tol == 1e-8
