import numpy as np
import pytest

from exactlump.flows import IntegrationError, flow_jacobian, integrate, lvd_oracle
from exactlump.geometry import SmoothMap, VectorField, lvd
from exactlump.systems import geodesic_problem, hopf_generator


def logistic(y):
    return y * (1 - y)


def logistic_exact(y0, t):
    return 1.0 / (1.0 + (1.0 / y0 - 1.0) * np.exp(-t))


def test_logistic_closed_form():
    traj = integrate(logistic, [0.5], 1.0)
    assert traj.final[0] == pytest.approx(1 / (1 + np.exp(-1.0)), abs=1e-8)
    assert traj.accepted > 0
    assert np.all(np.diff(traj.times) > 0)


def test_backward_integration():
    traj = integrate(logistic, [0.5], -1.0)
    assert traj.final[0] == pytest.approx(logistic_exact(0.5, -1.0), abs=1e-8)
    assert traj(-0.5)[0] == pytest.approx(logistic_exact(0.5, -0.5), abs=1e-7)


def test_zero_field_is_constant():
    traj = integrate(lambda x: np.zeros_like(x), [1.0, 2.0], 3.0)
    assert np.all(traj.states == [1.0, 2.0])


def test_dense_output_and_stops():
    grid = np.linspace(0, 2, 9)
    traj = integrate(logistic, [0.1], 2.0, t_stops=grid)
    assert set(np.round(grid, 12)) <= set(np.round(traj.times, 12))
    np.testing.assert_allclose(traj(grid)[:, 0], logistic_exact(0.1, grid), atol=1e-9)
    # Between nodes the cubic Hermite interpolant is accurate to O(h^4).
    mid = 0.5 * (traj.times[1:] + traj.times[:-1])
    np.testing.assert_allclose(traj(mid)[:, 0], logistic_exact(0.1, mid), atol=1e-6)
    with pytest.raises(ValueError):
        traj(2.5)


def test_rk4_fourth_order():
    errors = []
    for h in (0.1, 0.05, 0.025):
        traj = integrate(logistic, [0.2], 2.0, method="rk4", step=h)
        errors.append(abs(traj.final[0] - logistic_exact(0.2, 2.0)))
    ratios = [errors[0] / errors[1], errors[1] / errors[2]]
    for r in ratios:
        assert 14 < r < 18


def test_rk4_lands_on_end_time():
    traj = integrate(logistic, [0.2], 1.0, method="rk4", step=0.3)
    assert traj.t_end == pytest.approx(1.0)
    assert traj.min_step == pytest.approx(0.1)


def test_bad_arguments():
    with pytest.raises(ValueError):
        integrate(logistic, [0.2], 1.0, method="euler")
    with pytest.raises(ValueError):
        integrate(logistic, [0.2], 1.0, method="rk4")
    with pytest.raises(ValueError):
        integrate(logistic, [np.nan], 1.0)
    with pytest.raises(IntegrationError, match="shape"):
        integrate(lambda x: np.zeros(3), [0.2], 1.0)


def test_blow_up_is_flagged():
    # y' = y^2 from y0 = 1 blows up at t = 1.
    traj = integrate(lambda y: y * y, [1.0], 2.0)
    assert traj.blew_up
    assert traj.t_end < 1.0


def test_step_limit():
    with pytest.raises(IntegrationError, match="exceeded"):
        integrate(logistic, [0.2], 10.0, max_steps=3)


def test_great_circle_period():
    p = geodesic_problem()
    x0 = np.array([1.0, 0.0, 0.0, 0.0, 0.6, 0.8])
    traj = integrate(p.v, x0, 2 * np.pi, constraints=p.constraints)
    assert np.linalg.norm(traj.final - x0) < 1e-6
    assert max(traj.constraint_drift) < 1e-6


def test_geodesic_conserves_speed_and_constraints():
    p = geodesic_problem()
    rng = np.random.default_rng(0)
    for _ in range(3):
        X = rng.standard_normal(3)
        X /= np.linalg.norm(X)
        V = np.cross(X, rng.standard_normal(3))
        x0 = np.concatenate([X, V])
        traj = integrate(p.v, x0, 10.0, constraints=p.constraints)
        speed = p.pi(traj.states)[:, 0]
        assert np.abs(speed - speed[0]).max() < 1e-6
        assert max(traj.constraint_drift) < 1e-6


def test_projection_keeps_trajectory_on_manifold():
    p = geodesic_problem()
    x0 = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
    traj = integrate(p.v, x0, 10.0, method="rk4", step=0.05, constraints=p.constraints, project=True)
    assert max(traj.constraint_drift) < 1e-10


def test_hopf_rotation_conserves_norm():
    v = hopf_generator([0.3, -0.2, 0.9])
    x0 = np.array([0.5, 0.5, 0.5, 0.5])
    traj = integrate(v, x0, 2 * np.pi)
    assert np.abs(np.linalg.norm(traj.states, axis=1) - 1).max() < 1e-8


def test_flow_jacobian_linear():
    A = np.array([[0.0, 1.0], [-2.0, -0.3]])
    v = VectorField.from_sources(["x2", "(-2)*x1 - 0.3*x2"], ("x1", "x2"))
    x, W = flow_jacobian(v, [1.0, 0.0], 0.7)
    # matrix exponential by scaling and squaring of a Taylor series
    E = np.eye(2)
    term = np.eye(2)
    B = A * 0.7 / 64
    for k in range(1, 20):
        term = term @ B / k
        E = E + term
    for _ in range(6):
        E = E @ E
    np.testing.assert_allclose(W, E, atol=1e-10)
    np.testing.assert_allclose(x, E @ [1.0, 0.0], atol=1e-10)


def test_lvd_oracle_linear():
    v = VectorField.from_sources(["x2", "x1 + x3", "(-1)*x1"], ("x1", "x2", "x3"))
    pi = SmoothMap.from_sources(["x1 + 2*x3"], ("x1", "x2", "x3"))
    C = np.array([[1.0, 0.0, 2.0]])
    A = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 1.0], [-1.0, 0.0, 0.0]])
    oracle = lvd_oracle(pi, v, [0.2, 0.1, -0.4], 1e-4)
    assert np.abs(oracle - C @ A).max() < 1e-3
    assert np.abs(lvd(pi, v, [0.2, 0.1, -0.4]) - C @ A).max() < 1e-14


def test_lvd_oracle_zero_field():
    v = VectorField.from_sources(["0", "0"], ("x1", "x2"))
    pi = SmoothMap.from_sources(["x1*x2"], ("x1", "x2"))
    assert not lvd_oracle(pi, v, [0.3, 0.4], 0.1).any()
    with pytest.raises(ValueError):
        lvd_oracle(pi, v, [0.3, 0.4], 0.0)
