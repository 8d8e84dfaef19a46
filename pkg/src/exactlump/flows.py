"""Explicit Runge-Kutta integration, flow commutation and the flow-based oracle for lvd.

Vector fields are plain callables ``f(x) -> dx/dt`` on 1-d arrays, so both
:class:`~exactlump.geometry.VectorField` and a lumped field can be integrated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import SmoothMap, gauss_newton

__all__ = [
    "IntegrationError",
    "Trajectory",
    "integrate",
    "flow_commutation_error",
    "lvd_oracle",
    "flow_jacobian",
]

BLOWUP_NORM = 1e12

# Fehlberg 4(5) tableau
_C = np.array([0.0, 1 / 4, 3 / 8, 12 / 13, 1.0, 1 / 2])
_A = [
    [],
    [1 / 4],
    [3 / 32, 9 / 32],
    [1932 / 2197, -7200 / 2197, 7296 / 2197],
    [439 / 216, -8.0, 3680 / 513, -845 / 4104],
    [-8 / 27, 2.0, -3544 / 2565, 1859 / 4104, -11 / 40],
]
_B4 = np.array([25 / 216, 0.0, 1408 / 2565, 2197 / 4104, -1 / 5, 0.0])
_B5 = np.array([16 / 135, 0.0, 6656 / 12825, 28561 / 56430, -9 / 50, 2 / 55])


class IntegrationError(RuntimeError):
    pass


@dataclass
class Trajectory:
    """Stored integration nodes with cubic Hermite dense output."""

    times: np.ndarray
    states: np.ndarray
    derivatives: np.ndarray
    accepted: int = 0
    rejected: int = 0
    min_step: float = float("nan")
    max_step: float = float("nan")
    blew_up: bool = False
    constraint_drift: list[float] = field(default_factory=list)

    @property
    def t_end(self) -> float:
        return float(self.times[-1])

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def __call__(self, t) -> np.ndarray:
        """Interpolated state at time(s) ``t`` inside the integrated range."""
        t = np.asarray(t, dtype=float)
        times = self.times
        forward = times[-1] >= times[0]
        key = times if forward else -times
        tk = t if forward else -t
        lo, hi = (key[0], key[-1])
        if np.any(tk < lo - 1e-12 * (1 + abs(lo))) or np.any(tk > hi + 1e-12 * (1 + abs(hi))):
            raise ValueError(f"t outside integrated range [{times[0]}, {times[-1]}]")
        k = np.clip(np.searchsorted(key, tk, side="right") - 1, 0, len(times) - 2)
        if len(times) == 1:
            return np.broadcast_to(self.states[0], t.shape + self.states.shape[1:]).copy()
        t0, t1 = times[k], times[k + 1]
        h = t1 - t0
        s = ((t - t0) / h)[..., None]
        y0, y1 = self.states[k], self.states[k + 1]
        d0, d1 = self.derivatives[k] * h[..., None], self.derivatives[k + 1] * h[..., None]
        h00 = 2 * s**3 - 3 * s**2 + 1
        h10 = s**3 - 2 * s**2 + s
        h01 = -2 * s**3 + 3 * s**2
        h11 = s**3 - s**2
        return h00 * y0 + h10 * d0 + h01 * y1 + h11 * d1


def _rhs(f, x):
    dx = np.asarray(f(x), dtype=float)
    if dx.shape != x.shape:
        raise IntegrationError(f"vector field returned shape {dx.shape}, expected {x.shape}")
    return dx


def integrate(
    f,
    x0,
    t_end: float,
    method: str = "rkf45",
    step: float | None = None,
    rtol: float = 1e-9,
    atol: float = 1e-9,
    max_steps: int = 1_000_000,
    constraints: SmoothMap | None = None,
    project: bool = False,
    t_stops=None,
) -> Trajectory:
    """Integrate ``dx/dt = f(x)`` from ``x0`` over ``[0, t_end]``.

    ``method`` is ``"rkf45"`` (adaptive, error per step below
    ``atol + rtol*|x|``, fifth-order solution propagated) or ``"rk4"``
    (fixed ``step``, shortened to land on ``t_end``). A negative ``t_end``
    integrates backwards.

    With ``constraints`` the drift ``|g(x)|`` is recorded at every node;
    ``project=True`` pulls each accepted state back onto ``{g = 0}``.

    ``t_stops`` are times the stepper lands on exactly, so the trajectory
    is a node (not an interpolant) there.

    A state with norm above 1e12 ends the trajectory with ``blew_up`` set.
    """
    x = np.array(x0, dtype=float)
    if x.ndim != 1 or not np.all(np.isfinite(x)):
        raise ValueError("x0 must be a finite 1-d vector")
    if method not in ("rkf45", "rk4"):
        raise ValueError(f"unknown method {method!r}")
    direction = 1.0 if t_end >= 0 else -1.0
    span = abs(float(t_end))
    if method == "rk4" and (step is None or step <= 0):
        raise ValueError("rk4 needs a positive step")

    stops = sorted({abs(float(s)) for s in np.atleast_1d(t_stops if t_stops is not None else [])} - {0.0})
    stops = [s for s in stops if s < span] + [span]
    t = 0.0
    dx = _rhs(f, x)
    times, states, derivs = [0.0], [x.copy()], [dx]
    drift = [] if constraints is None else [float(np.linalg.norm(constraints(x)))]
    accepted = rejected = 0
    steps_taken = []
    blew_up = False

    if method == "rk4":
        h = float(step)
    else:
        scale = atol + rtol * np.abs(x)
        d0 = np.sqrt(np.mean((x / scale) ** 2))
        d1 = np.sqrt(np.mean((dx / scale) ** 2))
        h = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
        h = min(h, span) if span > 0 else 0.0

    while span - t > 1e-14 * max(1.0, span):
        if accepted + rejected >= max_steps:
            raise IntegrationError(f"exceeded {max_steps} steps at t = {direction * t}")
        while stops and stops[0] - t <= 1e-14 * max(1.0, span):
            stops.pop(0)
        target = stops[0] if stops else span
        h_try = h
        h = min(h, target - t)
        if h < 1e-14 * max(1.0, t):
            raise IntegrationError(f"step size underflow at t = {direction * t}")
        hs = direction * h
        if method == "rk4":
            k1 = dx
            k2 = _rhs(f, x + 0.5 * hs * k1)
            k3 = _rhs(f, x + 0.5 * hs * k2)
            k4 = _rhs(f, x + hs * k3)
            x_new = x + hs * (k1 + 2 * k2 + 2 * k3 + k4) / 6
            ok = True
        else:
            k = [dx]
            for s in range(1, 6):
                xs = x + hs * sum(a * ki for a, ki in zip(_A[s], k))
                k.append(_rhs(f, xs))
            K = np.array(k)
            x_new = x + hs * (_B5 @ K)
            err = hs * ((_B5 - _B4) @ K)
            scale = atol + rtol * np.maximum(np.abs(x), np.abs(x_new))
            enorm = float(np.max(np.abs(err) / scale))
            ok = enorm <= 1.0
            factor = 5.0 if enorm == 0 else min(5.0, max(0.2, 0.9 * enorm ** (-0.2)))
        if not ok:
            rejected += 1
            h *= factor
            continue
        if project and constraints is not None:
            x_new, _, _ = gauss_newton(constraints.value_and_jacobian, x_new, tol=1e-13, max_iter=20, accept_tol=1e-10)
        t += h
        accepted += 1
        steps_taken.append(h)
        x = x_new
        if not np.all(np.isfinite(x)) or np.linalg.norm(x) > BLOWUP_NORM:
            blew_up = True
            break
        dx = _rhs(f, x)
        times.append(direction * t)
        states.append(x.copy())
        derivs.append(dx)
        if constraints is not None:
            drift.append(float(np.linalg.norm(constraints(x))))
        if method == "rkf45":
            h = max(h * factor, h_try) if h < h_try else h * factor
        else:
            h = h_try

    return Trajectory(
        times=np.array(times),
        states=np.array(states),
        derivatives=np.array(derivs),
        accepted=accepted,
        rejected=rejected,
        min_step=min(steps_taken) if steps_taken else float("nan"),
        max_step=max(steps_taken) if steps_taken else float("nan"),
        blew_up=blew_up,
        constraint_drift=drift,
    )


def flow_commutation_error(
    p,
    lumped,
    x0,
    t_grid,
    rtol: float = 1e-10,
    atol: float = 1e-10,
) -> tuple[float, np.ndarray]:
    """Max over ``t_grid`` of ``|pi(Phi_t x0) - Phi~_t(pi x0)|`` and the per-time curve.

    ``p`` is a :class:`~exactlump.lumpability.LumpingProblem` and ``lumped``
    any callable macro field ``y -> dy/dt``.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    t_end = float(t_grid[np.argmax(np.abs(t_grid))])
    x0 = np.asarray(x0, dtype=float)
    try:
        micro = integrate(p.v, x0, t_end, rtol=rtol, atol=atol, t_stops=t_grid)
        macro = integrate(lumped, p.pi(x0), t_end, rtol=rtol, atol=atol, t_stops=t_grid)
    except (ArithmeticError, RuntimeError) as exc:
        raise IntegrationError(f"flow comparison failed: {exc}") from exc
    for name, traj in (("micro", micro), ("macro", macro)):
        if traj.blew_up:
            raise IntegrationError(f"{name} trajectory blew up at t = {traj.t_end}")
    errors = np.linalg.norm(p.pi(micro(t_grid)) - macro(t_grid), axis=-1)
    return float(np.max(errors)), errors


def flow_jacobian(v: SmoothMap, x, t: float, rtol: float = 1e-12, atol: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    """``(Phi_t(x), D Phi_t(x))`` from the variational equation ``dW/dt = Dv W``."""
    x = np.asarray(x, dtype=float)
    n = x.size

    def augmented(z):
        state, W = z[:n], z[n:].reshape(n, n)
        val, Dv = v.value_and_jacobian(state)
        return np.concatenate([val, (Dv @ W).ravel()])

    z0 = np.concatenate([x, np.eye(n).ravel()])
    traj = integrate(augmented, z0, t, rtol=rtol, atol=atol)
    if traj.blew_up:
        raise IntegrationError("variational integration blew up")
    z = traj.final
    return z[:n], z[n:].reshape(n, n)


def lvd_oracle(pi: SmoothMap, v: SmoothMap, x, t: float) -> np.ndarray:
    """Finite-time estimate ``[D(pi o Phi_t)(x) - Dpi(x)] / t``; converges to lvd as O(t)."""
    if t == 0:
        raise ValueError("t must be nonzero")
    xt, W = flow_jacobian(v, x, t)
    return (pi.jacobian(xt) @ W - pi.jacobian(x)) / t
