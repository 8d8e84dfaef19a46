"""Differential-geometric primitives in ambient Euclidean coordinates.

Maps and vector fields are tuples of :class:`~exactlump.expr.Expression`.
All point arguments may carry leading batch axes, ``x.shape == (..., n)``;
outputs gain the same leading axes.

The connection on the target is the flat one, so the covariant derivative
of ``Dpi`` along ``v`` is simply the Jacobian of ``x -> Dpi_x v(x)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import linalg
from .expr import Expression, parse

__all__ = [
    "SmoothMap",
    "VectorField",
    "SubmersionError",
    "OffManifoldError",
    "jacobian",
    "pushforward",
    "lie_bracket",
    "lvd",
    "tangent_basis",
    "vertical_kernel",
    "check_submersion",
    "ConvergenceError",
    "gauss_newton",
    "project_to_constraints",
]


class SubmersionError(ValueError):
    """Dpi has rank below its row count at a point."""


class OffManifoldError(ValueError):
    """A point does not satisfy the constraint equations."""


@dataclass(frozen=True)
class SmoothMap:
    """A map R^n -> R^m given by m expressions sharing the same variables."""

    components: tuple[Expression, ...]

    def __post_init__(self):
        comps = tuple(self.components)
        object.__setattr__(self, "components", comps)
        if not comps:
            raise ValueError("a SmoothMap needs at least one component")
        names = comps[0].variables
        for c in comps:
            if c.variables != names:
                raise ValueError("all components must share the same variables")

    @classmethod
    def from_sources(cls, sources: Sequence[str], variables: Sequence[str]) -> "SmoothMap":
        return cls(tuple(parse(s, variables) for s in sources))

    @property
    def variables(self) -> tuple[str, ...]:
        return self.components[0].variables

    @property
    def domain_dim(self) -> int:
        return self.components[0].arity

    @property
    def codim(self) -> int:
        return len(self.components)

    @property
    def sources(self) -> list[str]:
        return [str(c) for c in self.components]

    def __call__(self, x) -> np.ndarray:
        return np.stack([np.asarray(c.evaluate(x), dtype=float) for c in self.components], axis=-1)

    def jacobian(self, x) -> np.ndarray:
        return np.stack([c.gradient(x) for c in self.components], axis=-2)

    def value_and_jacobian(self, x) -> tuple[np.ndarray, np.ndarray]:
        jets = [c.jet(x, 1) for c in self.components]
        return np.stack([j.val for j in jets], axis=-1), np.stack([j.grad for j in jets], axis=-2)

    def second_jet(self, x) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Values ``(..., m)``, Jacobian ``(..., m, n)`` and Hessians ``(..., m, n, n)``."""
        jets = [c.jet(x, 2) for c in self.components]
        return (
            np.stack([j.val for j in jets], axis=-1),
            np.stack([j.grad for j in jets], axis=-2),
            np.stack([j.hess for j in jets], axis=-3),
        )


class VectorField(SmoothMap):
    """A square SmoothMap, read as the field ``x -> v(x)``."""

    def __post_init__(self):
        super().__post_init__()
        if self.codim != self.domain_dim:
            raise ValueError(f"vector field must be square, got {self.codim} components in {self.domain_dim} variables")

    @classmethod
    def from_map(cls, f: SmoothMap) -> "VectorField":
        return cls(f.components)


def jacobian(f: SmoothMap, x) -> np.ndarray:
    """Entry ``(a, i)`` is ``d f^a / d x^i`` at ``x``."""
    return f.jacobian(x)


def pushforward(pi: SmoothMap, v: SmoothMap, x) -> np.ndarray:
    """``Dpi_x v(x)``."""
    return np.einsum("...ai,...i->...a", pi.jacobian(x), v(x))


def lie_bracket(v: SmoothMap, w: SmoothMap, x) -> np.ndarray:
    """``[[v, w]](x) = Dw(x) v(x) - Dv(x) w(x)``."""
    vv, Dv = v.value_and_jacobian(x)
    wv, Dw = w.value_and_jacobian(x)
    return np.einsum("...ij,...j->...i", Dw, vv) - np.einsum("...ij,...j->...i", Dv, wv)


def lvd(pi: SmoothMap, v: SmoothMap, x) -> np.ndarray:
    """Covariant derivative of ``Dpi`` along ``v`` for the flat connection.

    Entry ``(a, i)`` is ``d_i (Dpi v)^a = sum_j d_i d_j pi^a v^j + d_j pi^a d_i v^j``.
    """
    _, Dpi, Hpi = pi.second_jet(x)
    vv, Dv = v.value_and_jacobian(x)
    return np.einsum("...aij,...j->...ai", Hpi, vv) + np.einsum("...aj,...ji->...ai", Dpi, Dv)


def check_submersion(pi: SmoothMap, x, tol: float = linalg.DEFAULT_TOL) -> tuple[np.ndarray, float]:
    """Return ``(Dpi_x, sigma_min)``; raise :class:`SubmersionError` if rank < m."""
    Dpi = pi.jacobian(x)
    s = linalg.singular_values(Dpi)
    r = int(np.sum(s > (tol * s[0] if s[0] > 0 else tol)))
    if r < pi.codim:
        raise SubmersionError(f"rank Dpi = {r} < {pi.codim} at x = {np.asarray(x).tolist()}")
    return Dpi, float(s[-1])


def _check_on_manifold(g: SmoothMap, x, constraint_tol: float) -> np.ndarray:
    gv, Dg = g.value_and_jacobian(x)
    if np.linalg.norm(gv) >= constraint_tol:
        raise OffManifoldError(f"|g(x)| = {np.linalg.norm(gv):.3e} >= {constraint_tol:.1e} at x = {np.asarray(x).tolist()}")
    return Dg


def tangent_basis(g: SmoothMap | None, x, tol: float = linalg.DEFAULT_TOL) -> np.ndarray:
    """Orthonormal columns spanning ``ker Dg_x`` (identity when unconstrained)."""
    x = np.asarray(x, dtype=float)
    if g is None:
        return np.eye(x.shape[-1])
    return linalg.nullspace(g.jacobian(x), tol).T


def vertical_kernel(
    pi: SmoothMap,
    g: SmoothMap | None,
    x,
    tol: float = linalg.DEFAULT_TOL,
    constraint_tol: float = 1e-10,
) -> np.ndarray:
    """Orthonormal basis (rows) of the fiber directions at ``x``.

    Without constraints this is ``ker Dpi_x``; with constraints it is
    ``ker [Dpi_x; Dg_x]``, the kernel directions tangent to ``{g = 0}``.
    """
    Dpi, _ = check_submersion(pi, x, tol)
    if g is None:
        return linalg.nullspace(Dpi, tol)
    Dg = _check_on_manifold(g, x, constraint_tol)
    return linalg.nullspace(np.vstack([Dpi, Dg]), tol)


class ConvergenceError(RuntimeError):
    """Gauss-Newton iteration did not reach its target residual."""

    def __init__(self, message: str, residual: float, x: np.ndarray):
        self.residual = residual
        self.x = x
        super().__init__(message)


def gauss_newton(
    F,
    x0,
    tol: float = 1e-12,
    max_iter: int = 50,
    rank_tol: float = linalg.DEFAULT_TOL,
    max_step: float | None = None,
    accept_tol: float | None = None,
) -> tuple[np.ndarray, float, int]:
    """Minimum-norm Gauss-Newton with backtracking for ``F(x) = (r, J)``.

    Steps are ``dx = -J^+ r``. A step is halved (up to 30 times) until the
    residual norm decreases. Stops when ``|r| < tol`` or when the step
    becomes negligible (a stationary point). If the iteration stops above ``tol`` but below ``accept_tol`` the least-squares point
    is returned; otherwise :class:`ConvergenceError` is raised.

    Returns ``(x, |r|, iterations)``.
    """
    x = np.array(x0, dtype=float)
    r, J = F(x)
    norm = float(np.linalg.norm(r))
    for it in range(max_iter + 1):
        if norm < tol:
            return x, norm, it
        if it == max_iter:
            break
        dx = -linalg.pseudoinverse(J, rank_tol) @ r
        step = float(np.linalg.norm(dx))
        if step <= 1e-13 * (1.0 + float(np.linalg.norm(x))):
            break  # stationary: a least-squares point that cannot improve
        if max_step is not None and step > max_step:
            dx *= max_step / step
        improved = False
        alpha = 1.0
        for _ in range(30):
            trial = x + alpha * dx
            try:
                r_t, J_t = F(trial)
            except ArithmeticError:
                alpha *= 0.5
                continue
            n_t = float(np.linalg.norm(r_t))
            if np.isfinite(n_t) and n_t < norm:
                x, r, J, norm = trial, r_t, J_t, n_t
                improved = True
                break
            alpha *= 0.5
        if not improved:
            break
    if accept_tol is not None and norm < accept_tol:
        return x, norm, it
    raise ConvergenceError(f"Gauss-Newton stalled at residual {norm:.3e} (target {tol:.1e})", norm, x)


def project_to_constraints(
    g: SmoothMap, x, tol: float = 1e-12, max_iter: int = 50, rank_tol: float = linalg.DEFAULT_TOL
) -> np.ndarray:
    """Closest-in-the-Gauss-Newton-sense point of ``{g = 0}`` near ``x``."""
    xp, _, _ = gauss_newton(g.value_and_jacobian, x, tol=tol, max_iter=max_iter, rank_tol=rank_tol)
    return xp
