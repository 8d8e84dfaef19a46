"""Built-in example systems and the quaternion algebra behind the Hopf map.

Every built-in is produced as expression source text and parsed, so it runs
through exactly the same parser and differentiation path as user input.
"""

from __future__ import annotations

import itertools

import numpy as np

from . import linalg
from .geometry import SmoothMap, VectorField
from .lumpability import FlowSpec, LumpingProblem, SampleSpec
from .expr import parse

__all__ = [
    "Quaternion",
    "quaternion_mul",
    "levi_civita",
    "hopf_map",
    "hopf_map_sandwich",
    "hopf_kernel_field",
    "hopf_generator",
    "u1_action",
    "hopf_section",
    "hopf_fiber",
    "stereographic",
    "hopf_problem",
    "geodesic_problem",
    "logistic_problem",
    "linear_problem",
    "BUILTINS",
    "builtin",
]


def levi_civita(i: int, j: int, k: int) -> int:
    """Permutation sign of ``(i, j, k)`` over ``{1, 2, 3}``; 0 on repeats."""
    if len({i, j, k}) < 3:
        return 0
    return 1 if (i, j, k) in ((1, 2, 3), (2, 3, 1), (3, 1, 2)) else -1


class Quaternion:
    """Element ``(a0, a1, a2, a3)`` of H with product and conjugation."""

    __slots__ = ("a",)

    def __init__(self, *components):
        if len(components) == 1:
            components = components[0]
        a = np.asarray(components, dtype=float)
        if a.shape[-1] != 4:
            raise ValueError("a quaternion has four components")
        self.a = a

    @classmethod
    def from_vector(cls, u) -> "Quaternion":
        """Purely imaginary quaternion with imaginary part ``u``."""
        u = np.asarray(u, dtype=float)
        return cls(np.concatenate([np.zeros(u.shape[:-1] + (1,)), u], axis=-1))

    @property
    def real(self):
        return self.a[..., 0]

    @property
    def imag(self) -> np.ndarray:
        return self.a[..., 1:]

    def conj(self) -> "Quaternion":
        return Quaternion(self.a * np.array([1.0, -1.0, -1.0, -1.0]))

    def norm(self):
        return np.linalg.norm(self.a, axis=-1)

    def __mul__(self, other):
        if isinstance(other, Quaternion):
            return quaternion_mul(self, other)
        return Quaternion(self.a * other)

    __rmul__ = __mul__

    def __add__(self, other: "Quaternion") -> "Quaternion":
        return Quaternion(self.a + other.a)

    def __sub__(self, other: "Quaternion") -> "Quaternion":
        return Quaternion(self.a - other.a)

    def __neg__(self) -> "Quaternion":
        return Quaternion(-self.a)

    def __repr__(self):
        return f"Quaternion({self.a.tolist()})"


ONE = Quaternion(1, 0, 0, 0)
I = Quaternion(0, 1, 0, 0)
J = Quaternion(0, 0, 1, 0)
K = Quaternion(0, 0, 0, 1)


def quaternion_mul(a: Quaternion, b: Quaternion) -> Quaternion:
    """``(ab)_0 = a0 b0 - a.b``, ``(ab)_i = a0 b_i + a_i b0 + (a x b)_i``."""
    a0, av = a.a[..., 0], a.a[..., 1:]
    b0, bv = b.a[..., 0], b.a[..., 1:]
    real = a0 * b0 - np.sum(av * bv, axis=-1)
    imag = a0[..., None] * bv + b0[..., None] * av + np.cross(av, bv)
    return Quaternion(np.concatenate([real[..., None], imag], axis=-1))


def hopf_map(x) -> np.ndarray:
    """``pi_i(x) = (x0^2 - x_j x_j) d_i3 + 2 x0 eps_ij3 x_j + 2 x3 x_i`` for i = 1, 2, 3."""
    x = np.asarray(x, dtype=float)
    x0, xv = x[..., 0], x[..., 1:]
    out = 2.0 * x[..., 3:4] * xv
    out[..., 0] += 2.0 * x0 * xv[..., 1]
    out[..., 1] -= 2.0 * x0 * xv[..., 0]
    out[..., 2] += x0**2 - np.sum(xv * xv, axis=-1)
    return out


def hopf_map_sandwich(x) -> np.ndarray:
    """Imaginary part of ``x K x*``."""
    q = Quaternion(x)
    return (q * K * q.conj()).imag


def _fmt(c: float) -> str:
    return repr(float(c))


def _linear_source(coeffs, names) -> str:
    terms = [f"{_fmt(c)}*{name}" for c, name in zip(coeffs, names) if c != 0]
    return " + ".join(terms) if terms else "0"


def _canonical(sources, names) -> list[str]:
    # Re-render in the strict grammar so emitted problem files stay portable.
    return [parse(s, names).render() for s in sources]


HOPF_VARS = ("x0", "x1", "x2", "x3")


def _hopf_map_sources() -> list[str]:
    x = HOPF_VARS
    out = []
    for i in (1, 2, 3):
        terms = []
        if i == 3:
            terms.append(f"{x[0]}^2 - ({x[1]}^2 + {x[2]}^2 + {x[3]}^2)")
        for j in (1, 2, 3):
            e = levi_civita(i, j, 3)
            if e:
                terms.append(f"{_fmt(2.0 * e)}*{x[0]}*{x[j]}")
        terms.append(f"2*{x[3]}*{x[i]}")
        out.append(" + ".join(terms))
    return _canonical(out, x)


def _hopf_field_sources(c) -> list[str]:
    # (v_c)_mu = -d_mu0 c_j x_j + d_muj c_j x0 + d_muj eps_jkl c_k x_l
    c = {k + 1: float(v) for k, v in enumerate(c)}
    x = HOPF_VARS
    out = [_linear_source([-c[j] for j in (1, 2, 3)], [x[j] for j in (1, 2, 3)])]
    for j in (1, 2, 3):
        coeffs = {0: c[j]}
        for k, l in itertools.product((1, 2, 3), repeat=2):
            e = levi_civita(j, k, l)
            if e:
                coeffs[l] = coeffs.get(l, 0.0) + e * c[k]
        idx = sorted(coeffs)
        out.append(_linear_source([coeffs[i] for i in idx], [x[i] for i in idx]))
    return _canonical(out, x)


def hopf_generator(c) -> VectorField:
    """Left multiplication field ``v_c(x) = c x`` for an imaginary quaternion ``c``."""
    c = np.asarray(c, dtype=float)
    if c.shape != (3,):
        raise ValueError("c must be the 3 imaginary components")
    return VectorField.from_sources(_hopf_field_sources(c), HOPF_VARS)


def hopf_kernel_field() -> VectorField:
    """``w(x) = (-x3, x2, -x1, x0)``, the generator of the fiber circles."""
    return VectorField.from_sources(["neg(x3)", "x2", "neg(x1)", "x0"], HOPF_VARS)


def u1_action(t: float, x) -> np.ndarray:
    """Circle action ``e^{Kt}(x0 + K x3) + e^{-Kt} J (x2 + K x1)``, i.e. ``x e^{Kt}``."""
    x = np.asarray(x, dtype=float)
    zeros = np.zeros_like(x[..., 0])
    ekt = Quaternion(np.array([np.cos(t), 0.0, 0.0, np.sin(t)]))
    emkt = Quaternion(np.array([np.cos(t), 0.0, 0.0, -np.sin(t)]))
    a = Quaternion(np.stack([x[..., 0], zeros, zeros, x[..., 3]], axis=-1))
    b = Quaternion(np.stack([x[..., 2], zeros, zeros, x[..., 1]], axis=-1))
    return (ekt * a + emkt * J * b).a


def hopf_section(y) -> np.ndarray:
    """A unit quaternion ``x`` with ``hopf_map(x) == y`` for unit ``y``.

    Uses the half-angle rotation taking ``(0, 0, 1)`` to ``y``; the south
    pole ``y = (0, 0, -1)`` gets ``x = (0, 1, 0, 0)``.
    """
    y = np.asarray(y, dtype=float)
    if y.shape != (3,) or abs(np.linalg.norm(y) - 1.0) > 1e-9:
        raise ValueError("y must be a unit 3-vector")
    q = np.array([1.0 + y[2], -y[1], y[0], 0.0])
    norm = np.linalg.norm(q)
    if norm < 1e-8:
        return np.array([0.0, 1.0, 0.0, 0.0])
    return q / norm


def hopf_fiber(y, count: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """``count`` points of the circle over ``y`` and their angles in ``[0, 2 pi)``."""
    alpha = 2 * np.pi * np.arange(count) / count
    x = hopf_section(y)
    return np.array([u1_action(a, x) for a in alpha]), alpha


def stereographic(x) -> np.ndarray:
    """Projection of S^3 minus ``(-1, 0, 0, 0)`` to R^3: ``(x1, x2, x3) / (1 + x0)``."""
    x = np.asarray(x, dtype=float)
    return x[..., 1:] / (1.0 + x[..., :1])


def hopf_problem(c_imag=(1.0, 0.0, 0.0), samples: int = 200, seed: int = 0) -> LumpingProblem:
    """Quaternion rotation field on S^3 lumped by the Hopf map to S^2.

    Expected: lumpable with lumped field ``2 c x y``.
    """
    c = np.asarray(c_imag, dtype=float)
    if c.shape != (3,) or not np.any(c):
        raise ValueError("c_imag must be a nonzero 3-vector")
    return LumpingProblem(
        v=hopf_generator(c),
        pi=SmoothMap.from_sources(_hopf_map_sources(), HOPF_VARS),
        constraints=SmoothMap.from_sources(["x0^2 + x1^2 + x2^2 + x3^2 - 1"], HOPF_VARS),
        sample=SampleSpec(
            lower=(-1.0,) * 4,
            upper=(1.0,) * 4,
            count=samples,
            seed=seed,
            require=(),
        ),
        fiber_seed=(1.0, 0.0, 0.0, 0.0),
        flow=FlowSpec(x0=(1.0, 0.0, 0.0, 0.0), t_end=2 * np.pi, points=33),
        name="hopf",
    )


GEODESIC_VARS = ("X1", "X2", "X3", "V1", "V2", "V3")


def geodesic_problem(v_min: float = 0.1, samples: int = 200, seed: int = 0) -> LumpingProblem:
    """Geodesic flow on TS^2 in R^6 lumped by the energy ``I = V.V``.

    The sample domain keeps ``|V| >= v_min`` to stay away from the
    stationary set ``V = 0``, where ``I`` is not submersive.
    """
    vv = "(V1^2 + V2^2 + V3^2)"
    field = ["V1", "V2", "V3"] + [f"neg({vv} * X{i})" for i in (1, 2, 3)]
    names = GEODESIC_VARS
    return LumpingProblem(
        v=VectorField.from_sources(_canonical(field, names), names),
        pi=SmoothMap.from_sources(_canonical(["V1^2 + V2^2 + V3^2"], names), names),
        constraints=SmoothMap.from_sources(
            _canonical(["X1^2 + X2^2 + X3^2 - 1", "X1*V1 + X2*V2 + X3*V3"], names), names
        ),
        sample=SampleSpec(
            lower=(-1.0,) * 3 + (-1.5,) * 3,
            upper=(1.0,) * 3 + (1.5,) * 3,
            count=samples,
            seed=seed,
            require=(parse(f"V1^2 + V2^2 + V3^2 - {_fmt(round(v_min**2, 12))}", names),),
        ),
        fiber_seed=(1.0, 0.0, 0.0, 0.0, 1.0, 0.0),
        flow=FlowSpec(x0=(1.0, 0.0, 0.0, 0.0, 1.0, 0.0), t_end=10.0, points=21),
        name="geodesic_sphere",
    )


def logistic_problem(a, samples: int = 200, seed: int = 0, x0=None) -> LumpingProblem:
    """``dx_i/dt = x_i (1 - a.x)`` lumped by ``y = a.x``; expected lumped field ``y (1 - y)``."""
    a = np.asarray(a, dtype=float)
    n = a.size
    if a.ndim != 1 or not np.any(a):
        raise ValueError("a must be a nonzero vector")
    names = tuple(f"x{i + 1}" for i in range(n))
    ax = _linear_source(a, names)
    field = [f"{name}*(1 - ({ax}))" for name in names]
    if x0 is None and n == 3:
        x0 = (0.1, 0.2, 0.3)
    return LumpingProblem(
        v=VectorField.from_sources(_canonical(field, names), names),
        pi=SmoothMap.from_sources(_canonical([ax], names), names),
        sample=SampleSpec(lower=(0.0,) * n, upper=(1.0,) * n, count=samples, seed=seed),
        fiber_seed=(0.0,) * n,
        flow=FlowSpec(x0=None if x0 is None else tuple(map(float, x0)), t_end=1.0, points=21),
        name=f"logistic{n}",
    )


def linear_problem(A, C, samples: int = 200, seed: int = 0, x0=None, t_end: float = 1.0, name: str = "linear") -> LumpingProblem:
    """``dx/dt = A x`` lumped by ``y = C x``. Lumpable iff ``rank [C; CA] = rank C``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    n = A.shape[0]
    if A.shape != (n, n) or C.shape[1] != n:
        raise ValueError("A must be n x n and C must be m x n")
    if linalg.rank(C) < C.shape[0]:
        raise ValueError("C must have full row rank")
    names = tuple(f"x{i + 1}" for i in range(n))
    field = [_linear_source(row, names) for row in A]
    lump = [_linear_source(row, names) for row in C]
    return LumpingProblem(
        v=VectorField.from_sources(_canonical(field, names), names),
        pi=SmoothMap.from_sources(_canonical(lump, names), names),
        sample=SampleSpec(lower=(-1.0,) * n, upper=(1.0,) * n, count=samples, seed=seed),
        fiber_seed=(0.0,) * n,
        flow=FlowSpec(x0=None if x0 is None else tuple(map(float, x0)), t_end=t_end, points=21),
        name=name,
    )


def _logistic3():
    return logistic_problem([1.0, 1.0, 1.0])


def _hopf():
    return hopf_problem([1.0, 0.0, 0.0])


def _linear_shear():
    return linear_problem([[0, 1], [0, 0]], [[1, 0]], x0=(1.0, 1.0), t_end=0.5, name="linear_shear")


def _linear_identity():
    return linear_problem(np.eye(2), [[1, 0]], x0=(1.0, 1.0), name="linear_identity")


BUILTINS = {
    "logistic3": _logistic3,
    "hopf": _hopf,
    "geodesic_sphere": geodesic_problem,
    "linear_shear": _linear_shear,
    "linear_identity": _linear_identity,
}


def builtin(name: str) -> LumpingProblem:
    try:
        return BUILTINS[name]()
    except KeyError:
        raise KeyError(f"unknown built-in {name!r}; choose from {sorted(BUILTINS)}") from None
