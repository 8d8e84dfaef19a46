"""Scalar expression language with forward-mode differentiation.

Expressions are parsed from a small closed grammar::

    expr   := term (('+' | '-') term)*
    term   := factor (('*' | '/') factor)*
    factor := base ('^' integer)?
    base   := number | ident | '(' expr ')' | func '(' expr ')'
    func   := sin | cos | exp | log | sqrt | neg

A leading unary ``-`` or ``+`` is accepted as a convenience and stored as
``neg``. Variables are resolved to positional indices at parse time.

Every value is computed by one recursive walk over the tree. The walk is
generic in the number type: plain floats and numpy arrays give values,
:class:`Jet` gives gradients and Hessians in the same pass. Inputs may
carry leading batch axes, ``x.shape == (..., n)``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

__all__ = [
    "Expression",
    "ParseError",
    "UnknownIdentifierError",
    "ArityError",
    "DomainError",
    "Jet",
    "parse",
    "evaluate",
    "derivative",
    "second_derivative",
    "FUNCTIONS",
]

FUNCTIONS = ("sin", "cos", "exp", "log", "sqrt", "neg")


class ParseError(ValueError):
    """Malformed expression source. ``position`` is a 0-based offset."""

    def __init__(self, message: str, position: int, source: str = ""):
        self.position = position
        self.source = source
        super().__init__(f"{message} at offset {position}")


class UnknownIdentifierError(ParseError):
    pass


class ArityError(ParseError):
    pass


class DomainError(ArithmeticError):
    """Evaluation left the domain of a subterm (log of x <= 0, 1/0, ...)."""

    def __init__(self, message: str, position: int, subterm: str):
        self.position = position
        self.subterm = subterm
        super().__init__(f"{message} in subterm '{subterm}' at offset {position}")


# --------------------------------------------------------------------------
# AST


@dataclass(frozen=True)
class Const:
    value: float
    pos: int = 0


@dataclass(frozen=True)
class Var:
    index: int
    pos: int = 0


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Node"
    right: "Node"
    pos: int = 0


@dataclass(frozen=True)
class Pow:
    base: "Node"
    exponent: int
    pos: int = 0


@dataclass(frozen=True)
class Func:
    name: str
    arg: "Node"
    pos: int = 0


Node = Union[Const, Var, BinOp, Pow, Func]


# --------------------------------------------------------------------------
# Jets


class Jet:
    """Truncated Taylor jet: value, gradient and (optionally) Hessian.

    ``val`` has the batch shape ``B``; ``grad`` has shape ``B + (n,)`` and
    ``hess`` shape ``B + (n, n)`` or is ``None`` for first-order jets.
    """

    __slots__ = ("val", "grad", "hess")

    def __init__(self, val, grad, hess=None):
        self.val = val
        self.grad = grad
        self.hess = hess

    @classmethod
    def variables(cls, x: np.ndarray, order: int = 1) -> list["Jet"]:
        x = np.asarray(x, dtype=float)
        n = x.shape[-1]
        batch = x.shape[:-1]
        eye = np.eye(n)
        out = []
        for i in range(n):
            grad = np.broadcast_to(eye[i], batch + (n,))
            hess = np.zeros(batch + (n, n)) if order >= 2 else None
            out.append(cls(x[..., i], grad, hess))
        return out

    def _chain(self, f, df, d2f) -> "Jet":
        # f(u) with f'(u) = df, f''(u) = d2f, all evaluated at u = self.val
        grad = df[..., None] * self.grad
        hess = None
        if self.hess is not None:
            hess = df[..., None, None] * self.hess + d2f[..., None, None] * (
                self.grad[..., :, None] * self.grad[..., None, :]
            )
        return Jet(f, grad, hess)

    def __add__(self, other):
        if not isinstance(other, Jet):
            return Jet(self.val + other, self.grad, self.hess)
        hess = None if self.hess is None else self.hess + other.hess
        return Jet(self.val + other.val, self.grad + other.grad, hess)

    __radd__ = __add__

    def __neg__(self):
        hess = None if self.hess is None else -self.hess
        return Jet(-self.val, -self.grad, hess)

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if not isinstance(other, Jet):
            hess = None if self.hess is None else self.hess * np.asarray(other)[..., None, None]
            return Jet(self.val * other, self.grad * np.asarray(other)[..., None], hess)
        a, b = self, other
        grad = a.grad * b.val[..., None] + b.grad * a.val[..., None]
        hess = None
        if a.hess is not None:
            cross = a.grad[..., :, None] * b.grad[..., None, :]
            hess = (
                a.hess * b.val[..., None, None]
                + b.hess * a.val[..., None, None]
                + cross
                + np.swapaxes(cross, -1, -2)
            )
        return Jet(a.val * b.val, grad, hess)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Jet):
            return self * other.reciprocal()
        return self * (1.0 / np.asarray(other, dtype=float))

    def reciprocal(self) -> "Jet":
        r = 1.0 / self.val
        return self._chain(r, -r * r, 2.0 * r * r * r)

    def power(self, k: int) -> "Jet":
        u = self.val
        f = u**k
        df = k * u ** (k - 1) if k >= 1 else k / u ** (1 - k)
        if k >= 2:
            d2f = k * (k - 1) * u ** (k - 2)
        elif k == 1:
            d2f = np.zeros_like(u)
        else:
            d2f = k * (k - 1) / u ** (2 - k)
        return self._chain(f, np.asarray(df, dtype=float), np.asarray(d2f, dtype=float))

    def sin(self):
        s, c = np.sin(self.val), np.cos(self.val)
        return self._chain(s, c, -s)

    def cos(self):
        s, c = np.sin(self.val), np.cos(self.val)
        return self._chain(c, -s, -c)

    def exp(self):
        e = np.exp(self.val)
        return self._chain(e, e, e)

    def log(self):
        r = 1.0 / self.val
        return self._chain(np.log(self.val), r, -r * r)

    def sqrt(self):
        s = np.sqrt(self.val)
        return self._chain(s, 0.5 / s, -0.25 / (s * self.val))


# --------------------------------------------------------------------------
# Parser

_TOKEN = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>[-+*/^(),])
    """,
    re.VERBOSE,
)


def _tokenize(source: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(source):
        m = _TOKEN.match(source, pos)
        if m is None:
            raise ParseError(f"unexpected character {source[pos]!r}", pos, source)
        kind = m.lastgroup
        if kind != "ws":
            tokens.append((kind, m.group(), pos))
        pos = m.end()
    tokens.append(("end", "", len(source)))
    return tokens


class _Parser:
    def __init__(self, source: str, variables: Sequence[str]):
        self.source = source
        self.index = {name: i for i, name in enumerate(variables)}
        self.tokens = _tokenize(source)
        self.k = 0

    def peek(self):
        return self.tokens[self.k]

    def take(self):
        tok = self.tokens[self.k]
        self.k += 1
        return tok

    def expect(self, text: str):
        kind, value, pos = self.take()
        if value != text:
            found = "end of input" if kind == "end" else repr(value)
            raise ParseError(f"expected {text!r}, found {found}", pos, self.source)

    def parse(self) -> Node:
        node = self.expr()
        kind, value, pos = self.peek()
        if kind != "end":
            raise ParseError(f"unexpected token {value!r}", pos, self.source)
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.peek()[1] in ("+", "-"):
            _, op, pos = self.take()
            node = BinOp(op, node, self.term(), pos)
        return node

    def term(self) -> Node:
        node = self.factor()
        while self.peek()[1] in ("*", "/"):
            _, op, pos = self.take()
            node = BinOp(op, node, self.factor(), pos)
        return node

    def factor(self) -> Node:
        kind, value, pos = self.peek()
        if value in ("-", "+"):
            self.take()
            inner = self.factor()
            return Func("neg", inner, pos) if value == "-" else inner
        node = self.base()
        if self.peek()[1] == "^":
            _, _, pos = self.take()
            sign = 1
            if self.peek()[1] in ("-", "+"):
                sign = -1 if self.take()[1] == "-" else 1
            kind, value, epos = self.take()
            if kind != "num" or not value.isdigit():
                raise ParseError("exponent must be an integer literal", epos, self.source)
            node = Pow(node, sign * int(value), pos)
        return node

    def base(self) -> Node:
        kind, value, pos = self.take()
        if kind == "num":
            return Const(float(value), pos)
        if kind == "ident":
            if value in FUNCTIONS:
                self.expect("(")
                arg = self.expr()
                if self.peek()[1] == ",":
                    raise ArityError(f"{value} takes exactly one argument", self.peek()[2], self.source)
                self.expect(")")
                return Func(value, arg, pos)
            if value not in self.index:
                raise UnknownIdentifierError(f"unknown identifier {value!r}", pos, self.source)
            if self.peek()[1] == "(":
                raise UnknownIdentifierError(f"{value!r} is not a function", pos, self.source)
            return Var(self.index[value], pos)
        if value == "(":
            node = self.expr()
            self.expect(")")
            return node
        found = "end of input" if kind == "end" else repr(value)
        raise ParseError(f"unexpected {found}", pos, self.source)


# --------------------------------------------------------------------------
# Evaluation


def _render(node: Node, names: Sequence[str]) -> str:
    if isinstance(node, Const):
        if node.value < 0:
            return f"neg({-node.value!r})"
        return repr(node.value)
    if isinstance(node, Var):
        return names[node.index]
    if isinstance(node, BinOp):
        return f"({_render(node.left, names)} {node.op} {_render(node.right, names)})"
    if isinstance(node, Pow):
        return f"({_render(node.base, names)})^{node.exponent}"
    return f"{node.name}({_render(node.arg, names)})"


def _value(u):
    return u.val if isinstance(u, Jet) else u


class _Evaluator:
    def __init__(self, expr: "Expression"):
        self.expr = expr

    def fail(self, message: str, node: Node):
        raise DomainError(message, node.pos, _render(node, self.expr.variables))

    def __call__(self, node: Node, env):
        if isinstance(node, Const):
            return node.value
        if isinstance(node, Var):
            return env[node.index]
        if isinstance(node, BinOp):
            a = self(node.left, env)
            b = self(node.right, env)
            if node.op == "+":
                return a + b if isinstance(a, Jet) or not isinstance(b, Jet) else b + a
            if node.op == "-":
                return a - b if isinstance(a, Jet) or not isinstance(b, Jet) else (-b) + a
            if node.op == "*":
                return a * b if isinstance(a, Jet) or not isinstance(b, Jet) else b * a
            if np.any(_value(b) == 0):
                self.fail("division by zero", node)
            if isinstance(b, Jet):
                return b.reciprocal() * a
            return a / b
        if isinstance(node, Pow):
            u = self(node.base, env)
            k = node.exponent
            if k == 0:
                return 1.0
            uv = _value(u)
            if k < 0 and np.any(uv == 0):
                self.fail("negative power of zero", node)
            if isinstance(u, Jet):
                return u.power(k)
            return uv**k if k > 0 else 1.0 / uv ** (-k)
        u = self(node.arg, env)
        uv = _value(u)
        name = node.name
        if name == "neg":
            return -u
        if name == "log" and np.any(uv <= 0):
            self.fail("log of non-positive value", node)
        if name == "sqrt":
            if np.any(uv < 0):
                self.fail("sqrt of negative value", node)
            if isinstance(u, Jet) and np.any(uv == 0):
                self.fail("sqrt is not differentiable at 0", node)
        if isinstance(u, Jet):
            out = getattr(u, name)()
        else:
            out = getattr(np, name)(uv)
        if not np.all(np.isfinite(_value(out))):
            self.fail(f"{name} overflow", node)
        return out


@dataclass(frozen=True)
class Expression:
    """Immutable parsed expression over positional coordinates."""

    root: Node
    variables: tuple[str, ...]
    source: str = ""

    @property
    def arity(self) -> int:
        return len(self.variables)

    def _check(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 0 or x.shape[-1] != self.arity:
            raise ValueError(f"expected {self.arity} coordinates, got shape {x.shape}")
        return x

    def _walk(self, env):
        with np.errstate(all="ignore"):
            return _Evaluator(self)(self.root, env)

    def evaluate(self, x) -> np.ndarray | float:
        x = self._check(x)
        out = self._walk([x[..., i] for i in range(self.arity)])
        out = np.broadcast_to(np.asarray(out, dtype=float), x.shape[:-1])
        return float(out) if out.ndim == 0 else out.copy()

    __call__ = evaluate

    def jet(self, x, order: int = 1) -> Jet:
        """Value, gradient and (``order=2``) Hessian at ``x`` in one pass."""
        x = self._check(x)
        n = self.arity
        batch = x.shape[:-1]
        out = self._walk(Jet.variables(x, order))
        if not isinstance(out, Jet):
            const = np.broadcast_to(np.asarray(out, dtype=float), batch)
            return Jet(
                const.copy(),
                np.zeros(batch + (n,)),
                np.zeros(batch + (n, n)) if order >= 2 else None,
            )
        val = np.broadcast_to(out.val, batch).copy()
        grad = np.broadcast_to(out.grad, batch + (n,)).copy()
        hess = None if out.hess is None else np.broadcast_to(out.hess, batch + (n, n)).copy()
        return Jet(val, grad, hess)

    def gradient(self, x) -> np.ndarray:
        return self.jet(x, 1).grad

    def hessian(self, x) -> np.ndarray:
        return self.jet(x, 2).hess

    def derivative(self, x, i: int) -> float:
        if not 0 <= i < self.arity:
            raise IndexError(f"coordinate index {i} out of range for arity {self.arity}")
        return self.gradient(x)[..., i]

    def second_derivative(self, x, i: int, j: int) -> float:
        for k in (i, j):
            if not 0 <= k < self.arity:
                raise IndexError(f"coordinate index {k} out of range for arity {self.arity}")
        return self.hessian(x)[..., i, j]

    def render(self) -> str:
        """Source text in the strict grammar; re-parses to an equivalent tree."""
        return _render(self.root, self.variables)

    def __str__(self) -> str:
        return self.source or self.render()


def parse(source: str, variables: Sequence[str]) -> Expression:
    """Parse ``source`` with variable indices following ``variables``."""
    variables = tuple(variables)
    if len(set(variables)) != len(variables):
        raise ValueError(f"duplicate variable names in {variables}")
    for name in variables:
        if name in FUNCTIONS:
            raise ValueError(f"variable name {name!r} shadows a function")
    root = _Parser(source, variables).parse()
    return Expression(root, variables, source)


def evaluate(e: Expression, x) -> float:
    return e.evaluate(x)


def derivative(e: Expression, x, i: int) -> float:
    return float(e.derivative(x, i))


def second_derivative(e: Expression, x, i: int, j: int) -> float:
    return float(e.second_derivative(x, i, j))
