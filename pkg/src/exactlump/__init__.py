"""Exact lumpability of ODE systems under a smooth reduction map.

The core question: does ``dx/dt = v(x)`` induce a well-defined macro
system ``dy/dt = u(y)`` under ``y = pi(x)``? It is answered numerically by
three equivalent pointwise criteria built from ``Dpi`` and its derivative
along ``v``. Fiber constancy of ``Dpi v`` and a direct flow comparison
give two independent checks.
"""

from .expr import DomainError, Expression, ParseError, parse
from .geometry import SmoothMap, VectorField, lie_bracket, lvd, pushforward
from .lumpability import (
    CheckReport,
    LumpedField,
    LumpingProblem,
    Tolerances,
    analyze_point,
    check,
    construct_lumped_field,
    detect_first_integral,
)
from .problemfile import ProblemFileError, load, loads, problem_hash
from .systems import builtin

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "DomainError",
    "Expression",
    "ParseError",
    "parse",
    "SmoothMap",
    "VectorField",
    "lie_bracket",
    "lvd",
    "pushforward",
    "CheckReport",
    "LumpedField",
    "LumpingProblem",
    "Tolerances",
    "analyze_point",
    "check",
    "construct_lumped_field",
    "detect_first_integral",
    "ProblemFileError",
    "load",
    "loads",
    "problem_hash",
    "builtin",
]
