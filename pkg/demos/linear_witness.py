"""When a projection does not lump: the shear.

For ``dx/dt = A x`` and ``y = C x`` everything is linear. The derivative of
``Dpi`` along the flow is ``C A``, so the system lumps exactly when the rows
of ``C A`` lie in the row span of ``C``. The shear ``A = [[0, 1], [0, 0]]``
with ``y = x1`` fails: ``dy/dt = x2`` depends on the discarded coordinate.
"""
import numpy as np

from exactlump import check
from exactlump.linalg import rank
from exactlump.systems import linear_problem


def main():
    A = np.array([[0.0, 1.0], [0.0, 0.0]])
    C = np.array([[1.0, 0.0]])
    print(f"rank C = {rank(C)}, rank [C; CA] = {rank(np.vstack([C, C @ A]))}")

    report = check(linear_problem(A, C, x0=(1.0, 1.0), t_end=0.5))
    print(f"verdict: {report.verdict}")
    for name, worst in report.worst.items():
        print(f"  {name:18s} worst residual {worst['residual']:.3g} at {np.round(worst['witness'], 3)}")

    # A diagonal field keeps ker C invariant, so it lumps.
    report = check(linear_problem(np.diag([1.0, -2.0]), C))
    print(f"diagonal A: {report.verdict}")


if __name__ == "__main__":
    main()
