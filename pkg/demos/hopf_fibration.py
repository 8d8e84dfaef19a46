"""Rotations of S^3 seen through the Hopf map.

Left multiplication by an imaginary quaternion ``c`` moves points of the
unit sphere S^3. The Hopf map sends S^3 onto S^2 and collapses each circle
``x e^{Kt}`` to a point. Because left and right multiplication commute,
the motion descends to S^2, where it is a rotation ``dy/dt = 2 c x y``.

This script checks the commutator, the kernel, the lumped field and the
flows, then writes a few fibers in stereographic coordinates to CSV.
"""
import csv

import numpy as np

from exactlump import check, construct_lumped_field, lie_bracket, pushforward
from exactlump.systems import hopf_fiber, hopf_kernel_field, hopf_problem, stereographic


def random_unit(rng, count, dim):
    x = rng.standard_normal((count, dim))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def main():
    rng = np.random.default_rng(7)
    c = np.array([0.3, -0.5, 0.8])
    problem = hopf_problem(c)
    w = hopf_kernel_field()

    x = random_unit(rng, 500, 4)
    print(f"max |[w, v_c]|  = {np.abs(lie_bracket(w, problem.v, x)).max():.1e}")
    print(f"max |Dpi w|     = {np.abs(pushforward(problem.pi, w, x)).max():.1e}")

    report = check(problem)
    print(f"verdict: {report.verdict}, flow error {report.flow_commutation.max_error:.1e}")

    lumped = construct_lumped_field(problem)
    y = random_unit(rng, 50, 3)
    values, failures = lumped.evaluate_many(y)
    print(f"max |v~(y) - 2 c x y| = {np.abs(values - 2 * np.cross(c, y)).max():.1e} ({failures} failures)")
    print(f"max |v~(y) . y|       = {np.abs(np.sum(values * y, axis=1)).max():.1e}")

    # Fibers over a circle of latitude, one CSV row per point.
    path = "hopf_fibers.csv"
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["fiber", "alpha", "sx", "sy", "sz"])
        for k, phi in enumerate(np.linspace(0, 2 * np.pi, 8, endpoint=False)):
            base = np.array([0.6 * np.cos(phi), 0.6 * np.sin(phi), 0.8])
            pts, alpha = hopf_fiber(base, 64)
            for a, s in zip(alpha, stereographic(pts)):
                out.writerow([k, f"{a:.6f}", *(f"{v:.6f}" for v in s)])
    print(f"wrote {path}")


if __name__ == "__main__":
    main()
