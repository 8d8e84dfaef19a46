"""Speed is conserved along great circles.

Geodesic motion on the unit sphere lives on its tangent bundle, embedded
in R^6 as ``X.X = 1, X.V = 0``. The squared speed ``I = V.V`` is a first
integral, so it lumps the flow to the zero field on the real line. Away
from ``V = 0`` its differential has rank one.
"""
import numpy as np

from exactlump import check, detect_first_integral
from exactlump.flows import integrate
from exactlump.lumpability import sample_points
from exactlump.systems import geodesic_problem


def main():
    problem = geodesic_problem()
    points, stats = sample_points(problem)
    print(f"{stats['returned']} samples, {stats['excluded']} rejected near V = 0")

    fi = detect_first_integral(problem, points)
    print(f"first integral: {fi.detected} (max |Dpi v| = {fi.max_pushforward:.1e})")

    x0 = points[0]
    traj = integrate(problem.v, x0, 10.0, constraints=problem.constraints)
    energy = problem.pi(traj.states)[:, 0]
    print(f"I drift over [0, 10]: {np.abs(energy - energy[0]).max():.1e}")
    print(f"constraint drift    : {max(traj.constraint_drift):.1e}")

    report = check(problem)
    print(f"verdict: {report.verdict}")


if __name__ == "__main__":
    main()
