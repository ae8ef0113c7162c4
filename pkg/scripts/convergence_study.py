"""Observed order of the Neumann solver on a manufactured solution.

    python scripts/convergence_study.py --sizes 16 32 64 128 256
"""
import argparse

import numpy as np

from otlab.measures import Ball
from otlab.poisson import flux_from_function, solve_neumann


def exact(p):
    x, y = p[..., 0], p[..., 1]
    return np.exp(x) * np.cos(y) + (x**2 + y**2) ** 2 / 8


def source(p):
    return 2 * (p[..., 0] ** 2 + p[..., 1] ** 2)


def normal_derivative(t):
    x, y = np.cos(t), np.sin(t)
    return (np.exp(x) * np.cos(y) + x / 2) * x + (-np.exp(x) * np.sin(y) + y / 2) * y


def run(n):
    pot = solve_neumann(source, flux_from_function(Ball.centered(1.0), normal_derivative, n), n_r=n)
    vol = pot.polar.volumes()
    ref = exact(pot.nodes)
    ref -= np.sum(ref * vol) / vol.sum()
    hess = float(np.max(np.abs(pot.jet_A - np.diag([1.0, -1.0]))))
    return float(np.max(np.abs(pot.Phi - ref))), hess


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[16, 32, 64, 128, 256])
    args = ap.parse_args()
    prev = None
    print(f"{'n':>5} {'max error':>12} {'order':>7} {'jet error':>10}")
    for n in args.sizes:
        err, hess = run(n)
        order = "" if prev is None else f"{np.log2(prev / err):.3f}"
        print(f"{n:>5} {err:>12.4e} {order:>7} {hess:>10.1e}")
        prev = err


if __name__ == "__main__":
    main()
