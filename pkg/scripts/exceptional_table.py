#!/usr/bin/env python3
"""Exceptional values and group velocities of a benchmark guide over a list of mesh sizes.

Prints one row per (h, exceptional value) and the observed convergence
slope of the positive value, measured against the finest mesh.
"""
from __future__ import annotations

import argparse
import time

from lapguide.cci import discretize
from lapguide.problem import example_problem
from lapguide.spectral import loglog_slope


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--example", default="example1")
    ap.add_argument("--h", default="0.04,0.02,0.01,0.005", help="comma separated, coarse to fine")
    ap.add_argument("--bc", default="neumann", choices=("neumann", "dirichlet"))
    args = ap.parse_args()

    prob = example_problem(args.example, bc=args.bc)
    hs = [float(v) for v in args.h.split(",")]
    top = []
    print(f"{'h':>7} {'beta':>10} {'lambda':>10} class  time[s]")
    for h in hs:
        t0 = time.perf_counter()
        spec = discretize(prob, h).spectral
        dt = time.perf_counter() - t0
        for ms in spec.modes:
            cls = "S+" if ms.beta_hat in spec.s_plus else "S-"
            for lam in ms.lambdas:
                print(f"{h:7.4f} {ms.beta_hat:10.6f} {lam:10.6f} {cls:5s} {dt:7.1f}")
        top.append(max(spec.all_betas) if spec.all_betas else float("nan"))
    if len(hs) >= 3:
        diffs = [abs(b - top[-1]) for b in top[:-1]]
        print(f"slope of |beta(h) - beta({hs[-1]})|: {loglog_slope(hs[:-1], diffs):.2f}")


if __name__ == "__main__":
    main()
