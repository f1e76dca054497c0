#!/usr/bin/env python3
"""Self-referenced convergence tables for the two quadrature solvers.

    convergence_study.py N --example 1 --h 0.02 --N 16,32,64,128 --ref 256
    convergence_study.py h --example 1 --N 128 --h 0.04,0.02,0.01 --ref 0.005
    convergence_study.py compare --example 2 --N 128 --h 0.04,0.02,0.01

Writes one CSV per table into --out and prints the errors, the successive
ratios and the least-squares log-log slope.
"""
from __future__ import annotations

import argparse
import os

from lapguide.harness import Session, compare_methods, convergence_study
from lapguide.problem import example_problem


def _show(title: str, table) -> None:
    print(title)
    for p, e in table.rows:
        print(f"  {p:10.4g}  {e:.3e}")
    if len(table.rows) > 1:
        print("  ratios:", " ".join(f"{r:.3g}" for r in table.ratios()))
    print(f"  slope: {table.slope:.2f}")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("study", choices=("N", "h", "compare"))
    ap.add_argument("--example", default="example1")
    ap.add_argument("--methods", default="cci,decomp")
    ap.add_argument("--h", default="0.02")
    ap.add_argument("--N", default="16,32,64,128")
    ap.add_argument("--ref", type=float, help="reference N (N study) or h (h study)")
    ap.add_argument("--delta", type=float, default=0.2)
    ap.add_argument("--sigma", type=float, default=0.2)
    ap.add_argument("--out", default="out/convergence")
    args = ap.parse_args()

    hs = [float(v) for v in args.h.split(",")]
    Ns = [int(v) for v in args.N.split(",")]
    session = Session(example_problem(args.example))
    os.makedirs(args.out, exist_ok=True)

    if args.study == "compare":
        table = compare_methods(session, hs, Ns[0], args.delta, args.sigma)
        table.to_csv(os.path.join(args.out, f"compare_{args.example}.csv"))
        _show(f"CCI vs decomposition, N={Ns[0]}", table)
        return
    if args.ref is None:
        ap.error("--ref is required for N and h studies")
    for method in args.methods.split(","):
        if args.study == "N":
            table = convergence_study(session, method, "N", Ns, hs[0], int(args.ref), args.delta, args.sigma)
        else:
            table = convergence_study(session, method, "h", hs, Ns[0], args.ref, args.delta, args.sigma)
        table.to_csv(os.path.join(args.out, f"{args.study}_{method}_{args.example}.csv"))
        _show(f"{method}: {args.study}-study, reference {args.ref:g}", table)


if __name__ == "__main__":
    main()
