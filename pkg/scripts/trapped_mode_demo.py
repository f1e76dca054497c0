#!/usr/bin/env python3
"""Build a perturbation that turns the remark2 field into a bound state and show it is detected.

With k² = 3.2 the unperturbed guide carries no propagating modes, so the
solution u is real and decays. Setting q = -f / (k² u) on supp f makes u a
solution of the homogeneous perturbed problem; the solver should refuse it.
"""
from __future__ import annotations

import argparse
import dataclasses

from lapguide.cci import cci_solve
from lapguide.errors import TrappedModeError
from lapguide.problem import construct_trapped_mode_perturbation, example_problem


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--h", type=float, default=0.04)
    ap.add_argument("--N", type=int, default=32)
    args = ap.parse_args()

    base = example_problem("remark2")
    sol = cci_solve(base, args.h, args.N)
    print(f"unperturbed: ||u||_L2(cell 0) = {sol.field.l2_norm():.6g}, "
          f"reduced rcond = {sol.report.get('reduced_rcond', 'n/a')}")
    q = construct_trapped_mode_perturbation(sol.field, base.f, base.k)
    try:
        cci_solve(dataclasses.replace(base, q=q, name="trapped"), args.h, args.N)
    except TrappedModeError as exc:
        print(f"perturbed: trapped mode detected ({exc})")
        return
    raise SystemExit("perturbed: solve succeeded, the trapped mode was NOT detected")


if __name__ == "__main__":
    main()
