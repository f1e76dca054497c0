"""Command line front end: ``lapguide <verb> [options]``.

Exit status is 0 on success, otherwise the exit code of the raised error
(see lapguide.errors).
"""
from __future__ import annotations

import argparse
import json
import sys
from typing import Optional, Sequence

from .errors import ConfigurationError, LapGuideError
from .harness import VERBS, RunConfig, problem_from_args, run
from .oracle import DEFAULT_EPSILONS
from .problem import parse_keyvalue


def _list(conv):
    def parse(text: str):
        try:
            return tuple(conv(v) for v in text.replace(" ", "").split(",") if v)
        except ValueError as exc:
            raise argparse.ArgumentTypeError(f"cannot parse list {text!r}") from exc
    return parse


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lapguide", description="Scattering in locally perturbed periodic waveguides.")
    p.add_argument("verb", choices=VERBS)
    p.add_argument("--example", help="benchmark id: 1, 2 or remark2")
    p.add_argument("--config", help="key = value file (flags given on the command line win)")
    p.add_argument("--method", choices=("cci", "decomp", "oracle"))
    p.add_argument("--h", type=_list(float), help="mesh size(s), comma separated")
    p.add_argument("--N", type=_list(int), help="quadrature size(s), comma separated")
    p.add_argument("--delta", type=float, help="indentation radius of the CCI path")
    p.add_argument("--sigma", type=float, help="shift of the decomposition line")
    p.add_argument("--bc", choices=("neumann", "dirichlet"))
    p.add_argument("--cells", type=_list(int), help="cell indices to export")
    p.add_argument("--out", help="output directory")
    p.add_argument("--ref-N", type=int, dest="ref_N")
    p.add_argument("--ref-h", type=float, dest="ref_h")
    p.add_argument("--axis", choices=("h", "N"))
    p.add_argument("--epsilons", type=_list(float), help="oracle damping schedule")
    p.add_argument("--R", type=int, help="oracle half length in cells (default: automatic)")
    p.add_argument("--no-svg", action="store_true")
    return p


_RUN_KEYS = {"method": str, "h": _list(float), "n": _list(int), "delta": float, "sigma": float,
             "cells": _list(int), "out": str, "ref_n": int, "ref_h": float, "axis": str,
             "epsilons": _list(float), "r": int}


def config_from_args(args: argparse.Namespace) -> RunConfig:
    file_opts: dict = {}
    if args.config:
        try:
            with open(args.config) as fh:
                kv = parse_keyvalue(fh.read())
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {args.config}: {exc}") from exc
        for key, conv in _RUN_KEYS.items():
            if key in kv:
                file_opts[key] = conv(kv[key])
    prob = problem_from_args(args.example, args.config, args.bc)

    def pick(name: str, key: str, default):
        val = getattr(args, name)
        if val is not None:
            return val
        return file_opts.get(key, default)

    return RunConfig(
        verb=args.verb, problem=prob, method=pick("method", "method", "cci"),
        h=pick("h", "h", (0.02,)), N=pick("N", "n", (64,)), delta=pick("delta", "delta", None),
        sigma=pick("sigma", "sigma", 0.2), cells=pick("cells", "cells", (0,)), out=pick("out", "out", "out"),
        ref_N=pick("ref_N", "ref_n", None), ref_h=pick("ref_h", "ref_h", None), axis=pick("axis", "axis", "N"),
        epsilons=pick("epsilons", "epsilons", DEFAULT_EPSILONS), R=pick("R", "r", None), svg=not args.no_svg,
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        summary = run(config_from_args(args))
    except LapGuideError as exc:
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return exc.exit_code
    brief = {k: v for k, v in summary.items() if k not in ("report",)}
    print(json.dumps(brief, default=str, indent=1))
    return 0


if __name__ == "__main__":
    sys.exit(main())
