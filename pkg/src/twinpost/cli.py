"""Command-line interface.

Subcommands: ``simulate`` (exact + sampled histograms), ``fit`` (two-step
Gaussian fit), ``reconstruct`` (EM inversion, optionally of one conditional
slice) and ``analyze`` (postselection sweeps, criterion maps,
quasi-distributions).  Exit codes: 0 success, 1 numerical or model failure,
2 malformed input.
"""

from __future__ import annotations

import argparse
import json
import sys

from .errors import InputError, TwinpostError
from .pipeline import (
    default_config,
    load_config,
    run_analyze,
    run_fit,
    run_reconstruct,
    run_simulate,
)


def _parse_slice(text: str):
    try:
        axis, value = text.split("=", 1)
        axis = axis.strip()
        if axis not in ("c_s", "n_s"):
            raise ValueError(f"unknown slice axis {axis!r}")
        return axis, int(value)
    except ValueError as exc:
        raise InputError(f"invalid --slice {text!r}: expected c_s=K or n_s=K") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="twinpost",
        description="Twin-beam postselection: simulate, reconstruct, analyze.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_input):
        p.add_argument("--config", help="pipeline config JSON (defaults built in)")
        p.add_argument("--out", required=True, help="output directory")
        if needs_input:
            p.add_argument("--input", required=True, help="histogram CSV to process")

    p_sim = sub.add_parser("simulate", help="write exact and sampled photocount histograms")
    common(p_sim, needs_input=False)
    p_sim.add_argument("--seed", type=int, help="override the config seed")

    p_fit = sub.add_parser("fit", help="two-step Gaussian fit of a histogram")
    common(p_fit, needs_input=True)

    p_rec = sub.add_parser("reconstruct", help="maximum-likelihood inversion")
    common(p_rec, needs_input=True)
    p_rec.add_argument("--slice", help="reconstruct one conditional slice, e.g. c_s=5")

    p_ana = sub.add_parser("analyze", help="statistics sweeps and criterion maps")
    common(p_ana, needs_input=True)
    p_ana.add_argument("--slice", help="also analyze one slice in depth, e.g. n_s=10")

    p_cfg = sub.add_parser("config", help="print the default config JSON")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "config":
            print(json.dumps(default_config().to_dict(), indent=1, sort_keys=True))
            return 0
        cfg = load_config(args.config) if args.config else default_config()
        if args.command == "simulate":
            paths = run_simulate(cfg, args.out, seed_override=args.seed)
        elif args.command == "fit":
            paths = run_fit(cfg, args.input, args.out)
        elif args.command == "reconstruct":
            slice_spec = _parse_slice(args.slice) if args.slice else None
            paths = run_reconstruct(cfg, args.input, args.out, slice_spec)
        elif args.command == "analyze":
            slice_spec = _parse_slice(args.slice) if args.slice else None
            paths = run_analyze(cfg, args.input, args.out, slice_spec)
        else:  # pragma: no cover - argparse enforces the choices
            parser.error(f"unknown command {args.command}")
        for p in paths:
            print(p)
        return 0
    except InputError as exc:
        print(json.dumps({"error": "input", "message": str(exc)}), file=sys.stderr)
        return 2
    except TwinpostError as exc:
        print(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}),
            file=sys.stderr,
        )
        return 1


if __name__ == "__main__":
    sys.exit(main())
