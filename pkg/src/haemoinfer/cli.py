"""Command-line entry point: ``haemoinfer <subcommand> --config run.json``.

Exit codes: 0 success, 2 invalid input or configuration, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
import time

from . import __version__
from .errors import InvalidSimulation, ValidationError
from .optimize import OptimizationFailed
from .pipeline import cmd_diagnose, cmd_optimize, cmd_sample, cmd_select, cmd_simulate, cmd_synth, load_config

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3


def _u64(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="run configuration (JSON)")
    common.add_argument("--seed", type=_u64, help="override the configured seed")
    common.add_argument("--out", default="out", help="artifact directory (default: ./out)")
    common.add_argument("--model", choices=("4d", "5d"), type=str.lower, help="override the configured model")
    common.add_argument("--algorithm", choices=("mh", "dr", "am", "dram"), type=str.lower,
                        help="override the configured sampler")
    common.add_argument("--uncorrected-dram", action="store_true",
                        help="evaluate delayed-rejection jump densities on unscaled differences "
                             "(compatibility mode that reproduces falsely accepted proposals)")

    p = argparse.ArgumentParser(prog="haemoinfer", description="Pulmonary network simulation and inference.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="simulate waveforms at simulate.theta")
    sub.add_parser("synth", parents=[common], help="write a noisy synthetic measurement and truth file")
    sub.add_parser("optimize", parents=[common], help="Sobol multistart SQP fit")
    sp = sub.add_parser("sample", parents=[common], help="MCMC from the optimum, then diagnostics")
    sp.add_argument("--resume", action="store_true", help="continue an existing chain file")
    sub.add_parser("diagnose", parents=[common], help="convergence diagnostics of a stored chain")
    sel = sub.add_parser("select", parents=[common], help="score and compare two fitted models")
    sel.add_argument("--models", default="4d,5d", help="comma-separated pair of models (default 4d,5d)")
    return p


def _err(msg: str):
    print(f"haemoinfer: error: {msg}", file=sys.stderr)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    t0 = time.perf_counter()
    try:
        rc = load_config(args.config, seed=args.seed, model=args.model, algorithm=args.algorithm,
                         uncorrected=args.uncorrected_dram)
        if args.command == "simulate":
            meta = cmd_simulate(rc, args.out)
            print(f"{len(meta['files'])} waveform files, {meta['cycles']} cycles "
                  f"(converged={meta['converged']}, dt={meta['dt']:.3e} s)")
        elif args.command == "synth":
            cmd_synth(rc, args.out)
            print(f"wrote {args.out}/measurement.csv and {args.out}/truth.json")
        elif args.command == "optimize":
            cmd_optimize(rc, args.out)
        elif args.command == "sample":
            cmd_sample(rc, args.out, resume=args.resume)
        elif args.command == "diagnose":
            cmd_diagnose(rc, args.out)
        elif args.command == "select":
            models = [m.strip() for m in args.models.split(",")]
            if len(models) != 2:
                raise ValidationError("--models needs exactly two entries")
            cmd_select(rc, args.out, models=models)
    except ValidationError as exc:
        _err(str(exc))
        return EXIT_VALIDATION
    except (InvalidSimulation, OptimizationFailed) as exc:
        _err(str(exc))
        return EXIT_NUMERICAL
    print(f"[{args.command} finished in {time.perf_counter() - t0:.1f} s]", file=sys.stderr)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
