"""Command line entry point: ``solve``, ``sweep`` and ``check``.

Exit codes: 0 success, 2 invalid configuration, 3 run failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from . import harness
from .baselines import Scheme
from .errors import ParseError, ValidationError
from .scenario import PRESETS

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 2, 3


def _parser():
    p = argparse.ArgumentParser(prog="uavisac", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log solver progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("solve", help="run the configured schemes for one seed")
    s.add_argument("--config", required=True)
    s.add_argument("--scheme", choices=[x.value for x in Scheme])
    s.add_argument("--seed", type=int)
    s.add_argument("--preset", choices=sorted(PRESETS))
    s.add_argument("--out")

    w = sub.add_parser("sweep", help="sweep one parameter over a list of values")
    w.add_argument("--config", required=True)
    w.add_argument("--param", required=True, choices=harness.SWEEP_PARAMS)
    w.add_argument("--values", required=True, help="comma separated, ascending")
    w.add_argument("--out")

    c = sub.add_parser("check", help="validate a configuration file only")
    c.add_argument("--config", required=True)
    return p


def _load(path, **overrides):
    cfg = harness.load_config_file(path)
    cfg = replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    return cfg.validate()


def _report(rec):
    if rec.failed:
        print(f"{rec.scheme:<11} seed={rec.seed} value={rec.sweep_value} FAILED {rec.error}")
    else:
        value = "" if rec.sweep_value is None else f" {rec.sweep_param}={rec.sweep_value:g}"
        print(f"{rec.scheme:<11} seed={rec.seed}{value} wsr={rec.wsr:.4f} "
              f"violation={rec.violation:.3e} feasible={rec.feasible} status={rec.status}", flush=True)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "check":
            cfg = _load(args.config)
            runs = len(cfg.schemes) * len(cfg.points()) * cfg.num_seeds
            print(f"ok: {runs} run(s), schemes {', '.join(cfg.schemes)}")
            return EXIT_OK
        if args.command == "solve":
            cfg = _load(args.config, preset=args.preset, seed=args.seed,
                        schemes=(args.scheme,) if args.scheme else None)
            cfg = replace(cfg, sweep_param=None, sweep_values=(), num_seeds=1)
        else:
            values = [float(v) for v in args.values.replace(" ", "").split(",") if v]
            cfg = _load(args.config).with_sweep(args.param, values).validate()
    except (ParseError, ValidationError) as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (OSError, ValueError) as exc:
        print(f"cannot read configuration: {exc}", file=sys.stderr)
        return EXIT_INVALID

    outdir = args.out or cfg.outdir
    try:
        records = harness.run_experiment(cfg, outdir=outdir, progress=_report)
    except OSError as exc:
        print(f"cannot write results: {exc}", file=sys.stderr)
        return EXIT_FAILED
    if any(r.failed for r in records):
        return EXIT_FAILED
    print(f"wrote {outdir}")
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
