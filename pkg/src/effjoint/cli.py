"""Command-line entry point: ``effjoint {run,sweep,direct-fusion,deflection}``.

Exit codes: 0 success, 2 configuration error, 3 filter degeneration.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import ConfigError, DegenerateLikelihood, ParameterError
from .experiment import load_config, run_direct_fusion, run_experiment, run_sweep
from .kinematics import cantilever_max_deflection

EXIT_CONFIG = 2
EXIT_DEGENERATE = 3


def _load(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.raw = {**cfg.raw, "seed": args.seed}
    if args.out is not None:
        cfg.output = Path(args.out)
    return cfg


def _emit(args, payload):
    if not args.quiet:
        print(json.dumps(payload, indent=2, sort_keys=True))


def cmd_run(args):
    cfg = _load(args)
    result = run_experiment(cfg)
    s = result.summary
    _emit(args, {k: s[k] for k in ("rmse", "naive_rmse", "min_ess", "degenerate_steps", "runtime_s")})
    if s["degenerate_steps"]:
        return EXIT_DEGENERATE
    return 0


def cmd_sweep(args):
    cfg = _load(args)
    report = run_sweep(cfg, jobs=args.jobs)
    _emit(args, {"parameter": report["parameter"],
                 "rows": [{k: r[k] for k in ("value", "mean_rmse", "min_ess", "degenerate")} for r in report["rows"]]})
    return 0


def cmd_direct_fusion(args):
    cfg = _load(args)
    summary, *_ = run_direct_fusion(cfg)
    _emit(args, summary)
    return 0


def cmd_deflection(args):
    d = cantilever_max_deflection(args.gamma, args.area, args.length, args.youngs, args.inertia)
    out = {"deflection_m": d, "deflection_ratio": d / args.length}
    if args.scale is not None:
        k = args.scale
        ds = cantilever_max_deflection(args.gamma, k**2 * args.area, k * args.length, args.youngs, k**4 * args.inertia)
        out.update(scale=k, scaled_deflection_m=ds, scaled_deflection_ratio=ds / (k * args.length))
    _emit(args, out)
    return 0


def build_parser():
    ap = argparse.ArgumentParser(prog="effjoint", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="experiment JSON file")
            p.add_argument("--seed", type=int, help="override the config seed")
            p.add_argument("--out", help="output directory (overrides config)")
        p.add_argument("--quiet", action="store_true", help="suppress the stdout report")

    p = sub.add_parser("run", help="simulate and filter one scenario")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run one experiment per value of a hyperparameter")
    common(p)
    p.add_argument("--jobs", type=int, default=1, help="parallel sweep values")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("direct-fusion", help="compare Euler-angle direct fusion with the filter")
    common(p)
    p.set_defaults(func=cmd_direct_fusion)

    p = sub.add_parser("deflection", help="cantilever self-weight deflection")
    common(p, config=False)
    p.add_argument("--gamma", type=float, required=True, help="specific weight (N/m^3)")
    p.add_argument("--area", type=float, required=True, help="cross-section area (m^2)")
    p.add_argument("--length", type=float, required=True, help="beam length (m)")
    p.add_argument("--youngs", type=float, required=True, help="Young's modulus (Pa)")
    p.add_argument("--inertia", type=float, required=True, help="second moment of area (m^4)")
    p.add_argument("--scale", type=float, help="also report the beam scaled by this factor")
    p.set_defaults(func=cmd_deflection)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ParameterError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DegenerateLikelihood as exc:
        print(f"filter degeneration: {exc} {exc.diagnostics}", file=sys.stderr)
        return EXIT_DEGENERATE


if __name__ == "__main__":
    sys.exit(main())
