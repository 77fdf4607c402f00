"""Command-line entry point for training, sweeps and diagnostic dumps.

Exit codes: 0 success, 2 configuration error, 3 numerical failure across an
entire sweep point, 4 I/O error.
"""

import argparse
import sys

from hmimo.green import WaveConfig, QuadratureRule, field_dump, write_field_dump_csv
from hmimo.estimator import NumericalFailure
from hmimo.harness import (ConfigError, build_geometry, crlb_rows, load_config,
                           load_nets, run_point, sweep, train_surrogates,
                           write_rows_csv)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4


def _parser():
    parser = argparse.ArgumentParser(
        prog="hmimo",
        description="Near-field channel estimation experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, desc in (
            ("train", "train the channel surrogates and save their weights"),
            ("sweep", "run the configured Monte-Carlo sweep"),
            ("point", "run a single sweep point at the fixed settings"),
            ("field-dump", "dump a channel component over a plane of positions"),
            ("crlb", "tabulate the position error bound over the sweep grid")):
        p = sub.add_parser(name, help=desc)
        p.add_argument("--config", help="YAML config overriding the profile")
        p.add_argument("--profile", choices=("ci", "paper"), default="ci")
        p.add_argument("--seed", type=int, help="master seed override")
        p.add_argument("--out", help="output file override")
        p.add_argument("--threads", type=int, default=1,
                       help="worker threads per sweep point")
    fd = sub.choices["field-dump"]
    fd.add_argument("--axis", choices=("x", "y", "z"), default="y",
                    help="coordinate held fixed")
    fd.add_argument("--value", type=float, default=0.0,
                    help="value of the fixed coordinate")
    fd.add_argument("--range1", type=float, nargs=2, default=(-1.0, 1.0))
    fd.add_argument("--range2", type=float, nargs=2, default=(20.0, 40.0))
    fd.add_argument("--resolution", type=int, nargs=2, default=(41, 41))
    return parser


def _config_from_args(args):
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["paths"] = {"out": args.out}
    if args.threads and args.threads > 1:
        overrides["threads"] = args.threads
    return load_config(args.config, profile=args.profile, overrides=overrides)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = _config_from_args(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        if args.command == "train":
            train_surrogates(cfg, progress=print)
        elif args.command == "sweep":
            nets = load_nets(cfg)
            rows = sweep(cfg, nets, progress=print)
            write_rows_csv(cfg["paths"]["out"], rows)
            print(f"wrote {cfg['paths']['out']}")
        elif args.command == "point":
            nets = load_nets(cfg)
            variable = cfg["sweep"]["variable"]
            value = cfg["fixed"][
                {"snr": "snr", "length": "length",
                 "chains": "chains", "patches": "patches"}.get(variable, "snr")]
            if value is None:
                value = cfg["sweep"]["values"][0]
            rows = run_point(cfg, nets, variable, value, 0)
            write_rows_csv(cfg["paths"]["out"], rows)
            print(f"wrote {cfg['paths']['out']}")
        elif args.command == "field-dump":
            geom = build_geometry(cfg)
            wave = WaveConfig(cfg["wave"]["frequency"])
            quad = QuadratureRule(cfg["quadrature_order"])
            dump = field_dump(geom, wave, quad, args.axis, args.value,
                              tuple(args.range1), tuple(args.range2),
                              tuple(args.resolution))
            write_field_dump_csv(cfg["paths"]["out"], dump)
            print(f"wrote {cfg['paths']['out']}")
        elif args.command == "crlb":
            nets = load_nets(cfg)
            rows = crlb_rows(cfg, nets["exact"])
            write_rows_csv(cfg["paths"]["out"], rows)
            print(f"wrote {cfg['paths']['out']}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (IOError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
