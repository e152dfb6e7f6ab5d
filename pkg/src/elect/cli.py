"""Command-line entry point: ``elect <subcommand> ...``.

Exit codes: 0 on success, 1 on usage errors, 2 on data or validation errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import detectors, harness
from .config import ACQUISITIONS, Config, env_seed
from .core import DataError, load_dataset
from .metatrain import BundleError, load_meta_learner, meta_train, save_meta_learner
from .select import adaptive_select
from .testbed import DEFAULT_RATE, make_controlled_testbed, read_manifest, testbed_lineage, write_testbed

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _load_config(args) -> Config:
    cfg = Config.load(args.config) if getattr(args, "config", None) else Config()
    changes = {}
    seed = args.seed if args.seed is not None else env_seed(cfg.seed)
    changes["seed"] = seed
    if getattr(args, "jobs", None) is not None:
        changes["jobs"] = args.jobs
    if getattr(args, "grid", None):
        changes["grid"] = args.grid
    return cfg.replace(**changes)


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"no such file or directory: {path}")
    return p


def cmd_inject(args) -> int:
    mothersets = read_manifest(_existing(args.mothersets))
    seed = args.seed if args.seed is not None else env_seed()
    tasks = make_controlled_testbed(mothersets, seed, args.rate)
    manifest = write_testbed(tasks, args.out, testbed_lineage(mothersets, seed, args.rate))
    print(manifest)
    return EXIT_OK


def cmd_meta_train(args) -> int:
    tasks = read_manifest(_existing(args.tasks))
    config = _load_config(args)
    grid = detectors.load_grid(config.grid)
    ml = meta_train(tasks, grid, config)
    save_meta_learner(ml, args.out)
    print(args.out)
    return EXIT_OK


def cmd_select(args) -> int:
    ml = load_meta_learner(_existing(args.bundle))
    data = load_dataset(_existing(args.data), has_labels=False)
    seed = args.seed if args.seed is not None else env_seed()
    model, trace = adaptive_select(data, ml, args.budget, args.patience, args.acquisition,
                                   init=args.init, seed=seed)
    if args.trace:
        trace.save(args.trace)
    print(model)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    tasks = read_manifest(_existing(args.testbed))
    config = _load_config(args)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    for m in methods:
        try:
            harness.parse_method(m)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    ev = harness.loocv_evaluate(tasks, detectors.load_grid(config.grid), config, methods)
    harness.emit_report(ev, args.out)
    print(Path(args.out) / "summary.csv")
    return EXIT_OK


def cmd_report(args) -> int:
    directory = _existing(args.input)
    for p in harness.rerender_report(directory):
        print(p)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="elect", description="Unsupervised outlier model selection by performance-driven task similarity.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def common(sp, config=True):
        sp.add_argument("--seed", type=int, default=None, help="random seed (default: $ELECT_SEED or 0)")
        if config:
            sp.add_argument("--config", default=None, help="JSON config file")
            sp.add_argument("--grid", default=None, help="model grid JSON (default: shipped grid)")
            sp.add_argument("--jobs", type=int, default=None, help="worker processes for scoring")

    sp = sub.add_parser("inject", help="build a controlled testbed from mothersets")
    sp.add_argument("--mothersets", required=True, help="manifest JSON of motherset CSVs")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--rate", type=float, default=DEFAULT_RATE, help="outlier rate per dataset")
    common(sp, config=False)
    sp.set_defaults(func=cmd_inject)

    sp = sub.add_parser("meta-train", help="fit a meta-learner bundle on labeled tasks")
    sp.add_argument("--tasks", required=True, help="manifest JSON of labeled task CSVs")
    sp.add_argument("--out", required=True, help="bundle directory")
    common(sp)
    sp.set_defaults(func=cmd_meta_train)

    sp = sub.add_parser("select", help="select a model for an unlabeled CSV")
    sp.add_argument("--bundle", required=True, help="meta-learner bundle directory")
    sp.add_argument("--data", required=True, help="unlabeled CSV")
    sp.add_argument("--budget", type=int, default=None, help="maximum iterations")
    sp.add_argument("--patience", type=int, default=None, help="stop after this many unchanged neighbor sets")
    sp.add_argument("--acquisition", choices=ACQUISITIONS, default="ei", help="acquisition function")
    sp.add_argument("--init", choices=("coverage", "random"), default="coverage", help="initial subset")
    sp.add_argument("--trace", default=None, help="write the selection trace JSON (and CSV) here")
    common(sp, config=False)
    sp.set_defaults(func=cmd_select)

    sp = sub.add_parser("evaluate", help="LOOCV evaluation over a testbed")
    sp.add_argument("--testbed", required=True, help="manifest JSON of labeled datasets")
    sp.add_argument("--methods", default=",".join(harness.DEFAULT_METHODS),
                    help="comma-separated methods, e.g. ELECT,GLOBAL_BEST,RANDOM:3")
    sp.add_argument("--out", required=True, help="report directory")
    common(sp)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("report", help="re-render summaries from a report directory")
    sp.add_argument("--in", dest="input", required=True, help="report directory holding results.json")
    sp.set_defaults(func=cmd_report)
    return p


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if args.verbose or os.environ.get("ELECT_VERBOSE"):
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"elect: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, BundleError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"elect: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"elect: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
