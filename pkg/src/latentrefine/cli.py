"""Command-line interface: staged experiment runs, scoring, rendering, comparison.

Every training/sampling subcommand takes the same configuration flags and
runs the pipeline up to its stage, reusing completed stages whose config is
unchanged. Exit code is 0 on success and 1 on failure, with the failing
stage named on stderr.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .data import KINDS, load_points_csv
from .errors import ConfigError
from .metrics import ScoreReport
from .pipeline import (
    compare_report,
    desk_config,
    load_config,
    paper_config,
    render_density,
    run_experiment,
    save_config,
)

_STAGE_COMMANDS = {
    "generate-data": "data",
    "train-flow": "flow",
    "train-classifier": "classifier",
    "refine-gan": "refiner",
    "sample-hmc": "hmc",
    "score": "scoring",
    "run-all": None,
}


def _add_config_flags(sub: argparse.ArgumentParser):
    sub.add_argument("--config", help="INI config file; other flags override it")
    sub.add_argument("--preset", choices=["desk", "paper"], default="desk",
                     help="base preset when no --config is given (default: desk)")
    sub.add_argument("--dataset", choices=list(KINDS), help="target density")
    sub.add_argument("--seed", type=int, help="master seed")
    sub.add_argument("--out", help="run directory")
    sub.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                     help="override any config field, e.g. --set flow.epochs=10")


def _build_config(args) -> "RunConfig":
    if args.config:
        config = load_config(args.config)
    elif args.preset == "paper":
        config = paper_config(args.dataset or "gaussians")
    else:
        config = desk_config(args.dataset or "gaussians")
    if args.dataset:
        config.dataset.kind = args.dataset
        if not args.config:
            # kind-dependent architecture default
            if args.dataset == "rings" and args.preset in ("desk", "paper"):
                config.flow.blocks = 20
                config.flow.units = 60
    if args.seed is not None:
        config.seed = args.seed
    if args.out:
        config.out_dir = args.out
    for override in args.set:
        _apply_override(config, override)
    return config


def _apply_override(config, override: str):
    try:
        key, value = override.split("=", 1)
        section_name, field_name = key.split(".", 1)
    except ValueError:
        raise ConfigError(f"override must look like section.key=value, got {override!r}")
    if section_name == "run":
        if field_name == "seed":
            config.seed = int(value)
        elif field_name == "out_dir":
            config.out_dir = value
        else:
            raise ConfigError(f"unknown run field {field_name!r}")
        return
    section = getattr(config, section_name, None)
    if section is None or not hasattr(section, field_name):
        raise ConfigError(f"unknown config field {key!r}")
    current = getattr(section, field_name)
    cast = type(current)
    setattr(section, field_name, cast(value))


def _cmd_stage(args, until: str | None) -> int:
    config = _build_config(args)
    manifest = run_experiment(config, until=until)
    if manifest.failed_stage:
        print(f"failed stage: {manifest.failed_stage}", file=sys.stderr)
        return 1
    return 0


def _cmd_render(args) -> int:
    table = load_points_csv(args.input)
    weights = None
    if table.shape[1] == 3:
        points, weights = table[:, :2], table[:, 2]
    elif table.shape[1] == 5:
        # weighted latent export: z0,z1,x0,x1,w
        points, weights = table[:, :2], table[:, 4]
    else:
        points = table[:, :2]
    bounds = tuple(float(v) for v in args.bounds.split(",")) if args.bounds else (-4, 4, -4, 4)
    render_density(
        points,
        weights=weights,
        path=args.out,
        bounds=bounds,
        bins=(args.bins, args.bins),
        vmax=args.vmax,
    )
    print(args.out)
    return 0


def _cmd_compare(args) -> int:
    reports = []
    for run_dir in args.runs:
        csv_path = Path(run_dir) / "scores" / "scores.csv"
        config_path = Path(run_dir) / "config.ini"
        if not csv_path.exists():
            raise ConfigError(f"no scores found under {run_dir} (run `score` first)")
        dataset = load_config(config_path).dataset.kind if config_path.exists() else ""
        reports.append(ScoreReport.from_csv(csv_path.read_text(), dataset=dataset))
    table = compare_report(reports)
    print(table, end="")
    if args.out:
        Path(args.out).write_text(table)
    return 0


def _cmd_show_config(args) -> int:
    print(save_config(_build_config(args)), end="")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="latentrefine",
        description="Flow training, classifier reweighting, latent refinement, scoring.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for command in _STAGE_COMMANDS:
        p = sub.add_parser(command, help=f"run the pipeline through its '{command}' stage")
        _add_config_flags(p)

    p = sub.add_parser("show-config", help="print the resolved configuration")
    _add_config_flags(p)

    p = sub.add_parser("render", help="render a density heat map from a CSV of points")
    p.add_argument("--input", required=True, help="CSV with x0,x1 (optional weight column)")
    p.add_argument("--out", required=True, help="output PNG path")
    p.add_argument("--bins", type=int, default=64)
    p.add_argument("--bounds", help="x0min,x0max,x1min,x1max")
    p.add_argument("--vmax", type=float, default=None)

    p = sub.add_parser("compare", help="merge score tables from several run directories")
    p.add_argument("runs", nargs="+", help="run directories with scores/scores.csv")
    p.add_argument("--out", help="also write the table to this file")

    args = parser.parse_args(argv)
    try:
        if args.command in _STAGE_COMMANDS:
            return _cmd_stage(args, _STAGE_COMMANDS[args.command])
        if args.command == "render":
            return _cmd_render(args)
        if args.command == "compare":
            return _cmd_compare(args)
        if args.command == "show-config":
            return _cmd_show_config(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # stage failures carry their stage name
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
