"""Command-line entry point: ``biomarker-audit <subcommand> [options]``.

Exit status: 0 success, 2 configuration error, 3 data error, 4 report
consistency failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from . import pipeline, synth
from .errors import ConfigError, DataError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CONSISTENCY = 0, 2, 3, 4


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--input", help="delimited input table (overrides config)")
    p.add_argument("--out", help="output directory (overrides config)")
    p.add_argument("--seed", type=int, help="master seed (overrides config)")
    p.add_argument("--threads", type=int, help="worker threads; never changes results")
    p.add_argument("--delimiter", help="single-character field delimiter")
    p.add_argument("--no-figures", action="store_true", help="skip PNG figures")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="biomarker-audit",
                                     description="Screen and validate candidate biomarkers.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (("profile", "row/participant counts, missingness, target summary"),
                        ("screen", "firewall + univariate screening with FDR"),
                        ("validate", "11-check battery, verdicts, models, gates"),
                        ("report", "consistency-checked report, figures, audit log"),
                        ("robustness", "held-out check robustness experiment")):
        _common(sub.add_parser(name, help=help_))
    sp = sub.add_parser("synth", help="write a synthetic cohort with its manifest")
    sp.add_argument("--config", help="cohort spec YAML (fields of CohortSpec)")
    sp.add_argument("--preset", choices=sorted(synth.PRESETS))
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--delimiter", default=",")
    return parser


def _run_synth(args) -> int:
    if bool(args.config) == bool(args.preset):
        raise ConfigError("synth needs exactly one of --config or --preset")
    if args.preset:
        spec = synth.PRESETS[args.preset](args.seed if args.seed is not None else 0)
    else:
        try:
            raw = yaml.safe_load(Path(args.config).read_text()) or {}
        except (OSError, yaml.YAMLError) as e:
            raise ConfigError(f"cannot read cohort spec: {e}") from e
        if args.seed is not None:
            raw["seed"] = args.seed
        elif "seed" not in raw:
            raise ConfigError("a seed is required (spec 'seed' or --seed)")
        spec = synth.CohortSpec.from_mapping(raw)
    pipeline.ensure_writable(args.out)
    ds, info = synth.generate(spec)
    paths = synth.write_cohort(ds, info, args.out, args.delimiter)
    print(json.dumps({k: str(v) for k, v in paths.items()}, sort_keys=True))
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth":
            return _run_synth(args)
        cfg = pipeline.load_config(args.config, input=args.input, out=args.out, seed=args.seed,
                                   threads=args.threads, delimiter=args.delimiter)
        if args.no_figures:
            cfg = pipeline.with_overrides(cfg, figures=False)
        cmd = {"profile": pipeline.cmd_profile, "screen": pipeline.cmd_screen,
               "validate": pipeline.cmd_validate, "report": pipeline.cmd_report,
               "robustness": pipeline.cmd_robustness}[args.command]
        doc = cmd(cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ValueError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    if args.command == "report" and not doc["consistent"]:
        for m in doc["mismatches"]:
            print(f"consistency failure: {m}", file=sys.stderr)
        return EXIT_CONSISTENCY
    print(f"{args.command}: wrote {cfg.out}")
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
