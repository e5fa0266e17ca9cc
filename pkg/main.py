#!/usr/bin/env python3 -u
"""
segp-bench - desk-scale continual learning with adversarial anchors
"""

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

# Add src to path
sys.path.insert(0, str(Path(__file__).parent))

from src.clmetrics import summarize
from src.config_loader import ConfigLoader
from src.duotower import save_model
from src.errors import ConfigError, SegpError, StageFailure
from src.report import emit_report, read_accuracy, summary_table
from src.streambench import (K_ADV_VALUES, SWEEP_AXES, MethodFlags, generate_stream, pretrain_towers,
                             pretrained_model, run_ablation, run_directory_names, run_experiment, run_sweep)
from src.validator import TRAIN_PRESETS

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2

# Commands that compare runs; they train with the bench preset unless run.preset is configured.
TREND_COMMANDS = ("ablate", "sweep", "sweep-kadv", "drift-probe")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="JSON configuration file (defaults are built in)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one configuration value; repeatable")
    common.add_argument("--seed", type=int, help="master seed (run.seed)")
    common.add_argument("--output-dir", help="where artifacts are written (run.output_dir)")
    common.add_argument("--workers", type=int, help="parallel runs in a grid (run.workers)")
    common.add_argument("--preset", choices=TRAIN_PRESETS, help="training preset (run.preset)")
    common.add_argument("--pretrained", help="saved pretrained towers to start from (run.pretrained_path)")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging and progress bars")

    parser = argparse.ArgumentParser(prog="segp-bench", description=__doc__.strip())
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("pretrain", parents=[common], help="pretrain the base towers and save them")
    sub.add_parser("run", parents=[common], help="one run with the configured method flags")
    sub.add_parser("ablate", parents=[common], help="the five-row component ablation grid")
    sub.add_parser("sweep-kadv", parents=[common], help="sweep DPGD iterations over 0, 5, 10, 20, 40")
    sweep = sub.add_parser("sweep", parents=[common], help="sweep one hyperparameter")
    sweep.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    sweep.add_argument("--values", required=True, nargs="+", help="values to try")
    sub.add_parser("drift-probe", parents=[common], help="per-stage boundary/core JSD drift")
    metrics = sub.add_parser("metrics", help="recompute CL metrics from a run directory")
    metrics.add_argument("run_dir", help="directory holding accuracy_matrix.csv")
    metrics.add_argument("-v", "--verbose", action="store_true")
    return parser


def _flag_values(args):
    """Dedicated CLI flags as (section, key, value); applied after --set."""
    for flag, key in (("seed", "seed"), ("output_dir", "output_dir"), ("workers", "workers"),
                      ("preset", "preset"), ("pretrained", "pretrained_path")):
        value = getattr(args, flag, None)
        if value is not None:
            yield "run", key, value
    if getattr(args, "verbose", False):
        yield "run", "verbose", True


def _parse_value(text: str):
    try:
        return int(text)
    except ValueError:
        return float(text)


def _print_drift(records):
    for record in records:
        for stage, (_, summary) in sorted(record.drift.items()):
            print(f"[{record.label}] stage {stage}: boundary JSD {summary.boundary_mean:.5f} "
                  f"({summary.boundary_count}), core JSD {summary.core_mean:.5f} ({summary.core_count})")


def run_command(args) -> int:
    if args.command == "metrics":
        matrix = read_accuracy(args.run_dir)
        for name, value in summarize(matrix).items():
            print(f"{name:>10}: {'n/a' if value is None else f'{value:.4f}'}")
        return EXIT_OK

    loader = ConfigLoader(args.config, args.overrides)
    for section, key, value in _flag_values(args):
        loader.set(section, key, value)
    if args.command in TREND_COMMANDS and not loader.is_explicit("run", "preset"):
        loader.set("run", "preset", "bench")
    settings = loader.get_settings()
    output_dir = Path(settings.run.output_dir)
    progress = settings.run.verbose

    if args.command == "pretrain":
        model = pretrain_towers(settings)
        path = save_model(model, output_dir / "pretrained.json")
        print(f"Pretrained towers saved to {path}")
        return EXIT_OK

    if args.command == "run":
        [name] = run_directory_names([settings.run.label])
        records = [run_experiment(settings, label=settings.run.label, progress=progress,
                                  artifact_dir=output_dir / name)]
    elif args.command == "ablate":
        records = run_ablation(settings, progress=progress, output_dir=output_dir)
    elif args.command == "sweep-kadv":
        records = run_sweep("k_adv", K_ADV_VALUES, settings, progress=progress, output_dir=output_dir)
    elif args.command == "sweep":
        records = run_sweep(args.axis, [_parse_value(v) for v in args.values], settings, progress=progress,
                            output_dir=output_dir)
    elif args.command == "drift-probe":
        if not settings.run.drift_probe:
            loader.set("run", "drift_probe", True)
            settings = loader.get_settings()
        stream = generate_stream(settings.stream)
        pretrained = pretrained_model(settings, stream)
        ce_only = replace(settings, flags=MethodFlags(False, False, False, False))
        names = run_directory_names([ce_only.flags.label, settings.run.label])
        records = [run_experiment(ce_only, stream=stream, pretrained=pretrained, progress=progress,
                                  artifact_dir=output_dir / names[0]),
                   run_experiment(settings, stream=stream, pretrained=pretrained, label=settings.run.label,
                                  progress=progress, artifact_dir=output_dir / names[1])]
        _print_drift(records)
    else:
        raise ValueError(f"unknown command {args.command}")

    emit_report(records, output_dir)
    print(summary_table(records), end="")
    print(f"Artifacts written to {output_dir}")
    return EXIT_OK


def main(argv=None) -> int:
    """Main entry point."""
    args = build_parser().parse_args(argv)

    print("segp-bench")
    print("=" * 50)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if args.verbose:
        print("VERBOSE MODE ENABLED")

    try:
        code = run_command(args)
    except (ConfigError, FileNotFoundError) as e:
        print(f"Configuration error: {e}")
        return EXIT_CONFIG
    except StageFailure as e:
        print(f"Run failed at stage {e.stage}: {e.cause}")
        return EXIT_RUNTIME
    except SegpError as e:
        print(f"Error: {e}")
        return EXIT_RUNTIME
    except KeyboardInterrupt:
        print("\nShutting down...")
        return EXIT_RUNTIME
    print("=" * 50)
    return code


if __name__ == "__main__":
    sys.exit(main())
