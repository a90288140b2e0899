"""Command line entry point: ``python -m cidacap <subcommand> [--config FILE] [--section.key VALUE ...]``."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from typing import get_type_hints

from ..synthdata import AnnotationError
from .checkpoint import CheckpointError
from .config import PRESETS, SECTIONS, ConfigError, ExperimentConfig
from . import runner

SUBCOMMANDS = ("gen-data", "train-stage1", "train-stage2", "eval", "matrix", "export-embeddings")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI file; flags below override its values")
    p.add_argument("--preset", choices=sorted(PRESETS), help="start from a named configuration")
    g = p.add_argument_group("config keys")
    for section, klass in SECTIONS.items():
        hints = get_type_hints(klass)
        for f in fields(klass):
            kind = hints[f.name]
            g.add_argument(f"--{section}.{f.name}", dest=f"cfg:{section}.{f.name}", default=None,
                           metavar=kind.__name__.upper(), help=f"default: {f.default!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cidacap", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        _add_config_flags(p)
        if name in ("train-stage1", "train-stage2"):
            p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint")
        if name == "matrix":
            p.add_argument("--configs", nargs="+", default=["CI", "CICL", "CISC"],
                           help="preset names or INI files, one row group each")
            p.add_argument("--out", default=None, help="write the table here as well as to stdout")
        if name == "export-embeddings":
            p.add_argument("--out", required=True)
            p.add_argument("--split", default="TEST")
            p.add_argument("--domain", default=None, choices=["SOURCE", "TARGET"])
    return parser


def config_from_args(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    overrides = {}
    if args.preset:
        overrides.update(PRESETS[args.preset])
        overrides["run.name"] = args.preset
    for k, v in vars(args).items():
        if k.startswith("cfg:") and v is not None:
            overrides[k[4:]] = v
    return cfg.with_overrides(overrides) if overrides else cfg


def _matrix_configs(args, base: ExperimentConfig) -> list[ExperimentConfig]:
    configs = []
    for item in args.configs:
        if item in PRESETS:
            cfg = base.with_overrides({**PRESETS[item], "run.name": item,
                                       "run.out_dir": f"{base.run.out_dir}/{item}"})
        else:
            cfg = ExperimentConfig.load(item)
        configs.append(cfg)
    return configs


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        if args.command == "gen-data":
            print(runner.generate_data(cfg))
        elif args.command == "train-stage1":
            _, evals = runner.run_stage1(cfg, resume=args.resume)
            for ev in evals:
                print(f"increment {ev['step']}: mean accuracy {ev['mean_accuracy']:.4f}"
                      f" old-class accuracy {ev['old_class_accuracy']}")
        elif args.command == "train-stage2":
            runner.run_stage2(cfg, resume=args.resume)
            print(runner.RunPaths(cfg.run.out_dir).checkpoints)
        elif args.command == "eval":
            reports = runner.run_eval(cfg)
            for domain, rep in reports.items():
                print(domain + "\t" + "\t".join(f"{k}={v:.4f}" for k, v in rep.items()))
        elif args.command == "matrix":
            sys.stdout.write(runner.run_matrix(_matrix_configs(args, cfg), args.out))
        elif args.command == "export-embeddings":
            print(runner.export_embeddings_file(cfg, args.out, args.split, args.domain))
    except (ConfigError, CheckpointError, AnnotationError, FileNotFoundError, ValueError) as exc:
        print(f"cidacap {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
