"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 missing prerequisite,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import pipeline
from .checkpoint import CheckpointError
from .config import ConfigError, load_config
from .datagen import DatagenError
from .dictionary import DictionaryError
from .diffusion import ScheduleError
from .diffusion.models import ModelError
from .eval import EvalError
from .fields import TrainingDiverged
from .geometry import GeometryError
from .pipeline import NumericalError, PipelineError, PrerequisiteError, run_stage

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PREREQ = 3
EXIT_NUMERIC = 4


def build_parser():
    parser = argparse.ArgumentParser(
        prog="deform4d",
        description="4D deforming-shape generation pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", default=None, help="JSON config overrides")
        p.add_argument("--preset", choices=["desk", "paper"], default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--run-dir", default="runs/default")

    for stage in pipeline.STAGE_ORDER:
        p = sub.add_parser(stage, help=f"pipeline stage: {stage}")
        add_common(p)

    p = sub.add_parser("sample", help="generate deforming sequences")
    add_common(p)
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--frames", type=int, default=16)

    p = sub.add_parser("extend", help="out-paint more frames onto a generated sequence")
    add_common(p)
    p.add_argument("--sequence", required=True)
    p.add_argument("--n-new", type=int, default=4)

    p = sub.add_parser("fit-unseen", help="fit an unseen mesh and animate it")
    add_common(p)
    p.add_argument("--mesh", required=True)
    p.add_argument("--frames", type=int, default=16)

    p = sub.add_parser("evaluate", help="metrics + novelty for generated sequences")
    add_common(p)
    p.add_argument("--gen-dir", default=None)
    p.add_argument("--ref", default="test", choices=["train", "val", "test"])

    p = sub.add_parser("reconstruct-ablation", help="four-variant reconstruction table")
    add_common(p)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config, args.preset, args.seed)
        if args.command in pipeline.STAGES:
            report = run_stage(args.command, config, args.run_dir)
        elif args.command == "sample":
            report = pipeline.sample(config, args.run_dir, args.n, args.frames, args.seed)
        elif args.command == "extend":
            report = pipeline.extend(config, args.run_dir, args.sequence, args.n_new, args.seed)
        elif args.command == "fit-unseen":
            report = pipeline.fit_and_animate(
                config, args.run_dir, args.mesh, args.frames, args.seed
            )
        elif args.command == "evaluate":
            report = pipeline.evaluate(config, args.run_dir, args.gen_dir, args.ref)
        elif args.command == "reconstruct-ablation":
            report = pipeline.reconstruct_ablation(config, args.run_dir)
        else:  # pragma: no cover - argparse enforces the choices
            raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, DatagenError, EvalError, CheckpointError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PrerequisiteError as exc:
        print(f"prerequisite missing: {exc}", file=sys.stderr)
        return EXIT_PREREQ
    except (
        NumericalError,
        TrainingDiverged,
        GeometryError,
        DictionaryError,
        ScheduleError,
        ModelError,
        PipelineError,
    ) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(json.dumps(report, indent=1, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
