"""Command-line entry point.

Exit codes: 0 = ran to completion (registration failures are recorded in
the outputs, not fatal), 1 = configuration or usage error, 2 = I/O error
or corrupt file.
"""
from __future__ import annotations

import argparse
import os
import sys

from . import pipeline
from .config import load_config
from .errors import (
    ConfigError,
    CorruptFileError,
    FormatError,
    ModSynthError,
    ParameterError,
)


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; the contract reserves 2 for I/O."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="modsynth",
        description=(
            "Voxel-wise contrast synthesis and intensity-based 3D "
            "registration pipeline."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def add(name: str, help_: str, subject: bool = False, mode: str | None = None):
        p = sub.add_parser(name, help=help_, parents=[], prog=f"modsynth {name}")
        p.add_argument("--config", required=True, help="pipeline configuration file")
        p.add_argument(
            "--seed", type=int, default=None,
            help="override every configured seed with this value",
        )
        if subject:
            p.add_argument("--subject", default=None, help="restrict to one subject id")
        if mode is not None:
            p.add_argument(
                "--mode", choices=[pipeline.MODE_BASELINE, pipeline.MODE_SYNTH],
                default=mode or None,
                help="register/evaluate the preprocessed subject (baseline) "
                     "or the synthesized volume (synth)",
            )
        return p

    add("preprocess", "clip, smooth, and rescale the template and subjects",
        subject=True)
    add("train", "pair training subjects with the template and fit the model")
    add("synth", "run the trained model over each subject volume", subject=True)
    add("register", "register the template to each subject", subject=True,
        mode=pipeline.MODE_BASELINE)
    add("evaluate", "score recovered transforms against landmarks", subject=True,
        mode="")
    add("phantom", "generate a synthetic phantom suite with ground truth")
    return parser


def _dispatch(args: argparse.Namespace, cfg) -> list[str]:
    if args.command == "preprocess":
        return pipeline.cmd_preprocess(cfg, subject=args.subject)
    if args.command == "train":
        return list(pipeline.cmd_train(cfg).values())
    if args.command == "synth":
        return pipeline.cmd_synth(cfg, subject=args.subject)
    if args.command == "register":
        tags = pipeline.cmd_register(cfg, subject=args.subject, mode=args.mode)
        reg_dir = os.path.join(cfg.output_dir, "register")
        return [os.path.join(reg_dir, f"{tag}.result.json") for tag in tags]
    if args.command == "evaluate":
        return list(pipeline.cmd_evaluate(cfg, subject=args.subject, mode=args.mode))
    if args.command == "phantom":
        return pipeline.cmd_phantom(cfg)
    raise ConfigError(f"unknown command {args.command!r}")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            pipeline.apply_seed_override(cfg, args.seed)
        for line in _dispatch(args, cfg):
            print(line)
        return 0
    except (ConfigError, ParameterError) as e:
        print(f"modsynth: error: {e}", file=sys.stderr)
        return 1
    except (CorruptFileError, FormatError) as e:
        print(f"modsynth: error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"modsynth: error: {e}", file=sys.stderr)
        return 2
    except ModSynthError as e:
        # degenerate inputs (landmarks, masks, statistics) are configuration
        # problems, not corruption
        print(f"modsynth: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
