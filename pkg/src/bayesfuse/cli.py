"""Command-line entry point for the experiment pipeline.

Subcommands mirror the pipeline stages so intermediate artifacts stay
inspectable: gen-synth, train, predict, avu, fuse, ood, eval.  All commands
share --config/--seed/--out/--threads; flags override config values.
"""

from __future__ import annotations

import argparse
import sys

from .errors import PrerequisiteError
from .experiment import STAGES, Workspace, load_config

_STAGE_HELP = {
    "gen-synth": "generate the synthetic in-distribution splits and the unseen-class set",
    "train": "train variational and deterministic heads per modality",
    "predict": "write MC prediction dumps with uncertainty columns",
    "avu": "fit accuracy-vs-uncertainty thresholds on validation predictions",
    "fuse": "apply the uncertainty-gated fusion rule to test predictions",
    "ood": "histogram uncertainties for in-dist vs unseen classes",
    "eval": "assemble accuracy/AUC comparison tables across model kinds",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bayesfuse",
        description="Uncertainty-aware multimodal classification pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in _STAGE_HELP.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", required=True, help="path to the JSON experiment config")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="output directory for artifacts")
        p.add_argument(
            "--threads",
            type=int,
            default=None,
            help="cap on worker threads (the current implementation runs single-threaded)",
        )
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(
            args.config,
            seed_override=args.seed,
            out_override=args.out,
            threads_override=args.threads,
        )
        ws = Workspace(cfg.out_dir)
        STAGES[args.command](cfg, ws)
    except PrerequisiteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
