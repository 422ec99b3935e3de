"""Command line front end.

Every subcommand takes ``--config PATH`` (a JSON document, see config.py for
the schema and defaults) plus optional ``--seed`` and ``--variant`` overrides.
Results are printed as JSON on stdout; failures exit nonzero with a single
JSON error object on stderr so callers can parse either stream.
"""

from __future__ import annotations

import argparse
import json
import sys

from .config import PipelineConfig
from .errors import NoduleGcnError, StageError
from .pipeline import (
    predict_nodule,
    run_pipeline,
    stage_evaluate,
    stage_extract,
    stage_preprocess,
    stage_synth,
    stage_train_extractor,
    stage_train_gcn,
)

COMMANDS = ("synth", "preprocess", "train-extractor", "extract", "train-gcn",
            "evaluate", "predict", "pipeline")


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="nodulegcn",
        description="Slice-graph classifier for lung-nodule CT patches.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "synth": "generate a phantom dataset (volumes plus manifest)",
        "preprocess": "validate annotations and fill the dataset mean",
        "train-extractor": "train the attention CNN on slice patches",
        "extract": "run the trained CNN over every nodule's slices",
        "train-gcn": "train the slice-graph classifier on saved features",
        "evaluate": "score the test split; write report.json and roc.csv",
        "predict": "score a single volume with the trained checkpoints",
        "pipeline": "run preprocess through evaluate in one go",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", required=True, metavar="PATH",
                       help="JSON config file")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--variant", default=None,
                       help="override the variant label in reports")
        if name == "evaluate":
            p.add_argument("--split", default="test",
                           choices=("train", "val", "test"))
        if name == "predict":
            p.add_argument("--volume", required=True, metavar="PATH",
                           help="NVOL volume to score")
            p.add_argument("--center", required=True, type=int, nargs=3,
                           metavar=("X", "Y", "Z"))
            p.add_argument("--slice-range", required=True, type=int, nargs=2,
                           metavar=("LO", "HI"), help="inclusive z extent")
            p.add_argument("--nodule-id", default=None,
                           help="identifier for the output row")
    return parser


def _dispatch(args):
    config = PipelineConfig.from_file(args.config)
    if args.seed is not None:
        config.seed = args.seed
    if args.variant is not None:
        config.variant = args.variant
    if args.command == "synth":
        return stage_synth(config)
    if args.command == "preprocess":
        return stage_preprocess(config)
    if args.command == "train-extractor":
        return stage_train_extractor(config)
    if args.command == "extract":
        return stage_extract(config)
    if args.command == "train-gcn":
        return stage_train_gcn(config)
    if args.command == "evaluate":
        return stage_evaluate(config, split=args.split)
    if args.command == "predict":
        return predict_nodule(config, args.volume, args.center,
                              args.slice_range, nodule_id=args.nodule_id)
    return run_pipeline(config)


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        result = _dispatch(args)
    except StageError as exc:
        print(json.dumps({"error": type(exc).__name__, "stage": exc.stage,
                          "message": str(exc)}), file=sys.stderr)
        return 1
    except NoduleGcnError as exc:
        print(json.dumps({"error": type(exc).__name__, "stage": None,
                          "message": str(exc)}), file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(json.dumps({"error": "FileNotFoundError", "stage": None,
                          "message": str(exc)}), file=sys.stderr)
        return 1
    print(json.dumps(result, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
