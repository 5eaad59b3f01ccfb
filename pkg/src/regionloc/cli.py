"""Command line entry point: ``regionloc <stage> --out DIR [options]``.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import harness
from .classifier import NumericalError
from .geometry import EmptyCloudError
from .pose import NoPoseError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4

# which config field --seed overrides for each stage
SEED_FIELD = {
    "gen-scene": ("scene", "seed"),
    "build-tree": ("tree", "seed"),
    "pretrain": ("meta", "seed"),
    "train": ("classifier", "seed"),
    "localize": ("ransac", "seed"),
    "eval": None,
}


def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError(f"seed {text} is not an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="regionloc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file (defaults apply when omitted)")
    common.add_argument("--seed", type=_u64, help="seed for this stage")
    common.add_argument("--out", required=True, help="experiment directory")
    common.add_argument("--descriptors", help="descriptor provider: oracle or file:<dir>")

    sub.add_parser("gen-scene", parents=[common], help="generate a synthetic scene and its views")
    sub.add_parser("build-tree", parents=[common], help="fuse train views and build the partition tree")
    sub.add_parser("pretrain", parents=[common], help="Reptile meta-initialization on synthetic tasks")
    tr = sub.add_parser("train", parents=[common], help="train the region classifier")
    tr.add_argument("--init", help="initial checkpoint (default: random)")
    tr.add_argument("--iterations", type=int)
    loc = sub.add_parser("localize", parents=[common], help="localize the query views")
    loc.add_argument("--hypotheses", type=int)
    loc.add_argument("--tau", type=float)
    loc.add_argument("--max-refine-iters", type=int)
    loc.add_argument("--mode", choices=["classifier", "oracle-labels"])
    loc.add_argument("--workers", type=int)
    ev = sub.add_parser("eval", parents=[common], help="score estimates against ground truth")
    ev.add_argument("--estimates", help="estimates file (default: OUT/estimates.txt)")
    return parser


def _apply_overrides(cfg: harness.ExperimentConfig, args) -> harness.ExperimentConfig:
    target = SEED_FIELD.get(args.command)
    if args.seed is not None and target:
        setattr(getattr(cfg, target[0]), target[1], args.seed)
    if args.descriptors:
        cfg.descriptors.provider = args.descriptors
    overrides = {
        "init": ("classifier", "init"),
        "iterations": ("classifier", "iterations"),
        "hypotheses": ("ransac", "hypotheses"),
        "tau": ("ransac", "tau"),
        "max_refine_iters": ("ransac", "max_refine_iters"),
        "mode": ("localize", "mode"),
        "workers": ("localize", "workers"),
    }
    for attr, (sec, key) in overrides.items():
        value = getattr(args, attr, None)
        if value is not None:
            setattr(getattr(cfg, sec), key, value)
    return cfg.validate()


def run(args) -> dict:
    cfg = harness.load_config(args.config)
    cfg = _apply_overrides(cfg, args)
    out = args.out
    if args.command == "gen-scene":
        path = harness.gen_scene(cfg, out)
        return {"out": str(path)}
    if args.command == "build-tree":
        tree = harness.build_tree_stage(cfg, out)
        return {"leaves": tree.n_leaves, "mean_leaf_radius": tree.mean_leaf_radius()}
    if args.command == "pretrain":
        harness.pretrain_stage(cfg, out)
        return {"checkpoint": str(Path(out) / "pretrain.srcc")}
    if args.command == "train":
        result, acc = harness.train_stage(cfg, out)
        return {"iterations": len(result.losses), "final_loss": result.losses[-1] if result.losses else None, "accuracy": acc}
    if args.command == "localize":
        report = harness.localize_stage(cfg, out)
    else:
        report = harness.eval_stage(cfg, out, args.estimates)
    return json.loads(report.to_json())


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        summary = run(args)
    except harness.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (harness.DataError, EmptyCloudError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, NoPoseError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        # malformed input files surface as ValueError from the loaders
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    if "rows" in summary:
        summary = {k: v for k, v in summary.items() if k != "rows"}
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
