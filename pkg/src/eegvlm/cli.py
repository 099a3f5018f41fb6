"""Command-line entry point: ``eegvlm <command> [--config run.yaml] [flags]``.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import __version__, pipeline
from .config import PRESETS, load_config
from .errors import EEGVLMError, ValidationError
from .stages import EXCLUDED
from .synthetic import balanced_stages, write_fixture

log = logging.getLogger("eegvlm")

COMMANDS = {
    "preprocess": pipeline.cmd_preprocess,
    "render": pipeline.cmd_render,
    "train-vision": pipeline.cmd_train_vision,
    "gen-cot": pipeline.cmd_gen_cot,
    "train-joint": pipeline.cmd_train_joint,
    "evaluate": pipeline.cmd_evaluate,
    "report": pipeline.cmd_report,
}

UPSTREAM = ["preprocess", "render", "train-vision", "gen-cot"]
PER_RUN = ["train-joint", "evaluate"]


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--seed", type=int, help="override the run seed")
    p.add_argument("--out", help="override the output directory")
    p.add_argument("--skip-bad", action="store_true", help="skip malformed recordings instead of failing")
    p.add_argument("--preset", choices=sorted(PRESETS), help="ablation preset")
    p.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eegvlm", description="EEG sleep staging with a vision-language pipeline.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        _common(sub.add_parser(name, help=f"run the {name} step"))

    p = sub.add_parser("run-all", help="every step, then evaluate one or more presets")
    _common(p)
    p.add_argument("--presets", nargs="+", choices=sorted(PRESETS), help="presets to train and evaluate")

    p = sub.add_parser("make-fixture", help="write a synthetic EDF+ recording with an embedded hypnogram")
    p.add_argument("path")
    p.add_argument("--per-class", type=int, default=10)
    p.add_argument("--excluded", type=int, default=0, help="append this many Movement-time epochs")
    p.add_argument("--fs", type=float, default=100.0)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    out = {}
    if args.seed is not None:
        out["seed"] = args.seed
    if args.out:
        out["out"] = args.out
    if args.skip_bad:
        out["skip_bad"] = True
    if args.preset:
        out["preset"] = args.preset
    return out


def _run(args: argparse.Namespace) -> object:
    if args.command == "make-fixture":
        stages = balanced_stages(args.per_class, args.seed) + [EXCLUDED] * args.excluded
        return {"path": str(write_fixture(args.path, stages, args.fs, args.seed)), "epochs": len(stages)}

    cfg = load_config(args.config, _overrides(args))
    cfg.validate()
    if args.command != "run-all":
        return COMMANDS[args.command](cfg)

    results = {name: COMMANDS[name](cfg) for name in UPSTREAM}
    for preset in args.presets or [cfg.preset or "patch-aligned"]:
        run_cfg = load_config(args.config, {**_overrides(args), "preset": preset}).validate()
        results[preset] = {name: COMMANDS[name](run_cfg) for name in PER_RUN}
    results["report"] = pipeline.cmd_report(cfg)
    return results


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        result = _run(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except EEGVLMError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(result, indent=1, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
