"""Command-line entry point: ``vitdeceive <subcommand> [flags]``.

Every subcommand that runs an experiment accepts ``--config FILE`` and
flags overriding individual config fields. Exit code 0 on success, 2 on a
configuration error, 3 on an I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from vitdeceive.experiment import (
    ConfigError,
    EmptyEvalSetError,
    ExperimentConfig,
    MissingSampleError,
    export_maps,
    run_experiment,
)

EXIT_CONFIG = 2
EXIT_IO = 3

DEFAULT_TARGET = {"config": {"depth": 3}, "train": {"epochs": 30, "lr": 1e-3, "seed": 0}}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment config JSON; flags override its fields")
    p.add_argument("--seed", type=int, help="run seed")
    p.add_argument("--out", dest="output_dir", help="run directory")
    p.add_argument("--interpreter", choices=["iared", "chefer"])
    p.add_argument("--eval-size", dest="eval_size", type=int)
    p.add_argument("--surrogate-checkpoint", help="load the surrogate model instead of training it")
    p.add_argument("--target-checkpoint", help="load the target model instead of training it")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--lam", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vitdeceive", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the toy models (and policy) and save checkpoints")
    _common(p)
    p.add_argument("--with-target", action="store_true", help="also train the target model")

    p = sub.add_parser("attack-whitebox", help="interpretation-preserving white-box attack")
    _common(p)

    p = sub.add_parser("attack-blackbox", help="transfer or genetic black-box attack")
    _common(p)
    p.add_argument("--mode", choices=["mga", "transfer"], default="mga")
    p.add_argument("--budget", dest="query_budget", type=int, help="query budget per sample")
    p.add_argument("--generations", type=int)

    p = sub.add_parser("defend", help="genetic attack against a defended target")
    _common(p)
    p.add_argument(
        "--defense",
        action="append",
        choices=["random_resize_pad", "bit_depth", "median_smooth", "adversarial_training"],
        help="repeatable; default: the three pre-processing defenses",
    )
    p.add_argument("--budget", dest="query_budget", type=int)

    p = sub.add_parser("detect", help="train the 2- and 3-channel interpretation detectors")
    _common(p)
    p.add_argument("--samples", dest="detector_samples", type=int)

    p = sub.add_parser("report", help="print the summary of a finished run")
    p.add_argument("run_dir")

    p = sub.add_parser("export-maps", help="write image and map PNGs for selected samples")
    p.add_argument("run_dir")
    p.add_argument("--samples", type=int, nargs="+", required=True)
    return parser


SCENARIO = {
    "train": "whitebox",
    "attack-whitebox": "whitebox",
    "defend": "defended",
    "detect": "detector",
}


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    data: dict = json.loads(Path(args.config).read_text()) if args.config else {}
    if args.command == "attack-blackbox":
        data["scenario"] = "blackbox_mga" if args.mode == "mga" else "blackbox_transfer"
    else:
        data["scenario"] = SCENARIO[args.command]
    for key in ("seed", "output_dir", "interpreter", "eval_size", "workers", "query_budget", "detector_samples"):
        val = getattr(args, key, None)
        if val is not None:
            data[key] = val
    data.setdefault("seed", 0)
    attack = dict(data.get("attack", {}))
    for key in ("epsilon", "lam", "iterations"):
        if getattr(args, key, None) is not None:
            attack[key] = getattr(args, key)
    data["attack"] = attack
    if getattr(args, "generations", None) is not None:
        data["mga"] = {**data.get("mga", {}), "generations": args.generations}
    needs_target = data["scenario"] in ("blackbox_transfer", "blackbox_mga", "defended") or getattr(args, "with_target", False)
    if needs_target and data.get("target") is None:
        data["target"] = dict(DEFAULT_TARGET)
    if args.surrogate_checkpoint:
        data["surrogate"] = {**data.get("surrogate", {}), "checkpoint": args.surrogate_checkpoint}
    if args.target_checkpoint:
        data["target"] = {**(data.get("target") or DEFAULT_TARGET), "checkpoint": args.target_checkpoint}
    if args.command == "defend":
        kinds = args.defense or ["bit_depth", "median_smooth", "random_resize_pad"]
        data["defenses"] = [{"kind": k} for k in kinds]
    return ExperimentConfig.from_dict(data)


def _fmt(v) -> str:
    if isinstance(v, dict) and "mean" in v:
        return "n/a" if v["mean"] is None else f"{v['mean']:.3f} ± {v['std']:.3f}"
    if isinstance(v, float):
        return f"{v:.3f}"
    return "n/a" if v is None else str(v)


def summary_table(summary: dict) -> str:
    """Plain-text table of the headline numbers in a run summary."""
    lines = []

    def block(title: str, s: dict) -> None:
        lines.append(title)
        for key in ("n", "success_rate", "confidence", "iou", "noise_rate", "queries"):
            if key in s:
                lines.append(f"  {key:<14} {_fmt(s[key])}")

    for key, val in summary.items():
        if isinstance(val, dict) and "success_rate" in val:
            block(key, val)
        elif isinstance(val, dict) and "attack" in val and isinstance(val["attack"], dict):
            block(f"{key} (attack)", val["attack"])
        elif key.startswith("mode") or key in ("shuffled_control", "benign", "adversarial"):
            lines.append(f"{key:<16} {val}")
    return "\n".join(lines)


def _train(config: ExperimentConfig) -> dict:
    from vitdeceive.experiment import Context, RunWriter

    writer = RunWriter(config.output_dir)
    writer.text("config.json", config.to_json() + "\n")
    ctx = Context(config, writer)
    ctx.model("surrogate")
    if config.interpreter == "iared":
        ctx.policy("surrogate")
    if config.target is not None:
        ctx.model("target")
        if config.interpreter == "iared":
            ctx.policy("target")
    writer.json("summary.json", {"models": ctx.info})
    return {"models": ctx.info}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING)
    try:
        if args.command == "report":
            summary = json.loads((Path(args.run_dir) / "summary.json").read_text())
            print(summary_table(summary) or json.dumps(summary, indent=2))
            return 0
        if args.command == "export-maps":
            for path in export_maps(args.run_dir, args.samples):
                print(path)
            return 0
        config = config_from_args(args)
        if args.command == "train":
            print(json.dumps(_train(config), indent=2, sort_keys=True))
            return 0
        record = run_experiment(config)
        print(summary_table(record.metrics))
        print(f"run directory: {record.run_dir}")
        return 0
    except (ConfigError, EmptyEvalSetError, MissingSampleError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, json.JSONDecodeError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
