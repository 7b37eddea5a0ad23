"""Command line: generate, train, eval, predict and bench.

Machine-readable output goes to stdout; logs and errors go to stderr. Every
subcommand takes ``--config FILE.json`` whose keys provide defaults for the
flags (flag names with dashes or underscores); explicit flags win.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import ModelConfig, TrainConfig, load_json, model_config_from_dict, to_dict, train_config_from_dict
from .scene import SceneFormatError

log = logging.getLogger("adapt")


class CLIError(Exception):
    pass


def _ints(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("agent counts must be positive")
    return values


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adapt", description="Multi-agent trajectory prediction toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--config", help="generator config JSON")
    g.add_argument("--out", help="output .ndjson path")
    g.add_argument("--seed", type=int)
    g.add_argument("--n-scenes", type=int)
    g.add_argument("--noise-sigma", type=float)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", help='JSON with optional "model" and "train" sections')
    t.add_argument("--data", help="training .ndjson")
    t.add_argument("--out", help="checkpoint path")
    t.add_argument("--log", help="JSON-lines training log path")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--head", choices=["static", "adaptive"])
    t.add_argument("--frame", choices=["scene", "agent"])
    t.add_argument("--no-val", action="store_true", default=None, help="train on every scene")

    e = sub.add_parser("eval", help="metrics of a checkpoint on a dataset")
    e.add_argument("--config")
    e.add_argument("--ckpt")
    e.add_argument("--data")
    e.add_argument("--mode", choices=["single", "multi"])
    e.add_argument("--noise-sigma", type=float)
    e.add_argument("--seed", type=int)
    e.add_argument("--batch-size", type=int)

    r = sub.add_parser("predict", help="prediction dump for scenes")
    r.add_argument("--config")
    r.add_argument("--ckpt")
    r.add_argument("--scene", help="file with one or more adapt-scene/1 records")
    r.add_argument("--world", action="store_true", default=None, help="report world coordinates")
    r.add_argument("--attention", help="write captured attention rows (JSON) to this path")

    b = sub.add_parser("bench", help="single-pass vs per-agent latency")
    b.add_argument("--config")
    b.add_argument("--ckpt")
    b.add_argument("--agents", type=_ints)
    b.add_argument("--repeats", type=int)
    b.add_argument("--warmup", type=int)
    b.add_argument("--threads", type=int)
    b.add_argument("--seed", type=int)
    b.add_argument("--out", help="CSV path")
    return p


DEFAULTS = {
    "generate": {},
    "train": {},
    "eval": {"mode": "multi", "noise_sigma": 0.0, "seed": 0, "batch_size": 64},
    "predict": {"world": False},
    "bench": {"agents": [2, 8, 32], "repeats": 20, "warmup": 3, "threads": 1, "seed": 0},
}


def _merge(args: argparse.Namespace, config: dict, skip=()) -> argparse.Namespace:
    """Fill flags left unset from ``config`` and then from the subcommand defaults."""
    known = set(vars(args))
    for key, value in config.items():
        dest = key.replace("-", "_")
        if dest in skip:
            continue
        if dest not in known or dest in ("config", "command", "verbose"):
            raise CLIError(f"unknown config key {key!r}")
        if getattr(args, dest) is None:
            setattr(args, dest, _ints(value) if dest == "agents" and isinstance(value, str) else value)
    for key, value in DEFAULTS[args.command].items():
        if getattr(args, key) is None:
            setattr(args, key, value)
    return args


def _require(args, *names):
    for name in names:
        if getattr(args, name) in (None, ""):
            raise CLIError(f"--{name.replace('_', '-')} is required")


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj) + "\n")


def cmd_generate(args, config):
    from .synth import GeneratorConfig, generate_dataset, write_dataset

    fields = dict(config)
    for flag in ("seed", "n_scenes", "noise_sigma"):
        if getattr(args, flag) is not None:
            fields[flag] = getattr(args, flag)
    if "out" in fields:
        args.out = args.out or fields.pop("out")
    _require(args, "out")
    try:
        cfg = GeneratorConfig.from_dict(fields)
    except TypeError as exc:
        raise CLIError(f"bad generator config: {exc}") from None
    scenes = generate_dataset(cfg)
    write_dataset(scenes, args.out)
    _emit({"out": args.out, "n_scenes": len(scenes), "config": cfg.to_dict()})


def cmd_train(args, config):
    from .synth import read_dataset
    from .training import train

    _merge(args, config, skip=("model", "train"))
    _require(args, "data", "out")
    model_fields = dict(config.get("model", {}))
    train_fields = dict(config.get("train", {}))
    for flag in ("head", "frame"):
        if getattr(args, flag) is not None:
            model_fields[flag] = getattr(args, flag)
    for flag in ("epochs", "lr", "batch_size", "max_steps", "seed"):
        if getattr(args, flag) is not None:
            train_fields[flag] = getattr(args, flag)
    model_cfg = model_config_from_dict(model_fields)
    train_cfg = train_config_from_dict(train_fields)
    scenes = read_dataset(args.data)
    result = train(scenes, model_cfg, train_cfg, val_split=not args.no_val, log_path=args.log,
                   checkpoint_path=args.out, resume=args.resume)
    _emit({
        "checkpoint": args.out,
        "steps": len(result.log),
        "final_loss": result.log[-1]["loss"] if result.log else None,
        "reports": result.reports,
        "model_config": to_dict(result.model.cfg),
    })


def cmd_eval(args, config):
    from .synth import read_dataset
    from .training import evaluate, load_checkpoint

    _merge(args, config)
    _require(args, "ckpt", "data")
    model, _, _ = load_checkpoint(args.ckpt)
    report = evaluate(model, read_dataset(args.data), args.mode, args.noise_sigma, args.seed, args.batch_size)
    _emit(report.to_dict())


def cmd_predict(args, config):
    from .encoder import capture_records
    from .model import build_batch, make_samples, predict
    from .synth import read_dataset
    from .training import load_checkpoint

    _merge(args, config)
    _require(args, "ckpt", "scene")
    model, _, _ = load_checkpoint(args.ckpt)
    model.eval()
    attention = []
    for i, scene in enumerate(read_dataset(args.scene)):
        preds = predict(model, scene, world=args.world)
        _emit({
            "scene": i,
            "predictions": [
                {"agent_id": p.agent_id, "trajectories": p.trajectory.tolist(), "scores": p.scores.tolist()}
                for p in preds.values()
            ],
        })
        if args.attention:
            from . import tensor as T

            capture = []
            with T.no_grad():
                model.encode(build_batch(make_samples(scene, model.cfg.frame), model.cfg, with_gt=False), capture)
            attention += [{"scene": i, **row} for row in capture_records(capture)]
    if args.attention:
        with open(args.attention, "w") as fh:
            json.dump(attention, fh)


def cmd_bench(args, config):
    from .bench import bench
    from .training import load_checkpoint

    _merge(args, config)
    _require(args, "ckpt")
    model, _, _ = load_checkpoint(args.ckpt)
    result = bench(model, args.agents, args.repeats, args.warmup, args.threads, args.seed)
    if args.out:
        result.write_csv(args.out)
    _emit(result.to_dict())


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict, "bench": cmd_bench}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_json(args.config) if args.config else {}
        if not isinstance(config, dict):
            raise CLIError(f"{args.config}: expected a JSON object")
        COMMANDS[args.command](args, config)
    except (CLIError, SceneFormatError, ValueError, KeyError, OSError) as exc:
        message = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"adapt {args.command}: error: {message}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
