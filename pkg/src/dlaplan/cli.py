"""Command line for dlaplan: generate, train, eval, fuse, render.

Exit codes: 0 success, 2 invalid input or configuration, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .blocks import FusedModelError
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import (
    FloorPlanSpec,
    GenerationError,
    ParseError,
    SpecError,
    generate_samples,
    load_dataset,
    load_sample,
    read_manifest,
    save_dataset,
    write_ppm,
)
from .io_utils import atomic_write_text
from .render import panel
from .train import ConfigError, TrainConfig, TrainingDiverged, evaluate, train, write_history

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("dlaplan")


class UsageError(Exception):
    """Bad user input; reported with exit code 2."""


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: dict, overrides, sections=None):
    """Apply ``section.key=value`` strings to a nested config dict in place.

    Values are read as JSON when they parse, otherwise kept as strings.
    Key validation is left to the config class.
    """
    for item in overrides or ():
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise UsageError(f"override {item!r} is not of the form key=value")
        parts = key.split(".")
        if sections is None:
            if len(parts) != 1:
                raise UsageError(f"override key {key!r} must be a plain field name")
            cfg[parts[0]] = _parse_value(value)
            continue
        if len(parts) != 2:
            raise UsageError(f"override key {key!r} must be section.key")
        sec, name = parts
        if sec not in sections:
            raise UsageError(f"unknown config section {sec!r} in override {item!r}")
        cfg.setdefault(sec, {})[name] = _parse_value(value)
    return cfg


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from None


def load_train_config(path=None, overrides=()):
    raw = _read_json(path) if path else {}
    if not isinstance(raw, dict):
        raise UsageError("train config must be a JSON object")
    apply_overrides(raw, overrides, sections={"train", "adv", "noise", "model"})
    return TrainConfig.from_dict(raw)


def load_spec(path=None, overrides=()):
    raw = _read_json(path) if path else {}
    if not isinstance(raw, dict):
        raise UsageError("spec must be a JSON object")
    apply_overrides(raw, overrides)
    return FloorPlanSpec.from_dict(raw)


def _dataset(path):
    try:
        read_manifest(path)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None
    return load_dataset(path)


# -- subcommands ----------------------------------------------------------------

def cmd_generate(args):
    spec = load_spec(args.spec, args.set)
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    samples = generate_samples(spec, args.count, args.seed)
    save_dataset(args.out, samples, spec, args.seed)
    print(f"wrote {args.count} samples to {args.out}")


def cmd_train(args):
    cfg = load_train_config(args.config, args.set)
    dataset = _dataset(args.dataset)
    held = _dataset(args.eval_dataset) if args.eval_dataset else None
    os.makedirs(args.out, exist_ok=True)
    cfg.checkpoint_dir = os.path.join(args.out, "checkpoints")
    os.makedirs(cfg.checkpoint_dir, exist_ok=True)
    atomic_write_text(os.path.join(args.out, "config.json"), json.dumps(cfg.to_dict(), indent=2) + "\n")
    result = train(cfg, dataset, eval_dataset=held)
    write_history(os.path.join(args.out, "loss.csv"), result.history)
    save_checkpoint(os.path.join(args.out, "final.ckpt"), result.model, result.d1, result.d2,
                    {"iteration": int(cfg.iterations)})
    if result.evals:
        it, metrics = result.evals[-1]
        atomic_write_text(os.path.join(args.out, "metrics.json"), metrics.to_json())
    last = result.history[-1]
    print(f"trained {cfg.iterations} iterations; final l_seg {last[1]:.6f}; outputs in {args.out}")


def cmd_eval(args):
    ckpt = load_checkpoint(args.checkpoint)
    dataset = _dataset(args.dataset)
    text = evaluate(ckpt.model, dataset).to_json()
    if args.out:
        atomic_write_text(args.out, text)
    else:
        sys.stdout.write(text)


def fuse_report(source, fused, probes, seed, size=64):
    """Max abs deviation between two models over random inference probes."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(probes):
        x = rng.random((1, source.in_channels, size, size))
        a = source.forward(x, train=False)
        b = fused.forward(x, train=False)
        worst = max(worst, *(float(np.max(np.abs(p - q))) for p, q in zip(a, b)))
    return {
        "probes": probes,
        "probe_size": size,
        "max_abs_deviation": worst,
        "params_unfused": source.num_params(),
        "params_fused": fused.num_params(),
    }


def cmd_fuse(args):
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.fused:
        raise UsageError(f"{args.checkpoint} is already fused")
    fused = ckpt.model.fuse()
    report = fuse_report(ckpt.model, fused, args.probes, args.seed)
    save_checkpoint(args.out, fused, extra=dict(ckpt.meta, fused_from=os.path.basename(args.checkpoint)))
    report_path = args.report or args.out + ".report.json"
    atomic_write_text(report_path, json.dumps(report, indent=2) + "\n")
    print(f"fused checkpoint {args.out}; max abs deviation over {args.probes} probes: "
          f"{report['max_abs_deviation']:.3e}")


def cmd_render(args):
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.model
    sample = load_sample(args.sample, model.n_boundary, model.n_room)
    pb, pr = model.predict(sample.image[None])
    out = panel(sample.rgb_bytes(), sample.boundary_labels, sample.room_labels, pb[0], pr[0],
                model.n_boundary)
    write_ppm(args.out, out)
    print(f"wrote {args.out} ({out.shape[2]}x{out.shape[1]})")


# -- parser ------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="dlaplan", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    g = sub.add_parser("generate", help="write a synthetic floor-plan dataset")
    g.add_argument("--spec", help="JSON file of generator fields (defaults apply when omitted)")
    g.add_argument("--set", action="append", default=[], metavar="FIELD=VALUE",
                   help="override a generator field, e.g. --set height=32")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="dataset directory")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train the segmentation model")
    t.add_argument("--config", help="JSON config with train/adv/noise/model sections")
    t.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override a config key, e.g. --set train.learning_rate=1e-3")
    t.add_argument("--dataset", required=True)
    t.add_argument("--eval-dataset", help="held-out dataset evaluated every eval_every iterations")
    t.add_argument("--out", required=True, help="output directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--out", help="metrics JSON path (stdout when omitted)")
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("fuse", help="fold every block into a single kernel")
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--probes", type=int, default=10)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--report", help="report path (default: OUT.report.json)")
    f.set_defaults(func=cmd_fuse)

    r = sub.add_parser("render", help="draw input | ground truth | prediction as a PPM")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--sample", required=True, help="sample path prefix, e.g. data/00003")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (UsageError, ConfigError, SpecError, ParseError, CheckpointError, FusedModelError,
            FileNotFoundError) as exc:
        print(f"dlaplan {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except TrainingDiverged as exc:
        print(f"dlaplan {args.command}: training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (GenerationError, OSError, RuntimeError, FloatingPointError) as exc:
        print(f"dlaplan {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
