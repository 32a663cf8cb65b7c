"""Command-line entry point: train, eval, harmonize, gen-data, selftest.

Exit codes: 0 on success, 1 for a missing file (the path is printed), 2 for
config or flag errors (config problems include the line number), 3 when the
selftest finds a failing suite.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .autograd import ContractError, DimensionError, no_grad
from .data import (
    generate_sample,
    load_image,
    load_mask,
    read_manifest,
    save_image,
    save_mask,
)
from .model import generator_forward
from .selftest import run_selftest
from .train import (
    TrainerConfig,
    composite_baseline,
    evaluate,
    load_checkpoint,
    train,
)

_FLOAT_KEYS = {"learning_rate", "beta1", "beta2", "epsilon", "decay_factor",
               "a_min"}
_INT_KEYS = {"epochs", "batch_size", "seed", "base_channels", "k_neighbors"}
_STR_KEYS = {"variant"}


class ConfigError(Exception):
    def __init__(self, path, line, message):
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line


def parse_config(path):
    """Parse a `key = value` config file into (TrainerConfig, manifest_path).

    `#` starts a comment, blank lines are skipped, unknown keys are fatal.
    The manifest path is resolved relative to the config file's directory.
    """
    with open(path, encoding="utf-8") as fh:
        raw_lines = fh.readlines()
    values = {}
    manifest = None
    for ln, raw in enumerate(raw_lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(path, ln, f"expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not value:
            raise ConfigError(path, ln, f"empty value for {key!r}")
        if key == "manifest":
            manifest = os.path.join(os.path.dirname(os.path.abspath(path)), value)
        elif key == "decay_epochs":
            parts = value.replace(",", " ").split()
            try:
                epochs = tuple(int(p) for p in parts)
            except ValueError:
                raise ConfigError(path, ln,
                                  f"decay_epochs needs two integers, got {value!r}") from None
            if len(epochs) != 2:
                raise ConfigError(path, ln,
                                  f"decay_epochs needs two integers, got {value!r}")
            values[key] = epochs
        elif key in _FLOAT_KEYS:
            try:
                values[key] = float(value)
            except ValueError:
                raise ConfigError(path, ln, f"{key} needs a number, got {value!r}") from None
        elif key in _INT_KEYS:
            try:
                values[key] = int(value)
            except ValueError:
                raise ConfigError(path, ln, f"{key} needs an integer, got {value!r}") from None
        elif key in _STR_KEYS:
            values[key] = value
        else:
            raise ConfigError(path, ln, f"unknown key {key!r}")
    if manifest is None:
        raise ConfigError(path, len(raw_lines) + 1, "missing required key 'manifest'")
    try:
        cfg = TrainerConfig(**values)
    except ContractError as exc:
        raise ConfigError(path, 0, str(exc)) from None
    return cfg, manifest


def _require_file(path):
    if not os.path.isfile(path):
        raise FileNotFoundError(path)
    return path


def _cmd_train(args) -> int:
    cfg, manifest = parse_config(_require_file(args.config))
    _require_file(manifest)
    ckpt, history_path = train(manifest, cfg, args.out)
    with open(history_path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    print(f"trained {cfg.variant} for {cfg.epochs} epochs "
          f"({len(lines)} optimizer steps)")
    if lines:
        print(f"final batch loss {lines[-1].split()[2]}")
    print(f"checkpoint {ckpt}")
    return 0


def _cmd_eval(args) -> int:
    _require_file(args.checkpoint)
    _require_file(args.manifest)
    overall, bands = evaluate(args.checkpoint, args.manifest)
    baseline = composite_baseline(args.manifest)
    chunks = [f"overall\n{overall.to_text()}"]
    for band, report in bands.items():
        chunks.append(f"band {band}\n{report.to_text()}")
    chunks.append(f"composite baseline\n{baseline.to_text()}")
    text = "".join(chunks)
    print(text, end="")
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write(text)
        print(f"report written to {args.report}")
    return 0


def _cmd_harmonize(args) -> int:
    params = load_checkpoint(_require_file(args.checkpoint))
    composite = load_image(_require_file(args.composite))
    mask = load_mask(_require_file(args.mask))
    if mask.values.shape[2:] != composite.shape[2:]:
        raise DimensionError(
            f"mask {mask.values.shape[2:]} does not match "
            f"composite {composite.shape[2:]}")
    with no_grad():
        out = generator_forward(composite, mask, params)
    save_image(args.out, np.clip(out.data, 0.0, 1.0))
    print(f"harmonized image written to {args.out}")
    return 0


def _cmd_gen_data(args) -> int:
    entries = read_manifest(_require_file(args.manifest))
    os.makedirs(args.out, exist_ok=True)
    for seed, size, band in entries:
        sample = generate_sample(seed, size, band)
        stem = os.path.join(args.out, f"{seed:06d}")
        save_image(f"{stem}_composite.png", sample.composite)
        save_image(f"{stem}_truth.png", sample.ground_truth)
        save_mask(f"{stem}_mask.png", sample.mask)
    print(f"wrote {3 * len(entries)} files for {len(entries)} samples to {args.out}")
    return 0


def _cmd_selftest(args) -> int:
    return 0 if run_selftest(quick=args.quick) else 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hdnet",
        description="hierarchical dynamic image harmonization toolkit")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p_train = sub.add_parser("train", help="train a model from a config file")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--out", required=True)
    p_train.set_defaults(fn=_cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--manifest", required=True)
    p_eval.add_argument("--report", default=None)
    p_eval.set_defaults(fn=_cmd_eval)

    p_harm = sub.add_parser("harmonize", help="harmonize one composite image")
    p_harm.add_argument("--checkpoint", required=True)
    p_harm.add_argument("--composite", required=True)
    p_harm.add_argument("--mask", required=True)
    p_harm.add_argument("--out", required=True)
    p_harm.set_defaults(fn=_cmd_harmonize)

    p_gen = sub.add_parser("gen-data", help="render manifest samples to PNGs")
    p_gen.add_argument("--manifest", required=True)
    p_gen.add_argument("--out", required=True)
    p_gen.set_defaults(fn=_cmd_gen_data)

    p_self = sub.add_parser("selftest", help="run built-in diagnostic suites")
    p_self.add_argument("--quick", action="store_true")
    p_self.set_defaults(fn=_cmd_selftest)

    return parser


def run(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except FileNotFoundError as exc:
        path = exc.filename if exc.filename else exc.args[0]
        print(f"missing file: {path}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except (ContractError, DimensionError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
