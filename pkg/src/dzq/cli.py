"""Command-line front end: train, verify, bops, quantize.

Experiments are described by a sectioned key-value config file:

    [model]
    recipe = mlp
    input = 784
    hidden = 256
    classes = 10

    [data]
    source = synthetic
    n = 4000

    [train]
    lambda_dz = 0.01
    epochs = 10

    [output]
    dir = runs/exp1

Values are typed by their lexical form (int, float, true/false, string).
Unknown sections or keys are rejected with the offending line number.
Every command writes a manifest.json with the resolved configuration and
sha256 hashes of its artifacts.

Exit codes: 0 success, 1 property-check failure, 2 invalid input or config,
3 training divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import verify as verify_mod
from .autodiff import Tape, round_mode
from .data import Dataset, load_csv, load_idx, split, synthetic_blobs
from .errors import ConfigError, DivergenceError, FormatError
from .metrics import build_report
from .models import (
    build_mini_cnn,
    build_mlp,
    load_checkpoint,
    save_checkpoint,
)
from .quantizers import LayerQuantState, quantize_layer
from .trainer import TrainConfig, train

_SCHEMA = {
    "model": {
        "recipe": (str, True),
        "input": (str, True),
        "hidden": (str, False, ""),
        "classes": (int, True),
    },
    "data": {
        "source": (str, True),
        "n": (int, False, 4000),
        "dims": (int, False, 0),          # 0: take the model input size
        "spread": (float, False, 0.1),
        "data_seed": (int, False, -1),    # -1: derive from train.seed
        "val_fraction": (float, False, 0.2),
        "train_images": (str, False, ""),
        "train_labels": (str, False, ""),
        "val_images": (str, False, ""),
        "val_labels": (str, False, ""),
        "train_path": (str, False, ""),
        "val_path": (str, False, ""),
    },
    "train": {
        "lambda_dz": (float, False, 0.01),
        "lambda_bit": (float, False, 0.0),
        "lambda_w": (float, False, 0.0),
        "lr_weights": (float, False, 0.1),
        "lr_theta": (float, False, 0.001),
        "momentum": (float, False, 0.9),
        "epochs": (int, False, 10),
        "batch_size": (int, False, 64),
        "seed": (int, False, 0),
        "bits": (int, False, 4),
        "mixed_precision": (bool, False, False),
        "fp32": (bool, False, False),
        "init_theta": (float, False, 3.0),
        "quantile": (float, False, 0.99),
        "b_min": (int, False, 2),
        "b_max": (int, False, 8),
        "epsilon": (float, False, 1e-8),
        "cosine_lr": (bool, False, True),
        "detach_scale_from_d": (bool, False, False),
    },
    "output": {
        "dir": (str, True),
    },
}


def _lex_value(text):
    lowered = text.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text


def parse_config_file(path):
    """Parse a sectioned key-value file into {section: {key: (value, line)}}."""
    sections = {}
    current = None
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from exc
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#") or line.startswith(";"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if current not in _SCHEMA:
                raise ConfigError(f"unknown section [{current}]", lineno)
            sections.setdefault(current, {})
            continue
        if "=" not in line:
            raise ConfigError(f"expected key = value, got {line!r}", lineno)
        if current is None:
            raise ConfigError("key outside any section", lineno)
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in _SCHEMA[current]:
            raise ConfigError(f"unknown key {key!r} in section [{current}]",
                              lineno)
        if key in sections[current]:
            raise ConfigError(f"duplicate key {key!r}", lineno)
        sections[current][key] = (_lex_value(value.strip()), lineno)
    return sections


def _apply_overrides(sections, overrides):
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like section.key=value, "
                              f"got {item!r}")
        key_path, _, value = item.partition("=")
        if "." not in key_path:
            raise ConfigError(f"override key must be section.key, "
                              f"got {key_path!r}")
        section, _, key = key_path.partition(".")
        if section not in _SCHEMA or key not in _SCHEMA[section]:
            raise ConfigError(f"unknown override target {key_path!r}")
        sections.setdefault(section, {})[key] = (_lex_value(value.strip()), None)


def resolve_config(sections):
    """Validate against the schema and fill defaults; returns plain dicts."""
    resolved = {}
    for section, keys in _SCHEMA.items():
        body = sections.get(section, {})
        out = {}
        for key, spec in keys.items():
            expected, required = spec[0], spec[1]
            if key in body:
                value, line = body[key]
                if expected is float and isinstance(value, int):
                    value = float(value)
                if expected is str and not isinstance(value, str):
                    value = repr(value)
                if not isinstance(value, expected) or (expected is not bool
                                                       and isinstance(value, bool)):
                    raise ConfigError(
                        f"key {section}.{key} expects {expected.__name__}, "
                        f"got {value!r}", line)
                out[key] = value
            elif required:
                raise ConfigError(f"missing required key {section}.{key}")
            else:
                out[key] = spec[2]
        resolved[section] = out
    return resolved


def _build_model(cfg):
    model_cfg = cfg["model"]
    recipe = model_cfg["recipe"]
    seed = cfg["train"]["seed"]
    if recipe == "mlp":
        input_dim = int(model_cfg["input"])
        hidden = [int(h) for h in model_cfg["hidden"].split(",") if h.strip()]
        return build_mlp(input_dim, hidden, model_cfg["classes"], seed=seed)
    if recipe == "cnn":
        dims = tuple(int(v) for v in model_cfg["input"].lower().split("x"))
        if len(dims) != 3:
            raise ConfigError("cnn input must look like CxHxW, e.g. 1x28x28")
        return build_mini_cnn(dims, model_cfg["classes"], seed=seed)
    raise ConfigError(f"unknown model recipe {recipe!r}")


def _flat_dim(model):
    n = 1
    for d in model.input_shape:
        n *= d
    return n


def _build_datasets(cfg, model):
    data_cfg = cfg["data"]
    source = data_cfg["source"]
    if source == "synthetic":
        dims = data_cfg["dims"] or _flat_dim(model)
        if dims != _flat_dim(model):
            raise ConfigError(f"data.dims {dims} does not match model input "
                              f"{_flat_dim(model)}")
        seed = data_cfg["data_seed"]
        if seed < 0:
            seed = cfg["train"]["seed"] + 7919
        train_set = synthetic_blobs(data_cfg["n"], dims,
                                    cfg["model"]["classes"],
                                    data_cfg["spread"], seed)
        val_n = max(cfg["model"]["classes"],
                    int(data_cfg["n"] * data_cfg["val_fraction"]))
        val_set = synthetic_blobs(val_n, dims, cfg["model"]["classes"],
                                  data_cfg["spread"], seed + 1)
        return train_set, val_set
    if source == "idx":
        if not data_cfg["train_images"] or not data_cfg["train_labels"]:
            raise ConfigError("idx source needs data.train_images and "
                              "data.train_labels")
        train_set = load_idx(data_cfg["train_images"], data_cfg["train_labels"])
        val_set = None
        if data_cfg["val_images"] and data_cfg["val_labels"]:
            val_set = load_idx(data_cfg["val_images"], data_cfg["val_labels"])
        return train_set, val_set
    if source == "csv":
        if not data_cfg["train_path"]:
            raise ConfigError("csv source needs data.train_path")
        full = load_csv(data_cfg["train_path"])
        if data_cfg["val_path"]:
            return full, load_csv(data_cfg["val_path"])
        return split(full, data_cfg["val_fraction"], cfg["train"]["seed"])
    raise ConfigError(f"unknown data source {source!r}")


def _train_config(cfg):
    t = cfg["train"]
    return TrainConfig(
        lambda_dz=t["lambda_dz"], lambda_bit=t["lambda_bit"],
        lambda_w=t["lambda_w"], lr_weights=t["lr_weights"],
        lr_theta=t["lr_theta"], momentum=t["momentum"], epochs=t["epochs"],
        batch_size=t["batch_size"], seed=t["seed"],
        bits=None if t["mixed_precision"] else t["bits"],
        mixed_precision=t["mixed_precision"], fp32=t["fp32"],
        init_theta=t["init_theta"], quantile=t["quantile"],
        b_min=t["b_min"], b_max=t["b_max"], epsilon=t["epsilon"],
        cosine_lr=t["cosine_lr"],
        detach_scale_from_d=t["detach_scale_from_d"],
    )


def _fmt(value):
    if isinstance(value, float):
        return f"{value:.17g}"
    return str(value)


def _sha256(path):
    digest = hashlib.sha256()
    digest.update(Path(path).read_bytes())
    return digest.hexdigest()


def _write_manifest(out_dir, command, config, artifacts):
    manifest = {
        "command": command,
        "config": config,
        "artifacts": {name: _sha256(out_dir / name) for name in artifacts},
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _write_history(out_dir, history):
    lines = ["epoch,train_acc,val_acc,loss,overall_sparsity,mean_bits"]
    for row in history:
        lines.append(",".join([str(row.epoch), _fmt(row.train_acc),
                               _fmt(row.val_acc), _fmt(row.loss),
                               _fmt(row.overall_sparsity), _fmt(row.mean_bits)]))
    (out_dir / "history.csv").write_text("\n".join(lines) + "\n")

    lines = ["epoch,layer,kind,sparsity,deadzone,scale,bits,theta_dz,theta_bit"]
    for row in history:
        for st in row.layers:
            lines.append(",".join([
                str(row.epoch), st.name, st.kind,
                _fmt(st.sparsity), _fmt(st.deadzone), _fmt(st.scale),
                str(st.bits), _fmt(st.theta_dz),
                "" if st.theta_bit is None else _fmt(st.theta_bit)]))
    (out_dir / "layers.csv").write_text("\n".join(lines) + "\n")


def cmd_train(args):
    sections = parse_config_file(args.config)
    _apply_overrides(sections, args.override)
    if args.seed is not None:
        sections.setdefault("train", {})["seed"] = (args.seed, None)
    if args.out is not None:
        sections.setdefault("output", {})["dir"] = (str(args.out), None)
    cfg = resolve_config(sections)

    model = _build_model(cfg)
    train_set, val_set = _build_datasets(cfg, model)
    train_cfg = _train_config(cfg)

    out_dir = Path(cfg["output"]["dir"])
    out_dir.mkdir(parents=True, exist_ok=True)

    model, history = train(model, train_set, train_cfg, val_set)

    mode = "fp32" if train_cfg.fp32 else "quant"
    save_checkpoint(model, out_dir / "checkpoint.cdq", mode=mode)
    _write_history(out_dir, history)
    final_acc = history[-1].val_acc
    report = build_report(model, accuracy=final_acc, mode=mode)
    (out_dir / "report.json").write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    _write_manifest(out_dir, "train", cfg,
                    ["checkpoint.cdq", "history.csv", "layers.csv",
                     "report.json"])
    print(f"trained {cfg['model']['recipe']} for {train_cfg.epochs} epochs: "
          f"val_acc {final_acc:.4f}, sparsity "
          f"{history[-1].overall_sparsity:.4f}, mean bits "
          f"{history[-1].mean_bits:.2f}")
    print(f"artifacts in {out_dir}")
    return 0


def cmd_verify(args):
    mode = "even"
    for item in args.override:
        key, _, value = item.partition("=")
        if key.strip() != "round_mode":
            raise ConfigError(f"unknown verify override {key!r}")
        mode = value.strip()
    if args.trials == 0:
        print("WARNING: trials = 0, all checks pass vacuously")
    with round_mode(mode):
        results = verify_mod.run_all(seed=args.seed, trials=args.trials)

    width = max(len(r.name) for r in results)
    print(f"{'check'.ljust(width)}  trials  result")
    for r in results:
        print(f"{r.name.ljust(width)}  {r.trials:6d}  "
              f"{'PASS' if r.passed else 'FAIL'}")
        if not r.passed:
            print(f"  {r.detail}")
            for key, value in r.counterexample.items():
                print(f"    {key} = {value}")

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = [dataclasses.asdict(r) for r in results]
    (out_dir / "verify.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n")
    _write_manifest(out_dir, "verify",
                    {"seed": args.seed, "trials": args.trials,
                     "round_mode": mode},
                    ["verify.json"])
    return 0 if all(r.passed for r in results) else 1


def cmd_bops(args):
    model, mode = load_checkpoint(args.checkpoint)
    report = build_report(model, mode=mode)
    print(f"{'layer':<10} {'kind':<8} {'density':>8} {'bits':>5} "
          f"{'macs':>10} {'bops':>14}")
    for layer in report.layers:
        print(f"{layer.name:<10} {layer.kind:<8} {layer.density:8.4f} "
              f"{layer.w_bits:5d} {layer.macs_dense:10d} {layer.bops:14.1f}")
    print(f"total bops {report.total_bops:.1f} / baseline "
          f"{report.baseline_bops:.1f} = {100 * report.relative_bops:.4f}%")

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "bops.json").write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    _write_manifest(out_dir, "bops", {"checkpoint": str(args.checkpoint)},
                    ["bops.json"])
    return 0


def cmd_quantize(args):
    model, _ = load_checkpoint(args.checkpoint)
    if (args.theta is None) == (args.d is None):
        raise ConfigError("quantize needs exactly one of --theta / --d")
    if args.bits < 2 or args.bits > 16:
        raise ConfigError(f"--bits out of range [2, 16]: {args.bits}")

    for layer in model.layers:
        if args.theta is not None:
            theta = args.theta
        else:
            tape = Tape()
            from .quantizers import range_stat  # local to avoid cycle at import
            r = float(range_stat(tape.const(layer.weight),
                                 layer.state.quantile).value)
            if args.d < 0 or args.d > 2 * r:
                raise ConfigError(f"--d {args.d} outside [0, {2 * r}] for "
                                  f"layer {layer.name}")
            # invert d = 2R(1 - tanh(theta)) for theta >= 0; d = 0 maps to
            # atanh(1), so cap the argument just below 1
            if r > 0:
                arg = min(1.0 - args.d / (2.0 * r), 1.0 - 1e-16)
                theta = float(math.atanh(arg))
            else:
                theta = 0.0
        layer.state = dataclasses.replace(layer.state, theta_dz=theta,
                                          theta_bit=None, fixed_bits=args.bits)
        tape = Tape()
        outcome = quantize_layer(tape.const(layer.weight), layer.state)
        layer.weight = outcome.w_hat.value.copy()

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out_dir / "checkpoint.cdq", mode="quant")
    report = build_report(model, mode="quant")
    (out_dir / "report.json").write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    _write_manifest(out_dir, "quantize",
                    {"checkpoint": str(args.checkpoint), "theta": args.theta,
                     "d": args.d, "bits": args.bits},
                    ["checkpoint.cdq", "report.json"])
    print(f"quantized {len(model.layers)} layers at {args.bits} bits: "
          f"sparsity {report.overall_sparsity:.4f}, relative bops "
          f"{100 * report.relative_bops:.4f}%")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="dzq",
        description="joint pruning and quantization with a learnable "
                    "dead-zone quantizer")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model from a config file")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--out", default=None)
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--override", action="append", default=[],
                         metavar="KEY=VALUE")
    p_train.set_defaults(func=cmd_train)

    p_verify = sub.add_parser("verify",
                              help="run the randomized property suites")
    p_verify.add_argument("--seed", type=int, default=0)
    p_verify.add_argument("--trials", type=int, default=10000)
    p_verify.add_argument("--out", default=".")
    p_verify.add_argument("--override", action="append", default=[],
                          metavar="KEY=VALUE")
    p_verify.set_defaults(func=cmd_verify)

    p_bops = sub.add_parser("bops", help="report BOPs of a checkpoint")
    p_bops.add_argument("checkpoint")
    p_bops.add_argument("--out", default=".")
    p_bops.set_defaults(func=cmd_bops)

    p_quant = sub.add_parser("quantize",
                             help="post-hoc quantize a checkpoint")
    p_quant.add_argument("checkpoint")
    p_quant.add_argument("--out", default=".")
    p_quant.add_argument("--theta", type=float, default=None)
    p_quant.add_argument("--d", type=float, default=None)
    p_quant.add_argument("--bits", type=int, default=4)
    p_quant.set_defaults(func=cmd_quantize)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, FileNotFoundError, ValueError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
