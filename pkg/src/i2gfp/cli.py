"""Command-line entry point: ``i2gfp {compose,train,infer,eval,audit}``.

Every subcommand reads an optional flat ``key = value`` config file.  Values
are resolved in this order, later winning: built-in defaults, the config
file, ``I2GFP_<KEY>`` environment variables, ``--set key=value`` options and
finally the dedicated flags of the subcommand.  Relative paths in the config
file are taken relative to the file; everywhere else relative to the working
directory.  The resolved config is echoed to stderr before anything runs.

Exit status: 0 success, 1 runtime or I/O failure, 2 configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import cv2
import numpy as np

log = logging.getLogger("i2gfp")

ENV_PREFIX = "I2GFP_"
EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


class CliConfigError(Exception):
    pass


# -- typed flat config ----------------------------------------------------------

def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.replace(",", " ").split())


PARSERS: dict[str, Callable[[str], Any]] = {
    "int": int, "float": float, "bool": _parse_bool, "str": str, "path": str, "ints": _parse_ints,
}


@dataclass(frozen=True)
class Key:
    type: str
    default: Any = None
    help: str = ""


MODEL_KEYS = {
    "input_size": Key("int", 64, "square network input size"),
    "width_divisor": Key("int", 8, "divides the VGG-16 channel widths"),
    "shrink_channels": Key("int", 16, "1x1 shrink width of the intensive connections"),
    "gfp_channels": Key("int", 8, "GFP branch width"),
    "gfp_kernels": Key("ints", None, "two odd kernel sizes; default (S/2-1, S/4-1)"),
    "ablation": Key("str", "i2gfp", "base, base_ic or i2gfp"),
    "model_seed": Key("int", 0, "parameter initialisation seed"),
}

SCHEMAS: dict[str, dict[str, Key]] = {
    "compose": {
        "fg_dir": Key("path", None, "foreground images"),
        "alpha_dir": Key("path", None, "alpha mattes, same stems as fg_dir"),
        "bg_dir": Key("path", None, "background images"),
        "output_dir": Key("path", None, "dataset root to write"),
        "backgrounds_per_foreground": Key("int", 1),
        "seed": Key("int", 0),
        "trimap_radius_min": Key("int", 1),
        "trimap_radius_max": Key("int", 15),
    },
    "train": {
        "manifest": Key("path", None, "manifest.jsonl written by compose"),
        "val_manifest": Key("path", None, "optional validation manifest"),
        "out_dir": Key("path", "runs", "checkpoints and logs"),
        "stage": Key("int", 1),
        "iterations": Key("int", 200_000),
        "batch_size": Key("int", 10),
        "lr_initial": Key("float", 4e-4),
        "lr_min": Key("float", 0.0),
        "adam_beta1": Key("float", 0.9),
        "adam_beta2": Key("float", 0.999),
        "adam_eps": Key("float", 1e-8),
        "checkpoint_every": Key("int", 10_000),
        "seed": Key("int", 0),
        "resume_from": Key("path", None, "checkpoint to resume (same stage) or warm-start (stage 2)"),
        "strict": Key("bool", False, "single-threaded deterministic kernels"),
        "augment": Key("bool", True),
        "crop_sizes": Key("ints", None, "default: input_size x (1, 1.25, 1.5625)"),
        **MODEL_KEYS,
    },
    "infer": {
        "checkpoint": Key("path", None),
        "image": Key("path", None),
        "trimap": Key("path", None),
        "out": Key("path", None, "alpha PNG to write"),
    },
    "eval": {
        "pred_dir": Key("path", None),
        "gt_dir": Key("path", None),
        "trimap_dir": Key("path", None),
        "region": Key("str", "unknown", "unknown or full"),
        "report": Key("path", None, "optional JSON report path"),
    },
    "audit": {
        "checkpoint": Key("path", None, "audit these parameters instead of a fresh desk model"),
        "probes": Key("int", 20),
        "eps": Key("float", 1e-3),
        "tolerance": Key("float", 1e-2),
        "seed": Key("int", 0),
        "report": Key("path", None, "optional JSON report path"),
        **{**MODEL_KEYS, "input_size": Key("int", 32, "square network input size")},
    },
}


def _convert(schema: dict, key: str, text: str, base: Path | None, origin: str):
    if key not in schema:
        raise CliConfigError(f"{origin}: unknown key '{key}'")
    spec = schema[key]
    try:
        value = PARSERS[spec.type](text)
    except ValueError as exc:
        raise CliConfigError(f"{origin}: bad value for '{key}' ({spec.type}): {exc}") from None
    if spec.type == "path" and base is not None and value and not Path(value).is_absolute():
        value = str(base / value)
    return value


def read_config_file(path: Path, schema: dict) -> dict:
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise CliConfigError(f"cannot read config file {path}: {exc.strerror or exc}") from None
    values = {}
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliConfigError(f"{path}:{n}: expected 'key = value'")
        key, text = (s.strip() for s in line.split("=", 1))
        values[key] = _convert(schema, key, text, path.parent, f"{path}:{n}")
    return values


def resolve_config(command: str, config_file: str | None, overrides: list[str],
                   flags: dict, environ=os.environ) -> dict:
    schema = SCHEMAS[command]
    cfg = {k: spec.default for k, spec in schema.items()}
    if config_file:
        cfg.update(read_config_file(Path(config_file).resolve(), schema))
    for key in schema:
        env = environ.get(ENV_PREFIX + key.upper())
        if env is not None:
            cfg[key] = _convert(schema, key, env, None, f"${ENV_PREFIX}{key.upper()}")
    for item in overrides:
        if "=" not in item:
            raise CliConfigError(f"--set expects key=value, got {item!r}")
        key, text = (s.strip() for s in item.split("=", 1))
        cfg[key] = _convert(schema, key, text, None, "--set")
    cfg.update({k: v for k, v in flags.items() if v is not None})
    return cfg


def echo_config(command: str, cfg: dict) -> None:
    log.info("%s config:", command)
    for key in sorted(cfg):
        log.info("  %s = %s", key, cfg[key])


def _require(cfg: dict, *keys: str) -> None:
    missing = [k for k in keys if cfg.get(k) in (None, "")]
    if missing:
        raise CliConfigError("missing required setting(s): " + ", ".join(missing))


def _model_config(cfg: dict):
    from .network import ModelConfig

    kernels = cfg.get("gfp_kernels")
    base = ModelConfig(input_size=cfg["input_size"], width_divisor=cfg["width_divisor"],
                       shrink_channels=cfg["shrink_channels"], gfp_channels=cfg["gfp_channels"],
                       gfp_kernels=tuple(kernels) if kernels else None, seed=cfg["model_seed"])
    return base.with_ablation(cfg["ablation"])


# -- subcommands ------------------------------------------------------------------

def cmd_compose(cfg: dict) -> int:
    from .data_pipeline import DatasetSpec, synthesize_dataset

    _require(cfg, "fg_dir", "alpha_dir", "bg_dir", "output_dir")
    spec = DatasetSpec(cfg["fg_dir"], cfg["alpha_dir"], cfg["bg_dir"], cfg["output_dir"],
                       backgrounds_per_foreground=cfg["backgrounds_per_foreground"], seed=cfg["seed"],
                       trimap_radius=(cfg["trimap_radius_min"], cfg["trimap_radius_max"]))
    records = synthesize_dataset(spec)
    print(f"wrote {len(records)} samples and manifest to {spec.output_dir}")
    return EXIT_OK


def cmd_train(cfg: dict) -> int:
    from .data_pipeline import AugmentationConfig, MattingDataset
    from .trainer import TrainConfig, train_stage

    _require(cfg, "manifest")
    model_cfg = _model_config(cfg)
    if cfg["stage"] == 2 and not model_cfg.use_gfp:
        raise CliConfigError(f"stage 2 adds the GFP branch, which ablation '{cfg['ablation']}' does not have")
    train_cfg = TrainConfig(stage=cfg["stage"], iterations=cfg["iterations"], batch_size=cfg["batch_size"],
                            lr_initial=cfg["lr_initial"], lr_min=cfg["lr_min"],
                            adam_betas=(cfg["adam_beta1"], cfg["adam_beta2"]), adam_eps=cfg["adam_eps"],
                            checkpoint_every=cfg["checkpoint_every"], seed=cfg["seed"],
                            resume_from=cfg["resume_from"], strict=cfg["strict"])
    aug = None
    if cfg["augment"]:
        size = model_cfg.input_size
        crops = cfg["crop_sizes"] or tuple(round(size * f) for f in (1.0, 1.25, 1.5625))
        aug = AugmentationConfig(crop_sizes=crops, train_size=size, seed=cfg["seed"])
    dataset = MattingDataset.from_manifest(cfg["manifest"], aug)
    val = MattingDataset.from_manifest(cfg["val_manifest"]).samples if cfg["val_manifest"] else ()
    trainer = train_stage(cfg["stage"], dataset, model_cfg, train_cfg, cfg["out_dir"], val)
    last = trainer.history[-1] if trainer.history else None
    print(f"stage {cfg['stage']} finished at iteration {trainer.iteration}"
          + (f", total loss {last.total:.6f}" if last else ""))
    for path in trainer.checkpoints:
        print(f"checkpoint {path}")
    return EXIT_OK


def infer_alpha(model, image: np.ndarray, trimap: np.ndarray) -> np.ndarray:
    """Resize to the model size, predict, resize back (bilinear), then force
    trimap-Foreground to 1 and trimap-Background to 0."""
    from .matting_core import Label
    from .trainer import predict

    h, w = trimap.shape
    s = model.cfg.input_size
    small_img = np.clip(cv2.resize(image, (s, s), interpolation=cv2.INTER_LINEAR), 0.0, 1.0)
    small_tri = cv2.resize(trimap, (s, s), interpolation=cv2.INTER_NEAREST)
    alpha = predict(model, small_img, small_tri)
    if (h, w) != (s, s):
        alpha = cv2.resize(alpha, (w, h), interpolation=cv2.INTER_LINEAR)
    alpha = np.clip(alpha, 0.0, 1.0)
    alpha[trimap == Label.FOREGROUND] = 1.0
    alpha[trimap == Label.BACKGROUND] = 0.0
    return alpha


def cmd_infer(cfg: dict) -> int:
    from .matting_core import load_rgb, load_trimap, save_alpha
    from .network import load_params

    _require(cfg, "checkpoint", "image", "trimap", "out")
    image, trimap = load_rgb(cfg["image"]), load_trimap(cfg["trimap"])
    if image.shape[:2] != trimap.shape:
        raise CliConfigError(f"image {image.shape[:2]} and trimap {trimap.shape} sizes differ")
    model = load_params(cfg["checkpoint"])
    alpha = infer_alpha(model, image, trimap)
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_alpha(out, alpha)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_eval(cfg: dict) -> int:
    from .metrics import evaluate, pair_directories

    _require(cfg, "pred_dir", "gt_dir", "trimap_dir")
    if cfg["region"] not in ("unknown", "full"):
        raise CliConfigError(f"region must be 'unknown' or 'full', got {cfg['region']!r}")
    try:
        triples = pair_directories(cfg["pred_dir"], cfg["gt_dir"], cfg["trimap_dir"])
    except (ValueError, FileNotFoundError) as exc:
        raise CliConfigError(str(exc)) from None
    report = evaluate(triples, region=cfg["region"])
    print(report.summary_table())
    if cfg["report"]:
        Path(cfg["report"]).write_text(report.to_json() + "\n", encoding="utf-8")
    return EXIT_OK if report.ok else EXIT_RUNTIME


def cmd_audit(cfg: dict) -> int:
    from .network import build_model, load_params
    from .synthetic import make_sample
    from .trainer import gradient_audit

    model = load_params(cfg["checkpoint"]) if cfg["checkpoint"] else build_model(_model_config(cfg))
    size = model.cfg.input_size
    sample = make_sample(cfg["seed"], size=size, radius=max(1, size // 16))
    report = gradient_audit(model, sample, n_probes=cfg["probes"], eps=cfg["eps"], seed=cfg["seed"])
    for p in report.probes:
        print(f"{p.name:32s} [{p.index:6d}] analytic {p.analytic: .6e} numeric {p.numeric: .6e} "
              f"rel {p.rel_error:.2e}")
    print(f"max relative error {report.max_rel_error:.3e} over {len(report.probes)} probes "
          f"({len(report.skipped)} kink-crossing probes redrawn)")
    if cfg["report"]:
        payload = {"eps": report.eps, "max_rel_error": report.max_rel_error,
                   "skipped": [list(s) for s in report.skipped],
                   "probes": [{"name": p.name, "index": p.index, "analytic": p.analytic,
                               "numeric": p.numeric, "rel_error": p.rel_error} for p in report.probes]}
        Path(cfg["report"]).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    passed = len(report.probes) == cfg["probes"] and report.max_rel_error < cfg["tolerance"]
    return EXIT_OK if passed else EXIT_RUNTIME


COMMANDS = {"compose": cmd_compose, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval,
            "audit": cmd_audit}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="i2gfp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("-q", "--quiet", action="store_true", help="only warnings and errors on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("-c", "--config", help="flat key = value config file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
        return p

    p = add("compose", "composite foregrounds onto backgrounds and write a manifest")
    p.add_argument("spec", nargs="?", help="config file (same as --config)")
    p = add("train", "run one training stage")
    p.add_argument("--stage", type=int, choices=(1, 2))
    p.add_argument("--ablation", choices=("base", "base_ic", "i2gfp"))
    p.add_argument("--manifest")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--resume", dest="resume_from")
    p = add("infer", "predict an alpha matte for one image")
    p.add_argument("--checkpoint")
    p.add_argument("--image")
    p.add_argument("--trimap")
    p.add_argument("--out")
    p = add("eval", "score predicted mattes against ground truth")
    p.add_argument("pred_dir", nargs="?")
    p.add_argument("gt_dir", nargs="?")
    p.add_argument("trimap_dir", nargs="?")
    p.add_argument("--region", choices=("unknown", "full"))
    p.add_argument("--report")
    p = add("audit", "finite-difference check of the training-loss gradients")
    p.add_argument("--checkpoint")
    p.add_argument("--probes", type=int)
    p.add_argument("--eps", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--report")
    return parser


_GENERIC = {"command", "config", "overrides", "verbose", "quiet", "spec"}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING if args.quiet else (logging.DEBUG if args.verbose else logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    config_file = args.config or getattr(args, "spec", None)
    flags = {k: v for k, v in vars(args).items() if k not in _GENERIC}
    try:
        cfg = resolve_config(args.command, config_file, args.overrides, flags)
        echo_config(args.command, cfg)
        return COMMANDS[args.command](cfg)
    except CliConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except ValueError as exc:
        # ConfigError, DatasetError, ShapeMismatchError and friends are all ValueErrors
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (OSError, RuntimeError, FloatingPointError) as exc:
        log.error("%s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
