"""Command-line entry point.

Subcommands: split | train | eval | map | gradcheck | synth. Exit codes:
0 success, 1 runtime failure, 2 usage or configuration error. Every
command is byte-reproducible for a fixed --seed and identical inputs.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    HsiCube,
    LabelRaster,
    SplitSpec,
    extract_patch,
    load_counts,
    load_cube,
    load_labels,
    load_split,
    normalize,
    save_cube,
    save_labels,
    save_split,
    stratified_split,
    synth_dataset,
)
from .exceptions import (
    ConfigError,
    ContractError,
    FormatError,
    MultiformerError,
    ShapeError,
    SplitError,
    TrainingDiverged,
)
from .metrics import default_palette, format_report, render_map
from .model import ModelConfig, forward, init_params, params_from_arrays
from .train import TrainConfig, evaluate, format_metrics_log, gradient_suite, tiny_config, train

USAGE_ERRORS = (ConfigError, FormatError, SplitError, ContractError, ShapeError)

_MODEL_FIELDS = {f.name: f for f in fields(ModelConfig)}
_TRAIN_FIELDS = {f.name: f for f in fields(TrainConfig)}


# ---------------------------------------------------------------------------
# config resolution
# ---------------------------------------------------------------------------


def load_config_file(path) -> dict[str, str]:
    """Flat 'key = value' document; keys must name config fields."""
    entries: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _MODEL_FIELDS and key not in _TRAIN_FIELDS:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        entries[key] = value
    return entries


def _parse_value(key: str, raw: str):
    if key in ("neighborhood_scales", "filter_sizes"):
        return tuple(int(v) for v in raw.replace(",", " ").split())
    if key in ("use_multiscale", "use_fusion", "cosine_schedule"):
        lowered = raw.lower()
        if lowered in ("true", "1", "yes"):
            return True
        if lowered in ("false", "0", "no"):
            return False
        raise ConfigError(f"config key {key!r}: expected a boolean, got {raw!r}")
    if key in ("learning_rate", "weight_decay", "beta1", "beta2", "eps"):
        return float(raw)
    return int(raw)


def resolve_configs(
    args, bands: int, num_classes: int, model_defaults: dict | None = None
) -> tuple[ModelConfig, TrainConfig]:
    """Defaults, then the --config file, then command-line flags."""
    model_kw = dict(model_defaults or {})
    model_kw.update({"bands": bands, "num_classes": num_classes})
    train_kw = {}
    if getattr(args, "config", None):
        for key, raw in load_config_file(args.config).items():
            value = _parse_value(key, raw)
            (model_kw if key in _MODEL_FIELDS else train_kw)[key] = value
    if getattr(args, "layers", None) is not None:
        model_kw["num_layers"] = args.layers
    if getattr(args, "spectral_neighbors", None) is not None:
        model_kw["spectral_neighbors"] = args.spectral_neighbors
    if getattr(args, "dim", None) is not None:
        model_kw["inner_dim"] = args.dim
        model_kw["embed_dim"] = args.dim
    if getattr(args, "no_ms", False):
        model_kw["use_multiscale"] = False
    if getattr(args, "no_scaf", False):
        model_kw["use_fusion"] = False
    if getattr(args, "seed", None) is not None:
        train_kw["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        train_kw["epochs"] = args.epochs
    if getattr(args, "batch_size", None) is not None:
        train_kw["batch_size"] = args.batch_size
    if getattr(args, "learning_rate", None) is not None:
        train_kw["learning_rate"] = args.learning_rate
    return ModelConfig(**model_kw), TrainConfig(**train_kw)


def _config_num_classes(args, checkpoint_arrays=None, split=None) -> int:
    """num_classes from the config file, else the checkpoint head, else labels."""
    if getattr(args, "config", None):
        entries = load_config_file(args.config)
        if "num_classes" in entries:
            return int(entries["num_classes"])
    if checkpoint_arrays is not None and "head.fc.bias" in checkpoint_arrays:
        return int(checkpoint_arrays["head.fc.bias"].shape[0])
    if split is not None and len(split):
        return int(split[:, 2].max())
    raise ConfigError("cannot determine num_classes: set it in the config file")


def write_manifest(path, command: str, args_paths: dict, model_config: ModelConfig, train_config: TrainConfig) -> None:
    lines = [f"command = {command}"]
    for key, value in args_paths.items():
        lines.append(f"{key} = {value}")
    for f in fields(ModelConfig):
        value = getattr(model_config, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{f.name} = {value}")
    for f in fields(TrainConfig):
        lines.append(f"{f.name} = {getattr(train_config, f.name)}")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cube, labels = synth_dataset(args.height, args.width, args.bands, args.classes, args.noise_sigma, args.seed)
    save_cube(out / "cube.hdr", cube)
    save_labels(out / "labels.hdr", labels)
    print(f"wrote {out / 'cube.hdr'} ({cube.height}x{cube.width}x{cube.bands})")
    print(f"wrote {out / 'labels.hdr'} ({labels.num_classes} classes)")
    return 0


def cmd_split(args) -> int:
    raster = load_labels(args.labels)
    counts = load_counts(args.counts)
    train_rows, test_rows = stratified_split(raster, SplitSpec(counts=counts, seed=args.seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_split(out / "train.txt", train_rows)
    save_split(out / "test.txt", test_rows)
    print("class train test")
    for cls in range(1, raster.num_classes + 1):
        n_train = int((train_rows[:, 2] == cls).sum())
        n_test = int((test_rows[:, 2] == cls).sum())
        print(f"C{cls} {n_train} {n_test}")
    print(f"{len(train_rows)} train / {len(test_rows)} test")
    return 0


def cmd_train(args) -> int:
    cube = normalize(load_cube(args.cube))
    raster = load_labels(args.labels) if args.labels else None
    split = load_split(args.train_split)
    if not len(split):
        raise ConfigError(f"{args.train_split}: empty training split")
    num_classes = _config_num_classes(args, split=split)
    model_config, train_config = resolve_configs(args, bands=cube.bands, num_classes=num_classes)
    eval_split = load_split(args.eval_split) if args.eval_split else None

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(
        out / "run.manifest",
        "train",
        {"cube": args.cube, "train_split": args.train_split, "out": str(out)},
        model_config,
        train_config,
    )
    params, history = train(cube, raster, split, model_config, train_config, eval_split=eval_split)
    save_checkpoint(out / "checkpoint.mftc", params)
    (out / "metrics.log").write_text(format_metrics_log(history))
    if history:
        print(f"final epoch: {history[-1].format()}")
    print(f"wrote {out / 'checkpoint.mftc'}")
    return 0


def _load_model(args, cube: HsiCube, split=None):
    arrays = load_checkpoint(args.checkpoint)
    num_classes = _config_num_classes(args, checkpoint_arrays=arrays, split=split)
    model_config, _ = resolve_configs(args, bands=cube.bands, num_classes=num_classes)
    params = params_from_arrays(model_config, arrays)
    return model_config, params


def cmd_eval(args) -> int:
    cube = normalize(load_cube(args.cube))
    split = load_split(args.split)
    model_config, params = _load_model(args, cube, split=split)
    cm = evaluate(params, model_config, cube, split)
    report = format_report(cm)
    sys.stdout.write(report)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.txt").write_text(report)
        np.savetxt(out / "confusion.txt", cm, fmt="%d")
    return 0


def cmd_map(args) -> int:
    cube = normalize(load_cube(args.cube))
    raster = load_labels(args.labels)
    if (raster.height, raster.width) != (cube.height, cube.width):
        raise FormatError(
            f"label raster {raster.height}x{raster.width} does not match cube {cube.height}x{cube.width}"
        )
    model_config, params = _load_model(args, cube)
    predictions = np.zeros((cube.height, cube.width), dtype=np.int32)
    for r in range(cube.height):
        for c in range(cube.width):
            if args.all_pixels or raster.labels[r, c] != 0:
                patch = extract_patch(cube, r, c, model_config.patch_size)
                logits = forward(patch, params, model_config).data
                predictions[r, c] = int(np.argmax(logits)) + 1
    palette = _load_palette(args.palette) if args.palette else default_palette(model_config.num_classes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    render_map(predictions, palette, out / "map.ppm")
    print(f"wrote {out / 'map.ppm'}")
    return 0


def _load_palette(path) -> dict[int, tuple[int, int, int]]:
    palette: dict[int, tuple[int, int, int]] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4:
            raise FormatError(f"{path}:{lineno}: expected 'class r g b', got {line!r}")
        cls, r, g, b = (int(p) for p in parts)
        palette[cls] = (r, g, b)
    return palette


def cmd_gradcheck(args) -> int:
    base = tiny_config()
    defaults = {f.name: getattr(base, f.name) for f in fields(ModelConfig)}
    config, _ = resolve_configs(
        args,
        bands=defaults.pop("bands"),
        num_classes=defaults.pop("num_classes"),
        model_defaults=defaults,
    )
    report = gradient_suite(seed=args.seed, config=config)
    for entry in report.entries:
        print(f"{entry.name} {entry.max_rel_err:.3e}")
    failures = report.failures(args.tolerance)
    if failures:
        print(f"{len(failures)} of {len(report.entries)} parameter groups >= {args.tolerance:g}")
        return 1
    print(f"all {len(report.entries)} parameter groups < {args.tolerance:g}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="multiformer", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", metavar="PATH", help="flat key = value config file")
    shared.add_argument("--seed", type=int, default=0, metavar="N")
    shared.add_argument("--out", metavar="DIR", help="output directory")
    shared.add_argument("--no-ms", action="store_true", help="disable the multiscale spatial stream")
    shared.add_argument("--no-scaf", action="store_true", help="disable cross-layer fusion")
    shared.add_argument("--layers", type=int, metavar="N", help="override num_layers")
    shared.add_argument("--spectral-neighbors", type=int, metavar="N", help="override band-group width")
    shared.add_argument("--dim", type=int, metavar="N", help="override inner and spectral embedding dims")

    p = sub.add_parser("synth", parents=[shared], help="write a synthetic cube + labels")
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--bands", type=int, default=16)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--noise-sigma", type=float, default=0.05)
    p.set_defaults(func=cmd_synth, needs_out=True)

    p = sub.add_parser("split", parents=[shared], help="stratified train/test split")
    p.add_argument("--labels", required=True, metavar="HDR")
    p.add_argument("--counts", required=True, metavar="FILE", help="'class count' lines")
    p.set_defaults(func=cmd_split, needs_out=True)

    p = sub.add_parser("train", parents=[shared], help="train and write a checkpoint")
    p.add_argument("--cube", required=True, metavar="HDR")
    p.add_argument("--labels", metavar="HDR", help="cross-check the split against the raster")
    p.add_argument("--train-split", required=True, metavar="FILE")
    p.add_argument("--eval-split", metavar="FILE", help="log test OA per epoch")
    p.add_argument("--epochs", type=int, metavar="N")
    p.add_argument("--batch-size", type=int, metavar="N")
    p.add_argument("--learning-rate", type=float, metavar="F")
    p.set_defaults(func=cmd_train, needs_out=True)

    p = sub.add_parser("eval", parents=[shared], help="metrics report for a checkpoint")
    p.add_argument("--cube", required=True, metavar="HDR")
    p.add_argument("--split", required=True, metavar="FILE")
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.set_defaults(func=cmd_eval, needs_out=False)

    p = sub.add_parser("map", parents=[shared], help="render a classification map")
    p.add_argument("--cube", required=True, metavar="HDR")
    p.add_argument("--labels", required=True, metavar="HDR")
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--all-pixels", action="store_true", help="classify unlabeled pixels too")
    p.add_argument("--palette", metavar="FILE", help="'class r g b' lines")
    p.set_defaults(func=cmd_map, needs_out=True)

    p = sub.add_parser("gradcheck", parents=[shared], help="finite-difference gradient suite")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck, needs_out=False)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "needs_out", False) and not args.out:
        parser.error(f"{args.command}: --out is required")
    try:
        return args.func(args)
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingDiverged, MultiformerError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
