"""Command-line entry point: synth | augment | train | eval | infer | compare.

Exit codes: 0 success, 1 internal error, 2 usage or geometry error,
3 missing input artifact.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import augment, dataset, metrics, trainer, unet
from .attention import VARIANTS
from .tensor import ConfigError, GeometryError

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE, EXIT_MISSING = 0, 1, 2, 3

DEFAULT_DEPTH = 3

VARIANT_LABELS = {
    "none": "U-net",
    "conventional": "U-net with conventional CBSM",
    "proposed": "U-net with proposed CBSM",
}

OVERLAY_LEVELS = {"background": 0, "gt_only": 85, "pred_only": 170, "agreement": 255}


class UsageError(Exception):
    pass


class MissingArtifact(Exception):
    pass


# Per-subcommand overlayable options: name -> (type, default). A default of
# None means the option is required after the config overlay is merged.
_MODEL_OPTS = {
    "depth": (int, DEFAULT_DEPTH),
    "base_channels": (int, 8),
}
_TRAIN_OPTS = {
    "manifest": (str, None),
    "epochs": (int, 30),
    "batch_size": (int, 4),
    "lr": (float, 1e-3),
    "seed": (int, 42),
    "loss": (str, "bce"),
    "threshold": (float, 0.5),
    "out": (str, None),
    **_MODEL_OPTS,
}
OPTIONS = {
    "synth": {
        "count": (int, 64),
        "size": (int, 64),
        "seed": (int, 7),
        "noise_sigma": (float, 0.08),
        "out": (str, None),
    },
    "augment": {
        "manifest": (str, None),
        "alpha": (float, augment.DEFAULT_ALPHA),
        "sigma": (float, augment.DEFAULT_SIGMA),
        "out": (str, None),
    },
    "train": {**_TRAIN_OPTS, "variant": (str, "proposed")},
    "eval": {
        "checkpoint": (str, None),
        "manifest": (str, None),
        "split": (str, "all"),
        "threshold": (float, 0.5),
        "out": (str, ""),
    },
    "infer": {
        "checkpoint": (str, None),
        "image": (str, None),
        "mask": (str, ""),
        "overlay": (str, ""),
        "threshold": (float, 0.5),
        "out": (str, None),
    },
    "compare": dict(_TRAIN_OPTS),
}

CHOICES = {
    "variant": VARIANTS,
    "loss": ("bce", "bce+dice"),
    "split": ("all", "train", "val"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cbsmseg", description="U-Net + attention segmentation lab")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, opts in OPTIONS.items():
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="flat key=value file; command-line flags take precedence")
        for key, (typ, default) in opts.items():
            flag = "--" + key.replace("_", "-")
            kw = {"type": typ, "default": None, "dest": key}
            if key in CHOICES:
                kw["choices"] = CHOICES[key]
            sp.add_argument(flag, help=f"default: {default}" if default is not None else "required", **kw)
    return parser


def read_config(path) -> dict[str, str]:
    p = Path(path)
    if not p.is_file():
        raise MissingArtifact(f"config file not found: {p}")
    out = {}
    for lineno, line in enumerate(p.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{p}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if "." in key or value.startswith(("{", "[")):
            raise UsageError(f"{p}:{lineno}: nested configuration is not supported")
        out[key.replace("-", "_")] = value
    return out


def merge_options(args: argparse.Namespace) -> dict:
    """Flags win over the config file, which wins over defaults. Unknown keys are rejected."""
    opts = OPTIONS[args.command]
    file_values = read_config(args.config) if args.config else {}
    unknown = sorted(set(file_values) - set(opts))
    if unknown:
        raise UsageError(f"unknown config key(s) for '{args.command}': {', '.join(unknown)}")
    merged = {}
    for key, (typ, default) in opts.items():
        val = getattr(args, key)
        if val is None and key in file_values:
            try:
                val = typ(file_values[key])
            except ValueError:
                raise UsageError(f"config key {key}: cannot parse {file_values[key]!r}") from None
            if key in CHOICES and val not in CHOICES[key]:
                raise UsageError(f"config key {key}: {val!r} not one of {CHOICES[key]}")
        if val is None:
            val = default
        if val is None:
            raise UsageError(f"missing required option --{key.replace('_', '-')}")
        merged[key] = val
    return merged


def _manifest(path: str) -> dataset.DatasetManifest:
    if not Path(path).is_file():
        raise MissingArtifact(f"manifest not found: {path}")
    return dataset.DatasetManifest.read(path)


def _checkpoint(path: str) -> unet.UNetModel:
    if not Path(path).is_file():
        raise MissingArtifact(f"checkpoint not found: {path}")
    return trainer.load_checkpoint(path)


def cmd_synth(o: dict) -> int:
    divisor = 2 ** DEFAULT_DEPTH
    if o["size"] % divisor:
        raise UsageError(f"--size {o['size']} must be divisible by {divisor}")
    cfg = dataset.SynthConfig(count=o["count"], size=o["size"], seed=o["seed"], noise_sigma=o["noise_sigma"])
    man = dataset.save_dataset(dataset.generate_synthetic(cfg), o["out"])
    print(f"wrote {len(man.entries)} pairs to {o['out']}")
    return EXIT_OK


def cmd_augment(o: dict) -> int:
    pairs = dataset.load_dataset(_manifest(o["manifest"]))
    out = augment.augment_dataset(pairs, o["alpha"], o["sigma"])
    dataset.save_dataset(out, o["out"])
    print(f"augmented {len(pairs)} pairs into {len(out)}")
    return EXIT_OK


def _train_variant(o: dict, variant: str, pairs, out_dir: Path, verbose: bool = True):
    train_pairs, val_pairs = dataset.split_pairs(pairs)
    cfg = unet.UNetConfig(depth=o["depth"], base_channels=o["base_channels"], variant=variant)
    tcfg = trainer.TrainConfig(epochs=o["epochs"], batch_size=o["batch_size"], learning_rate=o["lr"],
                               seed=o["seed"], loss=o["loss"], threshold=o["threshold"])
    model = unet.build_model(cfg, seed=o["seed"])
    out_dir.mkdir(parents=True, exist_ok=True)

    def progress(row):
        if verbose:
            print(f"[{variant}] epoch {row['epoch']:3d} loss {row['loss']:.4f} val dice {row['dice']:.4f}", flush=True)

    result = trainer.train(model, train_pairs, val_pairs, tcfg, log_path=out_dir / "log.csv", progress=progress)
    trainer.save_checkpoint(result.model, out_dir / "model.ckpt")
    return result


def cmd_train(o: dict) -> int:
    pairs = dataset.load_dataset(_manifest(o["manifest"]))
    _train_variant(o, o["variant"], pairs, Path(o["out"]))
    print(f"checkpoint and log written to {o['out']}")
    return EXIT_OK


def _select(pairs, split: str):
    return pairs if split == "all" else [p for p in pairs if p.split == split]


def cmd_eval(o: dict) -> int:
    model = _checkpoint(o["checkpoint"])
    pairs = _select(dataset.load_dataset(_manifest(o["manifest"])), o["split"])
    if not pairs:
        raise UsageError(f"no pairs in split '{o['split']}'")
    report = metrics.evaluate_set(model, pairs, o["threshold"])
    text = metrics.csv_header() + "\n" + report.csv_row() + "\n"
    if o["out"]:
        Path(o["out"]).parent.mkdir(parents=True, exist_ok=True)
        Path(o["out"]).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def overlay_image(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """8-bit map: 0 background, 85 ground truth only, 170 prediction only, 255 both."""
    pred, gt = pred.astype(bool), gt.astype(bool)
    out = np.full(pred.shape, OVERLAY_LEVELS["background"], dtype=np.uint8)
    out[gt & ~pred] = OVERLAY_LEVELS["gt_only"]
    out[pred & ~gt] = OVERLAY_LEVELS["pred_only"]
    out[pred & gt] = OVERLAY_LEVELS["agreement"]
    return out


def cmd_infer(o: dict) -> int:
    model = _checkpoint(o["checkpoint"])
    if not Path(o["image"]).is_file():
        raise MissingArtifact(f"image not found: {o['image']}")
    if o["overlay"] and not o["mask"]:
        raise UsageError("--overlay needs --mask (the ground truth to compare against)")
    image = dataset.read_pgm(Path(o["image"]).read_bytes())
    mask = unet.predict_mask(model, image[None, None], o["threshold"])[0, 0]
    Path(o["out"]).parent.mkdir(parents=True, exist_ok=True)
    Path(o["out"]).write_bytes(dataset.write_pgm_bytes(mask * np.uint8(255)))
    if o["overlay"]:
        if not Path(o["mask"]).is_file():
            raise MissingArtifact(f"mask not found: {o['mask']}")
        gt = dataset.read_pgm_bytes(Path(o["mask"]).read_bytes()) >= dataset.MASK_THRESHOLD
        if gt.shape != mask.shape:
            raise GeometryError(f"mask {gt.shape} does not match image {mask.shape}")
        Path(o["overlay"]).write_bytes(dataset.write_pgm_bytes(overlay_image(mask, gt)))
    print(f"mask written to {o['out']}")
    return EXIT_OK


def comparison_tables(rows: list[tuple[str, metrics.MetricReport]]) -> tuple[str, str]:
    """CSV (full precision fractions) and markdown (percent, 2 decimals) renderings."""
    csv = ["method," + metrics.csv_header()]
    csv += [f"{v},{r.csv_row()}" for v, r in rows]
    titles = ["Method", "Accuracy (%)", "Recall (%)", "Specificity (%)", "Precision (%)", "F1-score (%)",
              "Dice (%)", "IoU (%)"]
    md = ["| " + " | ".join(titles) + " |", "|" + "---|" * len(titles)]
    for v, r in rows:
        md.append("| " + " | ".join([VARIANT_LABELS[v]] + [f"{100 * x:.2f}" for x in r.values()]) + " |")
    return "\n".join(csv) + "\n", "\n".join(md) + "\n"


def cmd_compare(o: dict) -> int:
    pairs = dataset.load_dataset(_manifest(o["manifest"]))
    _, val_pairs = dataset.split_pairs(pairs)
    out = Path(o["out"])
    rows = []
    for variant in ("none", "conventional", "proposed"):
        _train_variant(o, variant, pairs, out / variant)
        # evaluate the reloaded checkpoint so rows match a separate eval run
        model = trainer.load_checkpoint(out / variant / "model.ckpt")
        rows.append((variant, metrics.evaluate_set(model, val_pairs, o["threshold"])))
    csv, md = comparison_tables(rows)
    (out / "compare.csv").write_text(csv)
    (out / "compare.md").write_text(md)
    sys.stdout.write(md)
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "augment": cmd_augment,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "compare": cmd_compare,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        opts = merge_options(args)
        return COMMANDS[args.command](opts)
    except MissingArtifact as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except (UsageError, GeometryError, ConfigError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # noqa: BLE001
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
