"""Command-line entry point.

Subcommands: train, eval, infer, redundancy, synth-data. Configuration
layers as defaults < config file < flags; every run writes its resolved
configuration next to its outputs. Exit codes: 0 success, 1 runtime
failure, 2 configuration or usage error.
"""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click
import numpy as np
from PIL import Image, UnidentifiedImageError

from . import redundancy as red
from .config import RunConfig, desk_preset, resolve_seed
from .data import ImageSample, load_manifest, save_mask
from .errors import ConfigurationError, GeoPixSegError
from .model import load_model
from .synth import synth_dataset
from .training import evaluate, run_training, seed_everything


def _guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigurationError as exc:
            click.echo(f"configuration error: {exc}", err=True)
            sys.exit(2)
        except GeoPixSegError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(1)

    return wrapper


@click.group()
def main() -> None:
    """Language-guided segmentation of overhead imagery."""


def _resolve_run_config(config_path: str | None, seed: int | None, overrides: dict) -> RunConfig:
    if config_path is None:
        cfg = desk_preset()
        file_seed = None
    else:
        cfg = RunConfig.from_file(config_path)
        file_seed = json.loads(Path(config_path).read_text()).get("seed")
    cfg = cfg.with_overrides(overrides)
    cfg.seed = seed if seed is not None else (file_seed if file_seed is not None else resolve_seed())
    return cfg


@main.command()
@click.option("--config", "config_path", type=click.Path(), default=None, help="JSON run config; desk preset when omitted.")
@click.option("--data-root", default=None, help="Dataset root directory.")
@click.option("--split", default=None, help="Dataset split to train on.")
@click.option("--steps", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--freeze-encoder", type=click.BOOL, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_dir", type=click.Path(), default="train_run", show_default=True)
@_guarded
def train(config_path, data_root, split, steps, lr, batch_size, freeze_encoder, seed, out_dir):
    """Train a model; writes checkpoint, loss curve (CSV + figure) and the
    resolved config snapshot."""
    cfg = _resolve_run_config(
        config_path,
        seed,
        {
            "data.root": data_root,
            "data.split": split,
            "train.steps": steps,
            "train.lr": lr,
            "train.batch_size": batch_size,
            "train.freeze_encoder": freeze_encoder,
        },
    )
    if not cfg.data.root:
        raise ConfigurationError("no dataset configured: set data.root or pass --data-root")
    ann = Path(cfg.data.root) / cfg.data.split / "annotations.json"
    if not ann.is_file():
        raise ConfigurationError(f"dataset not found: {ann}")

    result = run_training(cfg, out_dir)
    if result.aborted:
        click.echo("training aborted on non-finite loss; last checkpoint retained", err=True)
        sys.exit(1)
    click.echo(
        f"trained {result.steps_run} steps; checkpoint at {result.checkpoint_path}"
        + (f"; train gIoU {result.final_train_giou:.4f}" if result.final_train_giou else "")
    )


@main.command("eval")
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--data-root", required=True, type=click.Path())
@click.option("--split", default="val", show_default=True)
@click.option("--batch-size", type=int, default=8, show_default=True)
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_dir", type=click.Path(), default="eval_run", show_default=True)
@_guarded
def eval_cmd(checkpoint, data_root, split, batch_size, seed, out_dir):
    """Evaluate a checkpoint on one split; writes eval_report.json and an
    IoU histogram figure."""
    from .plots import iou_histogram_figure

    seed_everything(resolve_seed(seed))
    model = load_model(checkpoint)
    manifest = load_manifest(data_root, split)
    report = evaluate(model, manifest, batch_size=batch_size)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / "eval_report.json")
    iou_histogram_figure(report, out / "iou_histogram.png")
    snapshot = RunConfig(model=model.config)
    snapshot.data.root = str(data_root)
    snapshot.data.split = split
    snapshot.seed = resolve_seed(seed)
    snapshot.save(out / "run_config.json")
    click.echo(json.dumps(report.to_dict(), indent=2))


@main.command()
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--image", "image_path", required=True, type=click.Path())
@click.option("--instruction", default=None)
@click.option("--instruction-file", type=click.Path(), default=None)
@click.option("--task", type=click.Choice(["reasoning", "referring"]), default="reasoning", show_default=True)
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_path", type=click.Path(), default="mask.png", show_default=True)
@_guarded
def infer(checkpoint, image_path, instruction, instruction_file, task, seed, out_path):
    """Segment one image from an instruction; prints the generated answer
    for the reasoning task."""
    if (instruction is None) == (instruction_file is None):
        raise ConfigurationError("pass exactly one of --instruction / --instruction-file")
    if instruction_file is not None:
        path = Path(instruction_file)
        if not path.is_file():
            raise ConfigurationError(f"instruction file not found: {path}")
        instruction = path.read_text().strip()

    seed_everything(resolve_seed(seed))
    model = load_model(checkpoint)
    try:
        with Image.open(image_path) as img:
            image = np.asarray(img.convert("RGB"))
    except (FileNotFoundError, UnidentifiedImageError, OSError) as exc:
        click.echo(f"error: cannot decode image {image_path}: {exc}", err=True)
        sys.exit(1)

    sample = ImageSample(
        id=Path(image_path).stem,
        image=image,
        mask=np.zeros(image.shape[:2], dtype=np.uint8),
        instruction=instruction,
        task=task,
        is_empty_target=True,
    )
    mask, answer = model.infer(sample)
    save_mask(Path(out_path), mask)
    _write_snapshot(
        Path(out_path).with_suffix(".config.json"),
        {"command": "infer", "checkpoint": str(checkpoint), "image": str(image_path),
         "task": task, "seed": resolve_seed(seed), "out": str(out_path)},
    )
    if answer is not None:
        click.echo(answer)
    click.echo(f"mask written to {out_path}", err=True)


@main.command()
@click.option("--input", "input_dir", required=True, type=click.Path())
@click.option("--patch-size", type=int, default=16, show_default=True)
@click.option("--levels", type=int, default=256, show_default=True)
@click.option("--out", "out_path", type=click.Path(), default="report.csv", show_default=True)
@click.option("--figure/--no-figure", default=True, show_default=True)
@_guarded
def redundancy(input_dir, patch_size, levels, out_path, figure):
    """Per-image redundancy report over a directory: CSV plus a figure."""
    report = red.corpus_report(input_dir, levels=levels, patch_size=patch_size)
    out = Path(out_path)
    red.write_report_csv(report, out)
    if figure:
        from .plots import redundancy_figure

        redundancy_figure(report, out.with_suffix(".png"))
    _write_snapshot(
        out.with_suffix(".config.json"),
        {"command": "redundancy", "input": str(input_dir), "patch_size": patch_size,
         "levels": levels, "out": str(out)},
    )
    click.echo(
        f"{report.n_images} images ({report.n_skipped} skipped): "
        f"mean r_e {report.mean_r_e:.4f} (std {report.std_r_e:.4f}), "
        f"mean r_s {report.mean_r_s:.4f} (std {report.std_r_s:.4f})"
    )


@main.command("synth-data")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--n", type=int, default=8, show_default=True)
@click.option("--size", type=int, default=64, show_default=True)
@click.option("--seed", type=int, default=None)
@click.option("--empty-fraction", type=float, default=0.25, show_default=True)
@click.option("--split", default="train", show_default=True)
@click.option("--task-mix", type=click.Choice(["mixed", "reasoning", "referring"]), default="mixed", show_default=True)
@_guarded
def synth_data(out_dir, n, size, seed, empty_fraction, split, task_mix):
    """Generate a seeded synthetic dataset tree."""
    seed = resolve_seed(seed)
    manifest = synth_dataset(
        out_dir, n=n, size=size, seed=seed, empty_fraction=empty_fraction,
        split=split, task_mix=task_mix,
    )
    _write_snapshot(
        Path(out_dir) / "synth_config.json",
        {"command": "synth-data", "n": n, "size": size, "seed": seed,
         "empty_fraction": empty_fraction, "split": split, "task_mix": task_mix},
    )
    click.echo(f"wrote {len(manifest)} records under {Path(out_dir) / split}: {manifest.stats}")


def _write_snapshot(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
