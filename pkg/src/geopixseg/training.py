"""Training loop, schedule, checkpointing and dataset evaluation."""

from __future__ import annotations

import csv
import logging
import math
import random
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import LossConfig, RunConfig, TrainConfig
from .data import DatasetManifest, ImageSample, load_manifest, restore_mask
from .errors import DataError
from .losses import combined_loss
from .metrics import EvalReport, compute_metrics
from .model import GeoPixSegModel

logger = logging.getLogger(__name__)


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def cosine_lr(step: int, total_steps: int, base_lr: float, warmup_ratio: float) -> float:
    """Linear warmup followed by cosine decay to 0 at step == total_steps."""
    warmup = max(1, int(round(total_steps * warmup_ratio)))
    if step < warmup:
        return base_lr * (step + 1) / warmup
    progress = (step - warmup) / max(1, total_steps - warmup)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))


def build_optimizer(model: GeoPixSegModel, config: TrainConfig) -> torch.optim.AdamW:
    """Decoupled-weight-decay optimizer; frozen encoder parameters are
    excluded and detached from the autograd graph."""
    if config.freeze_encoder:
        for p in model.encoder.parameters():
            p.requires_grad_(False)
    params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.AdamW(
        params, lr=config.lr, betas=config.betas, weight_decay=config.weight_decay
    )


@dataclass
class TrainResult:
    checkpoint_path: Path | None
    curve: list[dict] = field(default_factory=list)
    steps_run: int = 0
    aborted: bool = False
    final_train_giou: float | None = None


class _SampleBank:
    """Deterministic sample stream: seeded epoch permutations over manifest
    records, cycling instruction choices for unflattened manifests."""

    def __init__(self, manifest: DatasetManifest, seed: int):
        if not manifest.records:
            raise DataError(f"manifest for split {manifest.split!r} is empty")
        self.manifest = manifest
        self.rng = np.random.default_rng(seed)
        self.epoch = 0
        self._order: list[int] = []
        self._cache: dict[tuple[str, int], ImageSample] = {}

    def next_batch(self, size: int) -> list[ImageSample]:
        batch = []
        for _ in range(size):
            if not self._order:
                self._order = list(self.rng.permutation(len(self.manifest.records)))
                self.epoch += 1
            record = self.manifest.records[self._order.pop()]
            key = (record.id, self.epoch % max(1, len(record.instructions)))
            if key not in self._cache:
                self._cache[key] = self.manifest.materialize(record, instruction_index=key[1])
            batch.append(self._cache[key])
        return batch


def train(
    model: GeoPixSegModel,
    manifest: DatasetManifest,
    train_config: TrainConfig,
    loss_config: LossConfig,
    out_dir: str | Path,
    seed: int = 0,
) -> TrainResult:
    """Run the optimization loop, recording the loss curve and writing the
    final checkpoint (parameter map + optimizer state) under out_dir.

    A non-finite loss aborts immediately; any checkpoint already on disk is
    retained untouched.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "checkpoint.pt"

    bank = _SampleBank(manifest, seed=seed)
    optimizer = build_optimizer(model, train_config)
    model.train()

    autocast_bf16 = train_config.precision == "bf16"
    result = TrainResult(checkpoint_path=None)
    start = time.monotonic()

    for step in range(train_config.steps):
        lr = cosine_lr(step, train_config.steps, train_config.lr, train_config.warmup_ratio)
        for group in optimizer.param_groups:
            group["lr"] = lr

        batch = bank.next_batch(train_config.batch_size)
        with torch.autocast("cpu", dtype=torch.bfloat16, enabled=autocast_bf16):
            output, masks = model.forward_samples(batch, train=True)
            total, breakdown = combined_loss(
                output.mask_layers,
                model.downsample_gt(masks),
                output.text_logits,
                output.text_targets,
                [s.task for s in batch],
                loss_config,
            )

        if not torch.isfinite(total):
            logger.error("loss diverged at step %d; aborting with last checkpoint retained", step)
            result.aborted = True
            result.checkpoint_path = ckpt_path if ckpt_path.exists() else None
            return result

        optimizer.zero_grad(set_to_none=True)
        total.backward()
        optimizer.step()

        result.curve.append({"step": step, "lr": lr, **breakdown})
        result.steps_run = step + 1

        if train_config.checkpoint_every and (step + 1) % train_config.checkpoint_every == 0:
            _save(model, optimizer, ckpt_path, step + 1)
            result.checkpoint_path = ckpt_path

        if train_config.eval_every and (step + 1) % train_config.eval_every == 0:
            report = evaluate(model, manifest, batch_size=train_config.batch_size)
            model.train()
            result.final_train_giou = report.giou
            logger.info(
                "step %d: loss %.4f, train gIoU %.4f (%.1fs)",
                step + 1, breakdown["total"], report.giou, time.monotonic() - start,
            )
            if train_config.target_giou and report.giou >= train_config.target_giou:
                break

    _save(model, optimizer, ckpt_path, result.steps_run)
    result.checkpoint_path = ckpt_path
    return result


def _save(model: GeoPixSegModel, optimizer: torch.optim.Optimizer, path: Path, step: int) -> None:
    model.save(path, extra={"optimizer": optimizer.state_dict(), "step": step})


def evaluate(model: GeoPixSegModel, manifest: DatasetManifest, batch_size: int = 8) -> EvalReport:
    """Score predictions against source-resolution ground truth, in
    manifest order."""
    model.eval()
    predictions: list[np.ndarray] = []
    ground_truths: list[np.ndarray] = []
    records = manifest.records
    for i in range(0, len(records), batch_size):
        samples = [manifest.materialize(r) for r in records[i : i + batch_size]]
        pres = [model.prepare(s) for s in samples]
        prediction = model.predict(samples)
        for j, sample in enumerate(samples):
            mask = restore_mask(
                prediction.probabilities[j].numpy(),
                pres[j].valid_region,
                sample.image.shape[:2],
                threshold=model.config.mask_decoder.threshold,
            )
            predictions.append(mask)
            ground_truths.append(sample.mask)
    return compute_metrics(predictions, ground_truths)


def write_loss_curve(curve: list[dict], path: str | Path) -> None:
    if not curve:
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(curve[0].keys()))
        writer.writeheader()
        writer.writerows(curve)


def run_training(config: RunConfig, out_dir: str | Path) -> TrainResult:
    """Seed, build, train and write artifacts (config snapshot, loss curve
    CSV + figure, checkpoint) under out_dir."""
    from .plots import loss_curve_figure

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config.save(out_dir / "run_config.json")

    seed_everything(config.seed)
    manifest = load_manifest(
        config.data.root, config.data.split, flatten_questions=config.data.flatten_questions
    )
    model = GeoPixSegModel(config.model)
    result = train(model, manifest, config.train, config.loss, out_dir, seed=config.seed)
    write_loss_curve(result.curve, out_dir / "loss_curve.csv")
    loss_curve_figure(result.curve, out_dir / "loss_curve.png")
    return result
