"""Dataset records, directory ingestion and image/mask preprocessing.

A dataset root holds one directory per split::

    root/
      <split>/
        images/           RGB rasters (PNG/JPEG)
        masks/            single-channel PNG, foreground=255, background=0
        annotations.json  id -> {image?, mask, instructions, answers?, category?, task?}

``"mask": null`` marks an empty-target sample (the queried object is
absent); it resolves to an all-zero mask at the image's size.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ConfigurationError, DataError

TASKS = ("reasoning", "referring")

# Published split sizes of the full-scale reasoning benchmark; used only by
# the opt-in ingestion check in the test suite and for documentation.
BENCHMARK_SPLIT_SIZES = {"train": 2371, "val": 1135, "test": 1928}


@dataclass(frozen=True)
class Box:
    """Axis-aligned pixel rectangle: x/y is the top-left corner."""

    x: int
    y: int
    w: int
    h: int


@dataclass
class ImageSample:
    """One materialized dataset record."""

    id: str
    image: np.ndarray  # (H, W, 3) uint8
    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    instruction: str
    answer: str | None = None
    task: str = "reasoning"
    category: str | None = None
    is_empty_target: bool = False

    def __post_init__(self) -> None:
        if self.image.ndim != 3 or self.image.shape[2] != 3 or self.image.dtype != np.uint8:
            raise DataError(f"sample {self.id}: image must be (H, W, 3) uint8")
        if self.mask.shape != self.image.shape[:2]:
            raise DataError(
                f"sample {self.id}: mask shape {self.mask.shape} != image {self.image.shape[:2]}"
            )
        if not np.isin(self.mask, (0, 1)).all():
            raise DataError(f"sample {self.id}: mask values must be in {{0, 1}}")
        if not self.instruction:
            raise DataError(f"sample {self.id}: instruction is empty")
        if self.task not in TASKS:
            raise DataError(f"sample {self.id}: unknown task {self.task!r}")
        empty = not bool(self.mask.any())
        if self.is_empty_target != empty:
            raise DataError(
                f"sample {self.id}: is_empty_target={self.is_empty_target} but mask "
                f"foreground count is {int(self.mask.sum())}"
            )


@dataclass
class PreprocessedSample:
    """Square model input produced by :func:`preprocess`."""

    image: np.ndarray  # (3, S, S) float32, normalized
    mask: np.ndarray  # (S, S) uint8 in {0, 1}
    valid_region: Box
    scale_factor: float
    source_id: str


@dataclass
class SampleRecord:
    """Manifest entry: file references plus instruction text."""

    id: str
    image_path: Path
    mask_path: Path | None
    instructions: list[str]
    answers: list[str]
    task: str
    category: str | None
    is_empty_target: bool
    image_size: tuple[int, int]  # (H, W)


@dataclass
class DatasetManifest:
    root: Path
    split: str
    records: list[SampleRecord]
    stats: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    def materialize(self, record: SampleRecord, instruction_index: int = 0) -> ImageSample:
        """Load rasters for one record and pick one of its instructions."""
        image = load_image(record.image_path, record.id)
        if record.mask_path is None:
            mask = np.zeros(image.shape[:2], dtype=np.uint8)
        else:
            mask = load_mask(record.mask_path, record.id)
            if mask.shape != image.shape[:2]:
                raise DataError(
                    f"sample {record.id}: mask shape {mask.shape} != image {image.shape[:2]}"
                )
        k = instruction_index % len(record.instructions)
        answer = record.answers[k % len(record.answers)] if record.answers else None
        return ImageSample(
            id=record.id,
            image=image,
            mask=mask,
            instruction=record.instructions[k],
            answer=answer,
            task=record.task,
            category=record.category,
            is_empty_target=record.is_empty_target,
        )

    def samples(self) -> Iterator[ImageSample]:
        for record in self.records:
            yield self.materialize(record)


def load_image(path: Path, record_id: str) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"))
    except FileNotFoundError as exc:
        raise DataError(f"sample {record_id}: image file missing: {path}") from exc
    except UnidentifiedImageError as exc:
        raise DataError(f"sample {record_id}: image does not decode: {path}") from exc


def load_mask(path: Path, record_id: str) -> np.ndarray:
    """Read a {0, 255} single-channel PNG into a {0, 1} uint8 raster."""
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("L"))
    except FileNotFoundError as exc:
        raise DataError(f"sample {record_id}: mask file missing: {path}") from exc
    except UnidentifiedImageError as exc:
        raise DataError(f"sample {record_id}: mask does not decode: {path}") from exc
    bad = np.setdiff1d(np.unique(arr), (0, 255))
    if bad.size:
        raise DataError(
            f"sample {record_id}: mask {path} has values outside {{0, 255}}: {bad[:8].tolist()}"
        )
    return (arr == 255).astype(np.uint8)


def save_mask(path: Path, mask: np.ndarray) -> None:
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, mode="L").save(path)


def load_manifest(root: str | Path, split: str, flatten_questions: bool = True) -> DatasetManifest:
    """Validate and index one split of a dataset directory.

    With ``flatten_questions`` every (image, instruction) pair becomes its
    own record; otherwise each image yields one record carrying all its
    instructions and the consumer picks per epoch.
    """
    root = Path(root)
    split_dir = root / split
    ann_path = split_dir / "annotations.json"
    if not ann_path.is_file():
        raise DataError(f"annotations file missing: {ann_path}")
    try:
        doc = json.loads(ann_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{ann_path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise DataError(f"{ann_path} must map record ids to annotation objects")

    records: list[SampleRecord] = []
    for rec_id in sorted(doc):
        ann = doc[rec_id]
        image_path = split_dir / ann.get("image", f"images/{rec_id}.png")
        if not image_path.is_file():
            raise DataError(f"sample {rec_id}: image file missing: {image_path}")
        size = _probe_image(image_path, rec_id)

        mask_ref = ann.get("mask", None)
        if mask_ref is None:
            mask_path = None
            is_empty = True
        else:
            mask_path = split_dir / mask_ref
            if not mask_path.is_file():
                raise DataError(f"sample {rec_id}: mask file missing: {mask_path}")
            mask = load_mask(mask_path, rec_id)
            is_empty = not bool(mask.any())

        instructions = ann.get("instructions") or ann.get("instruction")
        if isinstance(instructions, str):
            instructions = [instructions]
        if not instructions or any(not q for q in instructions):
            raise DataError(f"sample {rec_id}: needs at least one non-empty instruction")
        answers = ann.get("answers") or ann.get("answer") or []
        if isinstance(answers, str):
            answers = [answers]
        task = ann.get("task", "reasoning")
        if task not in TASKS:
            raise DataError(f"sample {rec_id}: unknown task {task!r}")
        category = ann.get("category")

        groups = (
            [([q], [answers[i % len(answers)]] if answers else []) for i, q in enumerate(instructions)]
            if flatten_questions
            else [(list(instructions), list(answers))]
        )
        for i, (qs, ans) in enumerate(groups):
            rid = rec_id if len(groups) == 1 else f"{rec_id}#{i}"
            records.append(
                SampleRecord(
                    id=rid,
                    image_path=image_path,
                    mask_path=mask_path,
                    instructions=qs,
                    answers=ans,
                    task=task,
                    category=category,
                    is_empty_target=is_empty,
                    image_size=size,
                )
            )

    stats = {
        "n_records": len(records),
        "per_task": _count_by(records, lambda r: r.task),
        "per_category": _count_by(records, lambda r: r.category or "uncategorized"),
        "n_empty_target": sum(r.is_empty_target for r in records),
    }
    return DatasetManifest(root=root, split=split, records=records, stats=stats)


def _probe_image(path: Path, record_id: str) -> tuple[int, int]:
    try:
        with Image.open(path) as img:
            img.verify()
        with Image.open(path) as img:
            w, h = img.size
        return h, w
    except (UnidentifiedImageError, OSError) as exc:
        raise DataError(f"sample {record_id}: image does not decode: {path}") from exc


def _count_by(records: list[SampleRecord], key) -> dict[str, int]:
    out: dict[str, int] = {}
    for r in records:
        out[key(r)] = out.get(key(r), 0) + 1
    return out


def preprocess(
    sample: ImageSample,
    target_size: int,
    pixel_mean: tuple[float, float, float] = (0.485, 0.456, 0.406),
    pixel_std: tuple[float, float, float] = (0.229, 0.224, 0.225),
) -> PreprocessedSample:
    """Scale the long edge to ``target_size``, pad bottom/right, normalize.

    The mask follows the identical geometry with nearest-neighbor
    resampling. Padded pixels sit at the per-channel mean, i.e. exactly 0
    after normalization.
    """
    if target_size % 32 != 0:
        raise ConfigurationError(f"target_size {target_size} not divisible by 32")
    h, w = sample.image.shape[:2]
    if h < 1 or w < 1:
        raise DataError(f"sample {sample.id}: degenerate image {h}x{w}")

    scale = target_size / max(h, w)
    if w >= h:
        new_w, new_h = target_size, max(1, round(h * scale))
    else:
        new_h, new_w = target_size, max(1, round(w * scale))

    if (new_h, new_w) == (h, w):
        resized = sample.image
        mask_resized = sample.mask
    else:
        resized = np.asarray(
            Image.fromarray(sample.image).resize((new_w, new_h), Image.BILINEAR)
        )
        mask_resized = np.asarray(
            Image.fromarray(sample.mask * 255, mode="L").resize((new_w, new_h), Image.NEAREST)
        )
        mask_resized = (mask_resized > 127).astype(np.uint8)

    mean = np.asarray(pixel_mean, dtype=np.float32).reshape(3, 1, 1)
    std = np.asarray(pixel_std, dtype=np.float32).reshape(3, 1, 1)
    chw = resized.astype(np.float32).transpose(2, 0, 1) / 255.0
    normalized = (chw - mean) / std

    image = np.zeros((3, target_size, target_size), dtype=np.float32)
    image[:, :new_h, :new_w] = normalized
    mask = np.zeros((target_size, target_size), dtype=np.uint8)
    mask[:new_h, :new_w] = mask_resized

    return PreprocessedSample(
        image=image,
        mask=mask,
        valid_region=Box(0, 0, new_w, new_h),
        scale_factor=scale,
        source_id=sample.id,
    )


def restore_mask(
    mask_or_probs: np.ndarray,
    valid_region: Box,
    original_hw: tuple[int, int],
    threshold: float | None = None,
) -> np.ndarray:
    """Invert the preprocessing geometry: crop the valid region and scale
    back to the source resolution. Float inputs are resized bilinearly and
    thresholded; binary inputs use nearest-neighbor."""
    box = valid_region
    crop = np.asarray(mask_or_probs)[box.y : box.y + box.h, box.x : box.x + box.w]
    h, w = original_hw
    if threshold is not None:
        img = Image.fromarray(crop.astype(np.float32), mode="F").resize((w, h), Image.BILINEAR)
        return (np.asarray(img) > threshold).astype(np.uint8)
    img = Image.fromarray(crop.astype(np.uint8) * 255, mode="L").resize((w, h), Image.NEAREST)
    return (np.asarray(img) > 127).astype(np.uint8)
