"""Seeded synthetic scenes for desk-scale training and tests.

Each scene is a textured background with one parametric target (disk, bar
or grid of cells); instructions and answers come from templates keyed to
the target's shape, tone and position. A configurable fraction of scenes
are empty-target: the instruction asks for a shape that is not present.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .data import DatasetManifest, load_manifest, save_mask
from .errors import ConfigurationError

SHAPES = ("disk", "bar", "grid")
TONES = ("bright", "dark")

REASONING_TEMPLATES = {
    "disk": (
        "A perfectly round {tone} installation dominates the {position} part of the scene. "
        "Identify the ground it occupies.",
        "Something circular and {tone}, like a storage tank seen from above, sits in the "
        "{position} region. Where is it?",
    ),
    "bar": (
        "An elongated {tone} strip, similar to a runway, crosses the {position} part of the "
        "image. Mark its full extent.",
        "Locate the long straight {tone} feature lying in the {position} region.",
    ),
    "grid": (
        "A regular array of small {tone} blocks, like a solar farm, covers the {position} "
        "area. Outline the whole array.",
        "Find the repeating lattice of {tone} cells near the {position} of the scene.",
    ),
}

REFERRING_TEMPLATES = {
    "disk": ("the {tone} disk in the {position} of the image",),
    "bar": ("the {tone} bar in the {position} of the image",),
    "grid": ("the {tone} grid pattern in the {position} of the image",),
}

ANSWER_TEMPLATE = "It is the {tone} {shape} in the {position} part of the image."
EMPTY_ANSWER = "The requested target does not appear in the image."


def synth_dataset(
    root: str | Path,
    n: int,
    size: int = 64,
    seed: int = 0,
    empty_fraction: float = 0.25,
    split: str = "train",
    task_mix: str = "mixed",
) -> DatasetManifest:
    """Write ``n`` seeded scenes under ``root/split`` and return the
    validated manifest. Identical arguments produce byte-identical trees."""
    if n < 1:
        raise ConfigurationError("n must be >= 1")
    if size % 32 != 0:
        raise ConfigurationError(f"size {size} not divisible by 32")
    if task_mix not in ("mixed", "reasoning", "referring"):
        raise ConfigurationError(f"unknown task_mix {task_mix!r}")

    rng = np.random.default_rng(seed)
    split_dir = Path(root) / split
    (split_dir / "images").mkdir(parents=True, exist_ok=True)
    (split_dir / "masks").mkdir(parents=True, exist_ok=True)

    n_empty = int(round(n * empty_fraction))
    annotations: dict[str, dict] = {}
    for i in range(n):
        rec_id = f"{split}_{i:04d}"
        task = ("reasoning", "referring")[i % 2] if task_mix == "mixed" else task_mix
        is_empty = i < n_empty

        image, mask, attrs = _render_scene(rng, size, empty=is_empty)
        Image.fromarray(image).save(split_dir / "images" / f"{rec_id}.png")
        if is_empty:
            mask_ref = None
        else:
            mask_ref = f"masks/{rec_id}.png"
            save_mask(split_dir / "masks" / f"{rec_id}.png", mask)

        bank = REASONING_TEMPLATES if task == "reasoning" else REFERRING_TEMPLATES
        templates = bank[attrs["shape"]]
        instruction = templates[int(rng.integers(len(templates)))].format(**attrs)
        answer = EMPTY_ANSWER if is_empty else ANSWER_TEMPLATE.format(**attrs)

        annotations[rec_id] = {
            "image": f"images/{rec_id}.png",
            "mask": mask_ref,
            "instructions": [instruction],
            "answers": [answer],
            "category": attrs["shape"],
            "task": task,
        }

    (split_dir / "annotations.json").write_text(
        json.dumps(annotations, indent=2, sort_keys=True) + "\n"
    )
    return load_manifest(root, split)


def _render_scene(rng: np.random.Generator, size: int, empty: bool):
    """Background plus one target shape; for empty scenes the instruction's
    shape is drawn but never painted (a distractor of another kind may be)."""
    image = _background(rng, size)
    shape = SHAPES[int(rng.integers(len(SHAPES)))]
    tone = TONES[int(rng.integers(len(TONES)))]
    cx = int(rng.integers(size // 4, size - size // 4))
    cy = int(rng.integers(size // 4, size - size // 4))
    attrs = {"shape": shape, "tone": tone, "position": _position_word(cx, cy, size)}

    if empty:
        # Distractor keeps empty scenes non-trivial: different shape, so the
        # queried target is genuinely absent.
        others = [s for s in SHAPES if s != shape]
        distractor = others[int(rng.integers(len(others)))]
        dmask = _shape_mask(rng, distractor, size, cx, cy)
        _paint(image, dmask, tone, rng)
        return image, np.zeros((size, size), dtype=np.uint8), attrs

    mask = _shape_mask(rng, shape, size, cx, cy)
    _paint(image, mask, tone, rng)
    return image, mask, attrs


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = rng.integers(90, 150, size=3)
    noise = rng.normal(0.0, 8.0, size=(size, size, 3))
    grad = np.linspace(-12, 12, size)[None, :, None]
    img = base[None, None, :] + noise + grad
    return np.clip(img, 0, 255).astype(np.uint8)


def _shape_mask(rng: np.random.Generator, shape: str, size: int, cx: int, cy: int) -> np.ndarray:
    # Shapes stay thick relative to the decoder's stride-4 output, and
    # rectilinear edges snap to that lattice, so a faithful stride-4
    # prediction still scores well at full resolution.
    yy, xx = np.mgrid[0:size, 0:size]
    snap = lambda v: int(4 * round(v / 4))
    if shape == "disk":
        r = int(rng.integers(size // 4, size // 3))
        mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= r**2
    elif shape == "bar":
        length = snap(rng.integers(3 * size // 4, size - 4))
        thickness = snap(rng.integers(size // 4, size // 3))
        horizontal = bool(rng.integers(2))
        if not horizontal:
            length, thickness = thickness, length
        x0 = snap(np.clip(cx - length // 2, 0, size - 1))
        y0 = snap(np.clip(cy - thickness // 2, 0, size - 1))
        mask = (xx >= x0) & (xx < x0 + length) & (yy >= y0) & (yy < y0 + thickness)
    else:  # grid of square cells
        cell = snap(size // 8)
        pitch = 2 * cell
        extent = snap(rng.integers(size // 2, 3 * size // 4))
        x0 = snap(np.clip(cx - extent // 2, 0, size - extent))
        y0 = snap(np.clip(cy - extent // 2, 0, size - extent))
        inside = (xx >= x0) & (xx < x0 + extent) & (yy >= y0) & (yy < y0 + extent)
        on_cell = ((xx - x0) % pitch < cell) & ((yy - y0) % pitch < cell)
        mask = inside & on_cell
    return mask.astype(np.uint8)


def _paint(image: np.ndarray, mask: np.ndarray, tone: str, rng: np.random.Generator) -> None:
    level = rng.integers(200, 250, size=3) if tone == "bright" else rng.integers(10, 60, size=3)
    jitter = rng.normal(0.0, 4.0, size=image.shape)
    painted = np.clip(level[None, None, :] + jitter, 0, 255).astype(np.uint8)
    image[mask.astype(bool)] = painted[mask.astype(bool)]


def _position_word(cx: int, cy: int, size: int) -> str:
    third = size / 3
    col = "left" if cx < third else ("right" if cx >= 2 * third else "middle")
    row = "upper" if cy < third else ("lower" if cy >= 2 * third else "middle")
    if row == "middle" and col == "middle":
        return "center"
    if row == "middle":
        return f"center {col}"
    if col == "middle":
        return f"{row} center"
    return f"{row} {col}"
