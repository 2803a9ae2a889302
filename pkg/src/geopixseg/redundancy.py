"""Pixel-level and structural image-redundancy measures.

Two scalar measures per image:

* entropic redundancy ``r_e = 1 - H / log2(L)`` where ``H`` is the Shannon
  entropy of the intensity histogram over ``L`` levels, and
* structural redundancy ``r_s``: the mean off-diagonal entry of the
  patchwise structural-similarity matrix over a non-overlapping patch grid.

Both operate on luminance; color input is converted with ITU-R BT.601
weights.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ConfigurationError, DataError

logger = logging.getLogger(__name__)

# Canonical structural-similarity stability constants on a 255 dynamic range.
DYNAMIC_RANGE = 255.0
C1 = (0.01 * DYNAMIC_RANGE) ** 2
C2 = (0.03 * DYNAMIC_RANGE) ** 2

BT601_WEIGHTS = np.array([0.299, 0.587, 0.114])


@dataclass
class SSIMMatrix:
    values: np.ndarray  # (N, N)
    means: np.ndarray  # (N,)
    variances: np.ndarray  # (N,)
    c1: float = C1
    c2: float = C2

    @property
    def n_patches(self) -> int:
        return self.values.shape[0]


@dataclass
class RedundancyReport:
    r_e: float
    r_s: float
    levels: int
    patch_size: int
    n_patches: int


@dataclass
class CorpusReport:
    per_image: dict[str, RedundancyReport]
    mean_r_e: float
    mean_r_s: float
    std_r_e: float
    std_r_s: float
    n_images: int
    n_skipped: int


def to_luminance(image: np.ndarray) -> np.ndarray:
    """Collapse an RGB raster to float64 luminance; grayscale passes through."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr @ BT601_WEIGHTS
    if arr.ndim != 2:
        raise DataError(f"expected 2-D or 3-D raster, got shape {arr.shape}")
    return arr


def entropic_redundancy(image: np.ndarray, levels: int = 256) -> float:
    """1 minus the normalized Shannon entropy of the intensity histogram.

    Empty (zero-entropy) bins contribute nothing; a constant image scores
    exactly 1, a uniform histogram over all ``levels`` scores 0.
    """
    if levels < 2:
        raise ConfigurationError("levels must be >= 2")
    lum = to_luminance(image)
    if lum.size == 0:
        raise DataError("image is empty")
    # Uniform bins over the 8-bit range so H <= log2(levels) for any levels.
    quantized = np.clip(np.floor(lum * levels / 256.0), 0, levels - 1).astype(np.int64)
    counts = np.bincount(quantized.ravel(), minlength=levels)
    p = counts[counts > 0] / lum.size
    entropy = float(-(p * np.log2(p)).sum())
    return 1.0 - entropy / math.log2(levels)


def ssim_matrix(image: np.ndarray, patch_size: int = 16) -> SSIMMatrix:
    """Pairwise structural similarity over a non-overlapping patch grid.

    Patches tile the image top-left to bottom-right; remainder rows and
    columns that do not fill a patch are discarded.
    """
    lum = to_luminance(image)
    h, w = lum.shape
    rows, cols = h // patch_size, w // patch_size
    n = rows * cols
    if n < 2:
        raise DataError(
            f"image {h}x{w} yields {n} patch(es) of size {patch_size}; need at least 2"
        )
    patches = (
        lum[: rows * patch_size, : cols * patch_size]
        .reshape(rows, patch_size, cols, patch_size)
        .transpose(0, 2, 1, 3)
        .reshape(n, patch_size * patch_size)
    )

    means = patches.mean(axis=1)
    centered = patches - means[:, None]
    gram = centered @ centered.T
    gram = (gram + gram.T) * 0.5  # exact symmetry despite BLAS rounding
    cov = gram / patches.shape[1]
    variances = np.diagonal(cov).copy()

    mu_term = 2.0 * np.outer(means, means) + C1
    mu_norm = means[:, None] ** 2 + means[None, :] ** 2 + C1
    sigma_term = 2.0 * cov + C2
    sigma_norm = variances[:, None] + variances[None, :] + C2
    values = (mu_term * sigma_term) / (mu_norm * sigma_norm)
    return SSIMMatrix(values=values, means=means, variances=variances)


def structural_redundancy(m: SSIMMatrix) -> float:
    """Mean of the N(N-1) off-diagonal similarity entries."""
    n = m.n_patches
    if n < 2:
        raise DataError("structural redundancy undefined for fewer than 2 patches")
    off_sum = m.values.sum() - np.trace(m.values)
    return float(off_sum / (n * (n - 1)))


def analyze_image(image: np.ndarray, levels: int = 256, patch_size: int = 16) -> RedundancyReport:
    m = ssim_matrix(image, patch_size=patch_size)
    return RedundancyReport(
        r_e=entropic_redundancy(image, levels=levels),
        r_s=structural_redundancy(m),
        levels=levels,
        patch_size=patch_size,
        n_patches=m.n_patches,
    )


def corpus_report(
    inputs: str | Path | Iterable[tuple[str, np.ndarray]],
    levels: int = 256,
    patch_size: int = 16,
) -> CorpusReport:
    """Per-image redundancy over a directory of rasters or (id, array) pairs.

    Undecodable files are skipped with a warning and counted; results merge
    in sorted-id order so the report is deterministic.
    """
    per_image: dict[str, RedundancyReport] = {}
    skipped = 0
    for name, image in sorted(_iter_images(inputs), key=lambda pair: pair[0]):
        if image is None:
            skipped += 1
            continue
        per_image[name] = analyze_image(image, levels=levels, patch_size=patch_size)
    if not per_image:
        raise DataError("no decodable images in corpus")
    r_e = np.array([rep.r_e for rep in per_image.values()])
    r_s = np.array([rep.r_s for rep in per_image.values()])
    return CorpusReport(
        per_image=per_image,
        mean_r_e=float(r_e.mean()),
        mean_r_s=float(r_s.mean()),
        std_r_e=float(r_e.std()),
        std_r_s=float(r_s.std()),
        n_images=len(per_image),
        n_skipped=skipped,
    )


def _iter_images(inputs) -> Iterable[tuple[str, np.ndarray | None]]:
    if isinstance(inputs, (str, Path)):
        directory = Path(inputs)
        if not directory.is_dir():
            raise DataError(f"corpus directory missing: {directory}")
        for path in sorted(directory.iterdir()):
            if not path.is_file():
                continue
            try:
                with Image.open(path) as img:
                    yield path.name, np.asarray(img.convert("RGB"))
            except (UnidentifiedImageError, OSError):
                logger.warning("skipping undecodable file %s", path)
                yield path.name, None
    else:
        yield from inputs


def write_report_csv(report: CorpusReport, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "r_e", "r_s", "N"])
        for name, rep in report.per_image.items():
            writer.writerow([name, f"{rep.r_e:.6f}", f"{rep.r_s:.6f}", rep.n_patches])
