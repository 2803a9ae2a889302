"""Language-guided segmentation of overhead imagery.

From an image and a natural-language instruction to a binary target mask,
with the supporting pieces: hierarchical visual encoder, visual token
compression, a causal LM for instruction interpretation, a
description-queried mask decoder, image-redundancy analysis, and the
training/evaluation protocol.
"""

__version__ = "0.1.0"

from .config import RunConfig, desk_preset, full_preset  # noqa: F401
from .data import ImageSample, PreprocessedSample, load_manifest, preprocess  # noqa: F401
from .metrics import EvalReport, compute_metrics  # noqa: F401
from .model import GeoPixSegModel, load_model  # noqa: F401
from .redundancy import entropic_redundancy, ssim_matrix, structural_redundancy  # noqa: F401
from .synth import synth_dataset  # noqa: F401
