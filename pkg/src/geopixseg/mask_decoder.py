"""Spatial correlation and mask prediction.

The D-Projector pools the description embeddings into a global vector,
cross-attends it over flattened multi-scale features and maps the residual
sum to a single mask query per instruction. A pixel decoder fuses the
pyramid top-down into stride-4 per-pixel embeddings plus attention
features at strides {8, 16, 32}. The query decoder refines the query with
masked cross-attention cycling over those scales; the mask is the dot
product between the projected query and the pixel embeddings. There is no
learned query pool, no score head and no bipartite matching: mask count
always equals instruction count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .config import MaskDecoderConfig
from .encoder import FeaturePyramid
from .errors import DataError


def sine_position_embedding(h: int, w: int, dim: int, device=None) -> torch.Tensor:
    """2-D sine/cosine position features, flattened row-major to (h*w, dim)."""
    half = dim // 2
    y = torch.arange(h, dtype=torch.float32, device=device)[:, None].expand(h, w)
    x = torch.arange(w, dtype=torch.float32, device=device)[None, :].expand(h, w)
    y = y / max(h - 1, 1) * 2 * math.pi
    x = x / max(w - 1, 1) * 2 * math.pi
    freq = torch.arange(half // 2, dtype=torch.float32, device=device)
    freq = 10000.0 ** (2 * freq / half)
    out = torch.cat(
        [
            torch.sin(x[..., None] / freq),
            torch.cos(x[..., None] / freq),
            torch.sin(y[..., None] / freq),
            torch.cos(y[..., None] / freq),
        ],
        dim=-1,
    )
    return out.reshape(h * w, -1)


def pool_description(desc: torch.Tensor) -> torch.Tensor:
    """Mean over description vectors, (K, D) -> (D,).

    Column-wise sorting fixes the floating-point summation order and the
    wide accumulator absorbs its rounding, so the pooled vector is bitwise
    invariant to description token order.
    """
    if desc.ndim != 2 or desc.shape[0] < 1:
        raise DataError("description embeddings must be (K >= 1, D)")
    canonical = torch.sort(desc.double(), dim=0).values
    return (canonical.sum(dim=0) / desc.shape[0]).to(desc.dtype)


class DProjector(nn.Module):
    """Description embeddings + feature pyramid -> one query per instruction."""

    def __init__(self, lm_dim: int, mask_dim: int, heads: int, in_channels: tuple[int, int, int]):
        super().__init__()
        self.input_proj = nn.ModuleList(nn.Conv2d(c, mask_dim, 1) for c in in_channels)
        self.level_emb = nn.Embedding(len(in_channels), mask_dim)
        self.cross_attn = nn.MultiheadAttention(
            lm_dim, heads, kdim=mask_dim, vdim=mask_dim, batch_first=True
        )
        self.out = nn.Linear(lm_dim, mask_dim)

    def forward(self, descriptions: list[torch.Tensor], pyramid: FeaturePyramid) -> torch.Tensor:
        """(K_i, D) per sample + pyramid -> (B, mask_dim) query vectors."""
        g = torch.stack([pool_description(d) for d in descriptions])  # (B, D)
        feats = []
        for proj, level, emb in zip(
            self.input_proj, (pyramid.v2, pyramid.v3, pyramid.v4), self.level_emb.weight
        ):
            feats.append(proj(level).flatten(2).transpose(1, 2) + emb)
        memory = torch.cat(feats, dim=1)  # (B, sum HW, mask_dim)
        c, _ = self.cross_attn(g[:, None], memory, memory, need_weights=False)
        return self.out(g + c[:, 0])


class PixelDecoder(nn.Module):
    """Top-down lateral fusion of the pyramid.

    Returns stride-4 per-pixel mask features and the projected maps at
    strides {8, 16, 32} used as decoder attention memory, all at mask_dim
    channels.
    """

    def __init__(self, in_channels: tuple[int, int, int, int], mask_dim: int):
        super().__init__()
        self.laterals = nn.ModuleList(nn.Conv2d(c, mask_dim, 1) for c in in_channels)
        self.outputs = nn.ModuleList(
            nn.Conv2d(mask_dim, mask_dim, 3, padding=1) for _ in in_channels
        )

    def forward(self, pyramid: FeaturePyramid) -> tuple[torch.Tensor, list[torch.Tensor]]:
        levels = pyramid.levels()
        laterals = [lat(v) for lat, v in zip(self.laterals, levels)]
        fused = [laterals[-1]]
        for lat in reversed(laterals[:-1]):
            up = F.interpolate(fused[0], size=lat.shape[-2:], mode="nearest")
            fused.insert(0, lat + up)
        p1, p2, p3, p4 = (out(x) for out, x in zip(self.outputs, fused))
        return p1, [p4, p3, p2]  # mask features, memory in 1/32 -> 1/16 -> 1/8 order


class MaskHead(nn.Module):
    """Shared prediction head: normalized query -> mask embedding -> logits."""

    def __init__(self, mask_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(mask_dim)
        self.mlp = nn.Sequential(
            nn.Linear(mask_dim, mask_dim),
            nn.ReLU(),
            nn.Linear(mask_dim, mask_dim),
            nn.ReLU(),
            nn.Linear(mask_dim, mask_dim),
        )

    def forward(self, query: torch.Tensor, mask_features: torch.Tensor) -> torch.Tensor:
        embed = self.mlp(self.norm(query))  # (B, Q, C)
        return torch.einsum("bqc,bchw->bqhw", embed, mask_features)


class QueryDecoderLayer(nn.Module):
    def __init__(self, dim: int, heads: int, ffn_dim: int):
        super().__init__()
        self.heads = heads
        self.cross_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(nn.Linear(dim, ffn_dim), nn.ReLU(), nn.Linear(ffn_dim, dim))
        self.norm3 = nn.LayerNorm(dim)

    def forward(
        self,
        query: torch.Tensor,
        memory: torch.Tensor,
        pos: torch.Tensor,
        attn_mask: torch.Tensor | None,
    ) -> torch.Tensor:
        attended, _ = self.cross_attn(
            query, memory + pos, memory, attn_mask=attn_mask, need_weights=False
        )
        query = self.norm1(query + attended)
        attended, _ = self.self_attn(query, query, query, need_weights=False)
        query = self.norm2(query + attended)
        return self.norm3(query + self.ffn(query))


class QueryDecoder(nn.Module):
    """Masked-attention refinement over scales cycling 1/32 -> 1/16 -> 1/8."""

    def __init__(self, config: MaskDecoderConfig):
        super().__init__()
        self.config = config
        self.layers = nn.ModuleList(
            QueryDecoderLayer(config.mask_dim, config.heads, config.ffn_dim)
            for _ in range(config.layers)
        )
        self.level_emb = nn.Embedding(3, config.mask_dim)
        self.head = MaskHead(config.mask_dim)

    def forward(
        self,
        query: torch.Tensor,
        memory_maps: list[torch.Tensor],
        mask_features: torch.Tensor,
    ) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """(B, C) query -> refined (B, C) query + per-layer mask logits at
        stride 4, earliest (pre-layer-1) first."""
        memories, positions, sizes = [], [], []
        for i, level in enumerate(memory_maps):
            b, c, h, w = level.shape
            memories.append(level.flatten(2).transpose(1, 2) + self.level_emb.weight[i])
            positions.append(sine_position_embedding(h, w, c, device=level.device)[None])
            sizes.append((h, w))

        q = query[:, None]  # (B, 1, C)
        logits = self.head(q, mask_features)
        predictions = [logits]
        for i, layer in enumerate(self.layers):
            lvl = i % len(memory_maps)
            attn_mask = self._attention_mask(logits, sizes[lvl])
            q = layer(q, memories[lvl], positions[lvl], attn_mask)
            logits = self.head(q, mask_features)
            predictions.append(logits)
        return q[:, 0], predictions

    def _attention_mask(self, logits: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
        """Restrict attention to the previous prediction's foreground at the
        target scale; a row with no foreground at all falls back to
        unmasked attention."""
        resized = F.interpolate(logits, size=size, mode="bilinear", align_corners=False)
        mask = (resized.sigmoid().flatten(2) < 0.5).bool()  # (B, 1, HW), True = blocked
        mask[mask.all(dim=-1)] = False
        mask = mask.repeat_interleave(self.config.heads, dim=0)  # (B*heads, 1, HW)
        return mask.detach()


@dataclass
class MaskPrediction:
    """Mask logits at decoder resolution plus the full-resolution
    probability map; binary mask = probabilities > threshold."""

    logits: torch.Tensor  # (B, 1, S/4, S/4)
    probabilities: torch.Tensor  # (B, S, S) in [0, 1]
    threshold: float = 0.5

    @property
    def binary(self) -> torch.Tensor:
        return self.probabilities > self.threshold


def predict_mask(
    query: torch.Tensor,
    pixel_embeddings: torch.Tensor,
    head: MaskHead,
    out_size: int,
    threshold: float = 0.5,
) -> MaskPrediction:
    """One mask per query: logits(x, y) = <MLP(q), pix(x, y)>, upsampled
    bilinearly and squashed to the full-resolution probability map."""
    logits = head(query[:, None], pixel_embeddings)
    probs = torch.sigmoid(
        F.interpolate(logits, size=(out_size, out_size), mode="bilinear", align_corners=False)
    )[:, 0]
    return MaskPrediction(logits=logits, probabilities=probs, threshold=threshold)
