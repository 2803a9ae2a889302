"""Hierarchical windowed-attention encoder.

Four stages produce a feature pyramid at strides {4, 8, 16, 32} of the
input with channel dims doubling per stage. Attention runs inside local
windows, alternating between regular and shifted partitions; stage
outputs are taken after the final block of each stage, before the 2x2
merge that feeds the next one.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import install_state, load_checkpoint, save_checkpoint
from .config import EncoderConfig
from .errors import ConfigurationError

ENCODER_STRIDES = (4, 8, 16, 32)


@dataclass
class FeaturePyramid:
    """Multi-scale feature maps, (B, C_h, H_h, W_h) per level."""

    v1: torch.Tensor
    v2: torch.Tensor
    v3: torch.Tensor
    v4: torch.Tensor
    strides: tuple[int, ...] = ENCODER_STRIDES

    def levels(self) -> tuple[torch.Tensor, ...]:
        return (self.v1, self.v2, self.v3, self.v4)

    def validate(self, input_size: int) -> None:
        dims = []
        for v, stride in zip(self.levels(), self.strides):
            expect = input_size // stride
            if v.shape[-2:] != (expect, expect):
                raise ConfigurationError(
                    f"stride-{stride} map is {tuple(v.shape[-2:])}, expected {(expect, expect)}"
                )
            dims.append(v.shape[1])
        if not all(a < b for a, b in zip(dims, dims[1:])):
            raise ConfigurationError(f"channel dims must strictly increase, got {dims}")


def window_partition(x: torch.Tensor, window: int) -> torch.Tensor:
    # (B, H, W, C) -> (B * nW, window*window, C)
    b, h, w, c = x.shape
    x = x.view(b, h // window, window, w // window, window, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, window * window, c)


def window_reverse(windows: torch.Tensor, window: int, h: int, w: int) -> torch.Tensor:
    b = windows.shape[0] // ((h // window) * (w // window))
    x = windows.view(b, h // window, w // window, window, window, -1)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, h, w, -1)


class WindowAttention(nn.Module):
    """Multi-head self-attention within one window, with a learned bias per
    relative position."""

    def __init__(self, dim: int, heads: int, window: int):
        super().__init__()
        self.dim = dim
        self.heads = heads
        self.window = window
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.relative_bias = nn.Parameter(torch.zeros((2 * window - 1) ** 2, heads))
        nn.init.trunc_normal_(self.relative_bias, std=0.02)

        coords = torch.stack(
            torch.meshgrid(torch.arange(window), torch.arange(window), indexing="ij")
        ).flatten(1)
        rel = coords[:, :, None] - coords[:, None, :] + window - 1
        index = rel[0] * (2 * window - 1) + rel[1]
        self.register_buffer("relative_index", index, persistent=False)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        bw, n, c = x.shape
        qkv = self.qkv(x).reshape(bw, n, 3, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q * self.scale) @ k.transpose(-2, -1)
        bias = self.relative_bias[self.relative_index.view(-1)].view(n, n, self.heads)
        attn = attn + bias.permute(2, 0, 1).unsqueeze(0)
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.view(bw // nw, nw, self.heads, n, n) + mask[None, :, None]
            attn = attn.view(bw, self.heads, n, n)
        attn = attn.softmax(dim=-1)
        x = (attn @ v).transpose(1, 2).reshape(bw, n, c)
        return self.proj(x)


class EncoderBlock(nn.Module):
    def __init__(self, dim: int, heads: int, window: int, shift: int, mlp_ratio: float):
        super().__init__()
        self.window = window
        self.shift = shift
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, window)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor, hw: tuple[int, int]) -> torch.Tensor:
        h, w = hw
        b, _, c = x.shape
        shortcut = x
        x = self.norm1(x).view(b, h, w, c)

        pad_r = (self.window - w % self.window) % self.window
        pad_b = (self.window - h % self.window) % self.window
        if pad_r or pad_b:
            x = F.pad(x, (0, 0, 0, pad_r, 0, pad_b))
        hp, wp = x.shape[1], x.shape[2]

        shift = self.shift if min(h, w) > self.window else 0
        if shift:
            x = torch.roll(x, shifts=(-shift, -shift), dims=(1, 2))
            mask = self._shift_mask(hp, wp, shift, x.device)
        else:
            mask = None

        windows = window_partition(x, self.window)
        windows = self.attn(windows, mask=mask)
        x = window_reverse(windows, self.window, hp, wp)

        if shift:
            x = torch.roll(x, shifts=(shift, shift), dims=(1, 2))
        if pad_r or pad_b:
            x = x[:, :h, :w]

        x = shortcut + x.reshape(b, h * w, c)
        return x + self.mlp(self.norm2(x))

    def _shift_mask(self, hp: int, wp: int, shift: int, device) -> torch.Tensor:
        # Region ids keep tokens that wrapped around during the cyclic shift
        # from attending across the seam.
        img = torch.zeros(1, hp, wp, 1, device=device)
        region = 0
        for hs in (slice(0, -self.window), slice(-self.window, -shift), slice(-shift, None)):
            for ws in (slice(0, -self.window), slice(-self.window, -shift), slice(-shift, None)):
                img[:, hs, ws] = region
                region += 1
        windows = window_partition(img, self.window).squeeze(-1)
        mask = windows[:, None, :] - windows[:, :, None]
        return mask.masked_fill(mask != 0, float(-100.0)).masked_fill(mask == 0, 0.0)


class PatchMerging(nn.Module):
    """2x2 neighborhood concat + linear halving of the merged channels."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim)
        self.reduction = nn.Linear(4 * dim, 2 * dim, bias=False)

    def forward(self, x: torch.Tensor, hw: tuple[int, int]) -> tuple[torch.Tensor, tuple[int, int]]:
        h, w = hw
        b, _, c = x.shape
        x = x.view(b, h, w, c)
        x = torch.cat(
            [x[:, 0::2, 0::2], x[:, 1::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 1::2]], dim=-1
        )
        x = x.view(b, (h // 2) * (w // 2), 4 * c)
        return self.reduction(self.norm(x)), (h // 2, w // 2)


class HierarchicalEncoder(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        dims = config.stage_dims
        self.patch_embed = nn.Conv2d(config.in_channels, dims[0], kernel_size=4, stride=4)
        self.embed_norm = nn.LayerNorm(dims[0])

        self.stages = nn.ModuleList()
        self.merges = nn.ModuleList()
        self.out_norms = nn.ModuleList()
        for s in range(4):
            blocks = nn.ModuleList(
                EncoderBlock(
                    dims[s],
                    config.heads[s],
                    config.window_size,
                    shift=0 if i % 2 == 0 else config.window_size // 2,
                    mlp_ratio=config.mlp_ratio,
                )
                for i in range(config.depths[s])
            )
            self.stages.append(blocks)
            self.out_norms.append(nn.LayerNorm(dims[s]))
            if s < 3:
                self.merges.append(PatchMerging(dims[s]))

    def forward(self, images: torch.Tensor) -> FeaturePyramid:
        if images.shape[-1] % 32 or images.shape[-2] % 32:
            raise ConfigurationError(
                f"input spatial size {tuple(images.shape[-2:])} not divisible by 32"
            )
        x = self.patch_embed(images)
        b, c, h, w = x.shape
        x = self.embed_norm(x.flatten(2).transpose(1, 2))
        hw = (h, w)

        outputs: list[torch.Tensor] = []
        for s in range(4):
            for block in self.stages[s]:
                x = block(x, hw)
            out = self.out_norms[s](x)
            outputs.append(out.transpose(1, 2).reshape(b, -1, hw[0], hw[1]))
            if s < 3:
                x, hw = self.merges[s](x, hw)
        pyramid = FeaturePyramid(*outputs)
        pyramid.validate(images.shape[-1])
        return pyramid

    def save_pretrained(self, path: str | Path) -> None:
        save_checkpoint(path, dataclasses.asdict(self.config), self.state_dict())


def load_pretrained(path: str | Path) -> HierarchicalEncoder:
    """Rebuild an encoder from a checkpoint written by this artifact."""
    payload = load_checkpoint(path)
    config = EncoderConfig(**{
        k: tuple(v) if isinstance(v, list) else v for k, v in payload["config"].items()
    })
    encoder = HierarchicalEncoder(config)
    install_state(encoder, payload["state_dict"])
    return encoder
