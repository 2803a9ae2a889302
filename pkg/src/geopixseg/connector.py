"""Token compression connector.

Maps the stride-32 feature map into the LM embedding space while halving
each spatial side ``d`` times: d repetitions of [channel LayerNorm ->
stride-2 conv], then a final LayerNorm + linear projection. Token count
therefore quarters per increment of d; d=0 reduces to LN + projection.
"""

from __future__ import annotations

import torch
from torch import nn

from .config import ConnectorConfig
from .errors import ConfigurationError


class ChannelLayerNorm(nn.Module):
    """LayerNorm over the channel dim of a (B, C, H, W) map."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.LayerNorm(channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.norm(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


class TokenCompressor(nn.Module):
    def __init__(self, config: ConnectorConfig, expected_side: int | None = None):
        super().__init__()
        self.config = config
        if expected_side is not None and expected_side % 2**config.d != 0:
            raise ConfigurationError(
                f"feature side {expected_side} not divisible by 2^d={2 ** config.d}"
            )
        c = config.in_channels
        self.blocks = nn.ModuleList(
            nn.Sequential(
                ChannelLayerNorm(c),
                nn.Conv2d(c, c, kernel_size=config.kernel, stride=2, padding=config.kernel // 2),
            )
            for _ in range(config.d)
        )
        self.out_norm = nn.LayerNorm(c)
        self.proj = nn.Linear(c, config.out_dim)

    def forward(self, v4: torch.Tensor) -> torch.Tensor:
        """(B, C4, H, W) -> (B, (H / 2^d) * (W / 2^d), out_dim), row-major."""
        if v4.shape[-1] % 2**self.config.d or v4.shape[-2] % 2**self.config.d:
            raise ConfigurationError(
                f"feature side {tuple(v4.shape[-2:])} not divisible by 2^d={2 ** self.config.d}"
            )
        x = v4
        for block in self.blocks:
            x = block(x)
        tokens = x.flatten(2).transpose(1, 2)  # (B, HW, C)
        return self.proj(self.out_norm(tokens))

    def token_count(self, input_size: int) -> int:
        side = input_size // 32 // 2**self.config.d
        return side * side
