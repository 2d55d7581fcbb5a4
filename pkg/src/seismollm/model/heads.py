"""Task-specific output heads."""
from __future__ import annotations

import torch
from torch import nn
import torch.nn.functional as F

from .embedder import latent_unpatch

TASKS = ("picking", "azimuth", "distance", "magnitude", "polarity")
OUTPUT_DIM = {"azimuth": 2, "polarity": 2, "distance": 1, "magnitude": 1}


class PickingHead(nn.Module):
    """Unpatch tokens, then upsample + conv + GELU stages down to 2 sigmoid channels (P, S)."""

    def __init__(self, unpatch_channels: int = 96, patch_size: int = 8, upsample=(2, 2, 2), channels=(48, 24, 8),
                 kernel_size: int = 7):
        super().__init__()
        if len(upsample) != len(channels):
            raise ValueError("one upsample factor per stage")
        self.unpatch_channels = unpatch_channels
        self.patch_size = patch_size
        self.upsample = tuple(upsample)
        convs = []
        c_in = unpatch_channels
        for c_out in channels:
            convs.append(nn.Conv1d(c_in, c_out, kernel_size, padding=kernel_size // 2))
            c_in = c_out
        self.stages = nn.ModuleList(convs)
        self.out = nn.Conv1d(c_in, 2, kernel_size, padding=kernel_size // 2)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        x = latent_unpatch(tokens, self.unpatch_channels, self.patch_size)
        for factor, conv in zip(self.upsample, self.stages):
            if factor > 1:
                x = F.interpolate(x, scale_factor=factor, mode="nearest")
            x = F.gelu(conv(x))
        return torch.sigmoid(self.out(x))


class PoolingHead(nn.Module):
    """Two convolutions over the token axis, global average pool, linear, task activation."""

    def __init__(self, task: str, d_model: int = 768, channels: int = 128, kernel_size: int = 3):
        super().__init__()
        if task not in OUTPUT_DIM:
            raise ValueError(f"no pooling head for task {task!r}")
        self.task = task
        self.conv1 = nn.Conv1d(d_model, channels, kernel_size, padding=kernel_size // 2)
        self.conv2 = nn.Conv1d(channels, channels, kernel_size, padding=kernel_size // 2)
        self.linear = nn.Linear(channels, OUTPUT_DIM[task])

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        x = tokens.transpose(-1, -2)
        x = F.gelu(self.conv2(F.gelu(self.conv1(x))))
        y = self.linear(x.mean(dim=-1))
        if self.task == "azimuth":
            return torch.tanh(y)
        if self.task == "polarity":
            return torch.softmax(y, dim=-1)
        return torch.sigmoid(y).squeeze(-1)


def split_upsampling(total: int, stages: int = 3) -> tuple[int, ...]:
    """Distribute an integer upsampling factor over ``stages`` (e.g. 8 -> (2, 2, 2), 4 -> (2, 2, 1))."""
    factors = [1] * stages
    remaining = total
    i = 0
    while remaining > 1:
        if remaining % 2:
            raise ValueError(f"upsampling factor {total} must be a power of two")
        factors[i % stages] *= 2
        remaining //= 2
        i += 1
    return tuple(factors)
