"""Multi-scale convolutional embedder and latent patching."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as F


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class MultiScaleBlockCfg:
    in_channels: int
    out_channels: int
    kernel_sizes: tuple[int, ...] = (3, 5, 7, 9)
    stride: int = 2

    def __post_init__(self):
        if any(k % 2 == 0 for k in self.kernel_sizes):
            raise ValueError(f"branch kernels must be odd, got {self.kernel_sizes}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")


def standardize(x: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Per-trace, per-channel zero mean / unit variance over the time axis."""
    mean = x.mean(dim=-1, keepdim=True)
    std = x.std(dim=-1, keepdim=True, unbiased=False)
    return (x - mean) / (std + eps)


class ConvBranch(nn.Module):
    """GELU(BN(Conv_k(Proj(x))))."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, stride: int):
        super().__init__()
        # channel-wise linear map, applied at every time step
        self.proj = nn.Conv1d(in_channels, out_channels, 1)
        self.conv = nn.Conv1d(out_channels, out_channels, kernel_size, stride=stride, padding=kernel_size // 2)
        self.bn = nn.BatchNorm1d(out_channels)

    def forward(self, x):
        return F.gelu(self.bn(self.conv(self.proj(x))))


class MultiScaleBlock(nn.Module):
    """Parallel branches with different kernel sizes, concatenated, projected, batch-normed."""

    def __init__(self, cfg: MultiScaleBlockCfg):
        super().__init__()
        self.cfg = cfg
        self.branches = nn.ModuleList(
            ConvBranch(cfg.in_channels, cfg.out_channels, k, cfg.stride) for k in cfg.kernel_sizes
        )
        self.proj = nn.Conv1d(len(cfg.kernel_sizes) * cfg.out_channels, cfg.out_channels, 1)
        self.bn = nn.BatchNorm1d(cfg.out_channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-2] != self.cfg.in_channels:
            raise ShapeError(f"input x has {x.shape[-2]} channels, block expects {self.cfg.in_channels}")
        if x.shape[-1] % self.cfg.stride:
            raise ShapeError(f"input x length {x.shape[-1]} not divisible by stride {self.cfg.stride}")
        y = torch.cat([branch(x) for branch in self.branches], dim=-2)
        return self.bn(self.proj(y))


def multiscale_block_forward(x: torch.Tensor, block: MultiScaleBlock) -> torch.Tensor:
    """Run one block on an unbatched ``[C_in, T]`` or batched ``[B, C_in, T]`` input."""
    if x.dim() == 2:
        return block(x.unsqueeze(0)).squeeze(0)
    return block(x)


class ConvEmbedder(nn.Module):
    def __init__(self, in_channels: int = 3, channels=(16, 32, 64, 96), strides=(2, 2, 2, 1), kernel_sizes=(3, 5, 7, 9)):
        super().__init__()
        if len(channels) != len(strides):
            raise ValueError("channels and strides must have the same length")
        cfgs = []
        c_in = in_channels
        for c_out, s in zip(channels, strides):
            cfgs.append(MultiScaleBlockCfg(c_in, c_out, tuple(kernel_sizes), s))
            c_in = c_out
        self.blocks = nn.Sequential(*(MultiScaleBlock(c) for c in cfgs))
        self.reduction = 1
        for s in strides:
            self.reduction *= s
        self.out_channels = channels[-1]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] % self.reduction:
            raise ShapeError(
                f"waveform length {x.shape[-1]} is not a multiple of {self.reduction}; pad inputs first"
            )
        return self.blocks(x)


def latent_patch(features: torch.Tensor, patch_size: int) -> torch.Tensor:
    """``[..., C, T] -> [..., T/P, C*P]``; each token holds P samples of channel 0, then channel 1, ..."""
    *lead, c, t = features.shape
    if t % patch_size:
        raise ShapeError(f"feature length {t} not divisible by patch size {patch_size}")
    n = t // patch_size
    x = features.reshape(*lead, c, n, patch_size)
    x = x.transpose(-3, -2)
    return x.reshape(*lead, n, c * patch_size)


def latent_unpatch(tokens: torch.Tensor, channels: int, patch_size: int) -> torch.Tensor:
    """Exact inverse of :func:`latent_patch`."""
    *lead, n, d = tokens.shape
    if d != channels * patch_size:
        raise ShapeError(f"token dim {d} != channels*patch_size = {channels}*{patch_size}")
    x = tokens.reshape(*lead, n, channels, patch_size)
    x = x.transpose(-3, -2)
    return x.reshape(*lead, channels, n * patch_size)


class ConvFront(nn.Module):
    """Standardize, embed, then patch: ``[B, 3, L] -> [B, L/64, 768]`` with default sizes."""

    def __init__(self, channels=(16, 32, 64, 96), strides=(2, 2, 2, 1), kernel_sizes=(3, 5, 7, 9), patch_size: int = 8):
        super().__init__()
        self.embedder = ConvEmbedder(3, channels, strides, kernel_sizes)
        self.patch_size = patch_size
        self.token_stride = self.embedder.reduction * patch_size
        self.out_dim = channels[-1] * patch_size

    def forward(self, waveform: torch.Tensor) -> torch.Tensor:
        return latent_patch(self.embedder(standardize(waveform)), self.patch_size)


class PatchFront(nn.Module):
    """Fixed patching of the raw waveform plus a linear embedding (no convolutional embedder)."""

    def __init__(self, patch_size: int = 32, out_dim: int = 768, in_channels: int = 3):
        super().__init__()
        self.patch_size = patch_size
        self.token_stride = patch_size
        self.out_dim = out_dim
        self.embed = nn.Linear(in_channels * patch_size, out_dim)

    def forward(self, waveform: torch.Tensor) -> torch.Tensor:
        if waveform.shape[-1] % self.patch_size:
            raise ShapeError(f"waveform length {waveform.shape[-1]} not divisible by {self.patch_size}")
        return self.embed(latent_patch(standardize(waveform), self.patch_size))
