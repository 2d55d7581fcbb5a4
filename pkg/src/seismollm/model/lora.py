"""Low-rank adapters on top of frozen ``x @ W + b`` projections."""
from __future__ import annotations

import math

import torch
from torch import nn
import torch.nn.functional as F

from .embedder import ShapeError


class Projection(nn.Module):
    """``x @ weight + bias`` with ``weight`` stored as ``[in, out]`` (GPT-2 Conv1D layout)."""

    def __init__(self, d_in: int, d_out: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(d_in, d_out))
        self.bias = nn.Parameter(torch.zeros(d_out))
        nn.init.normal_(self.weight, std=0.02)

    def forward(self, x):
        return torch.addmm(self.bias, x.reshape(-1, x.shape[-1]), self.weight).reshape(*x.shape[:-1], -1)


class LoRALinear(nn.Module):
    """Frozen projection plus a trainable low-rank update and bias.

    ``y = x W + b + (alpha / r) * (dropout(x) A) B + lora_bias``
    """

    def __init__(self, d_in: int, d_out: int, rank: int = 16, alpha: float = 16, dropout: float = 0.1):
        super().__init__()
        if rank < 1:
            raise ValueError("rank must be positive")
        self.base = Projection(d_in, d_out)
        self.rank = rank
        self.alpha = alpha
        self.scaling = alpha / rank
        self.lora_A = nn.Parameter(torch.empty(d_in, rank))
        self.lora_B = nn.Parameter(torch.zeros(rank, d_out))
        self.lora_bias = nn.Parameter(torch.zeros(d_out))
        self.dropout = nn.Dropout(dropout)
        self.reset_adapter()

    def reset_adapter(self):
        # same bound as kaiming_uniform(a=sqrt(5)) on the fan-in
        bound = 1.0 / math.sqrt(self.lora_A.shape[0])
        nn.init.uniform_(self.lora_A, -bound, bound)
        nn.init.zeros_(self.lora_B)
        nn.init.zeros_(self.lora_bias)

    def forward(self, x):
        update = (self.dropout(x) @ self.lora_A) @ self.lora_B
        return self.base(x) + self.scaling * update + self.lora_bias


def lora_forward(x: torch.Tensor, w_frozen: torch.Tensor, adapter: LoRALinear, training: bool = False,
                 bias: torch.Tensor | None = None) -> torch.Tensor:
    """Functional form: ``x W + bias + (alpha/r)(dropout(x) A) B + lora_bias``."""
    a, b = adapter.lora_A, adapter.lora_B
    if w_frozen.shape[0] != a.shape[0] or w_frozen.shape[1] != b.shape[1] or a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"rank mismatch: W {tuple(w_frozen.shape)}, A {tuple(a.shape)}, B {tuple(b.shape)}"
        )
    out = x @ w_frozen
    if bias is not None:
        out = out + bias
    xd = F.dropout(x, adapter.dropout.p, training=training)
    return out + adapter.scaling * (xd @ a) @ b + adapter.lora_bias
