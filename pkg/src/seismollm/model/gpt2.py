"""GPT-2 decoder blocks with LoRA, and the checkpoint name mapping.

Checkpoint tensor mapping (Hugging Face ``gpt2`` layout, optional
``transformer.`` prefix).  GPT-2 stores its projections as ``Conv1D`` with
weight shape ``[in, out]`` and computes ``x @ W + b``; :class:`Projection`
uses the same layout, so no transpose is applied anywhere.

=====================================  =============================================
checkpoint tensor                      module parameter
=====================================  =============================================
``wpe.weight`` [1024, 768]             ``wpe.weight``
``h.{i}.ln_1.{weight,bias}``           ``blocks.{i}.ln_1.{weight,bias}``
``h.{i}.attn.c_attn.weight`` [768,     columns ``[0:768]`` -> ``blocks.{i}.attn.q.base.weight``,
2304]                                  ``[768:1536]`` -> ``...k...``, ``[1536:2304]`` -> ``...v...``
``h.{i}.attn.c_attn.bias`` [2304]      split the same way into ``q/k/v.base.bias``
``h.{i}.attn.c_proj.{weight,bias}``    ``blocks.{i}.attn.o.base.{weight,bias}``
``h.{i}.ln_2.{weight,bias}``           ``blocks.{i}.ln_2.{weight,bias}``
``h.{i}.mlp.c_fc.{weight,bias}``       ``blocks.{i}.mlp.fc.base.{weight,bias}`` [768, 3072]
``h.{i}.mlp.c_proj.{weight,bias}``     ``blocks.{i}.mlp.proj.base.{weight,bias}`` [3072, 768]
``ln_f.{weight,bias}``                 ``ln_f.{weight,bias}``
``wte.weight``, ``h.{i}.attn.bias``    not used
=====================================  =============================================
"""
from __future__ import annotations

import math
import os
from collections.abc import Mapping
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import nn
import torch.nn.functional as F

from .lora import LoRALinear, Projection

CHECKPOINT_ENV = "SEISMOLLM_CACHE"
CHECKPOINT_FILES = ("model.safetensors", "pytorch_model.bin")


class CheckpointError(KeyError):
    pass


class CapacityError(ValueError):
    pass


@dataclass(frozen=True)
class LoraCfg:
    rank: int = 16
    alpha: float = 16.0
    dropout: float = 0.1


def _linear(d_in, d_out, lora: LoraCfg | None):
    if lora is None:
        return Projection(d_in, d_out)
    return LoRALinear(d_in, d_out, lora.rank, lora.alpha, lora.dropout)


class Gpt2Attention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, lora: LoraCfg | None = None, dropout: float = 0.1, causal: bool = True):
        super().__init__()
        if d_model % n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        self.n_heads = n_heads
        self.causal = causal
        self.q = _linear(d_model, d_model, lora)
        self.k = _linear(d_model, d_model, lora)
        self.v = _linear(d_model, d_model, lora)
        self.o = _linear(d_model, d_model, lora)
        self.attn_dropout = dropout
        self.resid_dropout = nn.Dropout(dropout)

    def forward(self, x):
        b, n, d = x.shape
        h = self.n_heads

        def heads(t):
            return t.view(b, n, h, d // h).transpose(1, 2)

        q, k, v = heads(self.q(x)), heads(self.k(x)), heads(self.v(x))
        y = F.scaled_dot_product_attention(
            q, k, v, dropout_p=self.attn_dropout if self.training else 0.0, is_causal=self.causal
        )
        y = y.transpose(1, 2).reshape(b, n, d)
        return self.resid_dropout(self.o(y))


class Gpt2Mlp(nn.Module):
    def __init__(self, d_model: int, lora: LoraCfg | None = None, dropout: float = 0.1):
        super().__init__()
        self.fc = _linear(d_model, 4 * d_model, lora)
        self.proj = _linear(4 * d_model, d_model, lora)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        # GPT-2 uses the tanh approximation of GELU
        return self.dropout(self.proj(F.gelu(self.fc(x), approximate="tanh")))


class Gpt2Block(nn.Module):
    def __init__(self, d_model: int = 768, n_heads: int = 12, lora: LoraCfg | None = None, dropout: float = 0.1):
        super().__init__()
        self.ln_1 = nn.LayerNorm(d_model, eps=1e-5)
        self.attn = Gpt2Attention(d_model, n_heads, lora, dropout)
        self.ln_2 = nn.LayerNorm(d_model, eps=1e-5)
        self.mlp = Gpt2Mlp(d_model, lora, dropout)

    def forward(self, x):
        x = x + self.attn(self.ln_1(x))
        return x + self.mlp(self.ln_2(x))


class Gpt2Backbone(nn.Module):
    """Positional embedding, ``n_layers`` pre-norm decoder blocks, final layer norm."""

    def __init__(self, n_layers: int = 3, d_model: int = 768, n_heads: int = 12, n_positions: int = 1024,
                 lora: LoraCfg | None = LoraCfg(), dropout: float = 0.1):
        super().__init__()
        if n_layers < 1:
            raise ValueError("a GPT-2 backbone needs at least one layer")
        self.n_layers = n_layers
        self.n_positions = n_positions
        self.wpe = nn.Embedding(n_positions, d_model)
        self.drop = nn.Dropout(dropout)
        self.blocks = nn.ModuleList(Gpt2Block(d_model, n_heads, lora, dropout) for _ in range(n_layers))
        self.ln_f = nn.LayerNorm(d_model, eps=1e-5)
        init_gpt2_(self, n_layers)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        n = tokens.shape[-2]
        if n > self.n_positions:
            raise CapacityError(f"{n} tokens exceed the positional capacity {self.n_positions}")
        pos = torch.arange(n, device=tokens.device)
        x = self.drop(tokens + self.wpe(pos))
        for block in self.blocks:
            x = block(x)
        return self.ln_f(x)


class AttentionBackbone(nn.Module):
    """One randomly initialized multi-head attention layer in place of the GPT-2 blocks."""

    def __init__(self, d_model: int = 768, n_heads: int = 12, n_positions: int = 1024, dropout: float = 0.1):
        super().__init__()
        self.n_positions = n_positions
        self.wpe = nn.Embedding(n_positions, d_model)
        self.drop = nn.Dropout(dropout)
        self.ln_1 = nn.LayerNorm(d_model, eps=1e-5)
        self.attn = Gpt2Attention(d_model, n_heads, None, dropout)
        self.ln_f = nn.LayerNorm(d_model, eps=1e-5)
        init_gpt2_(self, 1)

    def forward(self, tokens):
        n = tokens.shape[-2]
        if n > self.n_positions:
            raise CapacityError(f"{n} tokens exceed the positional capacity {self.n_positions}")
        x = self.drop(tokens + self.wpe(torch.arange(n, device=tokens.device)))
        x = x + self.attn(self.ln_1(x))
        return self.ln_f(x)


def init_gpt2_(module: nn.Module, n_layers: int):
    """GPT-2 initialization: N(0, 0.02) weights, residual projections scaled by 1/sqrt(2L)."""
    for name, p in module.named_parameters():
        if "lora_" in name:
            continue
        if name.endswith("weight") and p.dim() >= 2:
            std = 0.02
            if name.endswith(("attn.o.weight", "attn.o.base.weight", "mlp.proj.weight", "mlp.proj.base.weight")):
                std = 0.02 / math.sqrt(2 * n_layers)
            nn.init.normal_(p, std=std)
        elif "ln" in name.split(".")[-2]:
            nn.init.ones_(p) if name.endswith("weight") else nn.init.zeros_(p)
        elif name.endswith("bias"):
            nn.init.zeros_(p)


# --------------------------------------------------------------------------
# checkpoints


class CheckpointReader(Mapping):
    """Read-only, lazily loaded view of a GPT-2 checkpoint file.

    Keys are normalized to drop a leading ``transformer.``.  ``reads`` counts
    tensor accesses so callers can assert a checkpoint was never touched.
    """

    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        if not self.path.exists():
            raise FileNotFoundError(self.path)
        self.reads = 0
        self._tensors: dict[str, torch.Tensor] | None = None

    def _load(self) -> dict[str, torch.Tensor]:
        if self._tensors is None:
            if self.path.suffix == ".safetensors":
                from safetensors.torch import load_file

                raw = load_file(str(self.path))
            else:
                raw = torch.load(self.path, map_location="cpu", weights_only=True)
            self._tensors = {_normalize_key(k): v for k, v in raw.items()}
        return self._tensors

    def __getitem__(self, key):
        self.reads += 1
        try:
            return self._load()[key]
        except KeyError:
            raise CheckpointError(f"checkpoint {self.path.name} has no tensor {key!r}") from None

    def __iter__(self):
        return iter(self._load())

    def __len__(self):
        return len(self._load())


def _normalize_key(key: str) -> str:
    return key[len("transformer."):] if key.startswith("transformer.") else key


def find_checkpoint(path: str | os.PathLike | None = None) -> Path | None:
    """Resolve an explicit path, or look for a checkpoint file under ``$SEISMOLLM_CACHE``."""
    if path is not None:
        p = Path(path)
        if p.is_dir():
            for name in CHECKPOINT_FILES:
                if (p / name).exists():
                    return p / name
            return None
        return p if p.exists() else None
    cache = os.environ.get(CHECKPOINT_ENV)
    if cache:
        return find_checkpoint(cache)
    return None


def checkpoint_mapping(n_layers: int, d_model: int = 768) -> list[tuple[str, str, slice | None]]:
    """(checkpoint name, parameter name, column slice) triples for the first ``n_layers`` blocks."""
    rows: list[tuple[str, str, slice | None]] = [("wpe.weight", "wpe.weight", None)]
    for i in range(n_layers):
        src, dst = f"h.{i}", f"blocks.{i}"
        for ln in ("ln_1", "ln_2"):
            for kind in ("weight", "bias"):
                rows.append((f"{src}.{ln}.{kind}", f"{dst}.{ln}.{kind}", None))
        for j, qkv in enumerate("qkv"):
            cols = slice(j * d_model, (j + 1) * d_model)
            for kind in ("weight", "bias"):
                rows.append((f"{src}.attn.c_attn.{kind}", f"{dst}.attn.{qkv}.base.{kind}", cols))
        for kind in ("weight", "bias"):
            rows.append((f"{src}.attn.c_proj.{kind}", f"{dst}.attn.o.base.{kind}", None))
            rows.append((f"{src}.mlp.c_fc.{kind}", f"{dst}.mlp.fc.base.{kind}", None))
            rows.append((f"{src}.mlp.c_proj.{kind}", f"{dst}.mlp.proj.base.{kind}", None))
    rows.append(("ln_f.weight", "ln_f.weight", None))
    rows.append(("ln_f.bias", "ln_f.bias", None))
    return rows


def load_gpt2_weights(backbone: Gpt2Backbone, checkpoint: Mapping[str, torch.Tensor]) -> None:
    """Copy the first ``backbone.n_layers`` blocks (plus wpe and ln_f) from ``checkpoint``."""
    params = dict(backbone.named_parameters())
    d_model = backbone.ln_f.normalized_shape[0]
    with torch.no_grad():
        for src, dst, cols in checkpoint_mapping(backbone.n_layers, d_model):
            try:
                t = checkpoint[src]
            except KeyError:
                raise CheckpointError(f"checkpoint tensor {src!r} is missing") from None
            if cols is not None:
                t = t[..., cols]
            target = params[dst]
            if tuple(t.shape) != tuple(target.shape):
                raise CheckpointError(
                    f"checkpoint tensor {src!r} has shape {tuple(t.shape)}, expected {tuple(target.shape)} for {dst}"
                )
            target.copy_(t.to(target.dtype))


def random_gpt2_state(n_layers: int = 12, d_model: int = 768, n_positions: int = 1024, vocab_size: int = 50257,
                      seed: int = 0, perturb: bool = True) -> dict[str, torch.Tensor]:
    """A GPT-2-shaped state dict in checkpoint naming with random values.

    With ``perturb`` the biases and layer-norm parameters are randomized too,
    so a wrong name mapping cannot hide behind zeros and ones.
    """
    g = torch.Generator().manual_seed(seed)

    def normal(*shape, std=0.02):
        return torch.randn(*shape, generator=g) * std

    def ln(prefix):
        w = 1.0 + normal(d_model, std=0.1) if perturb else torch.ones(d_model)
        b = normal(d_model) if perturb else torch.zeros(d_model)
        return {f"{prefix}.weight": w, f"{prefix}.bias": b}

    def bias(n):
        return normal(n) if perturb else torch.zeros(n)

    resid_std = 0.02 / math.sqrt(2 * n_layers)
    state = {"wte.weight": normal(vocab_size, d_model), "wpe.weight": normal(n_positions, d_model, std=0.01)}
    for i in range(n_layers):
        p = f"h.{i}"
        state.update(ln(f"{p}.ln_1"))
        state.update(ln(f"{p}.ln_2"))
        state[f"{p}.attn.c_attn.weight"] = normal(d_model, 3 * d_model)
        state[f"{p}.attn.c_attn.bias"] = bias(3 * d_model)
        state[f"{p}.attn.c_proj.weight"] = normal(d_model, d_model, std=resid_std)
        state[f"{p}.attn.c_proj.bias"] = bias(d_model)
        state[f"{p}.mlp.c_fc.weight"] = normal(d_model, 4 * d_model)
        state[f"{p}.mlp.c_fc.bias"] = bias(4 * d_model)
        state[f"{p}.mlp.c_proj.weight"] = normal(4 * d_model, d_model, std=resid_std)
        state[f"{p}.mlp.c_proj.bias"] = bias(d_model)
    state.update(ln("ln_f"))
    return state


def write_checkpoint(state: dict[str, torch.Tensor], path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix == ".safetensors":
        from safetensors.torch import save_file

        save_file({k: v.contiguous() for k, v in state.items()}, str(path))
    else:
        torch.save(state, path)
    return path
