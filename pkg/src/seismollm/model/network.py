"""Assembly of the full network and its frozen/trainable partition."""
from __future__ import annotations

import hashlib
import os
from collections.abc import Mapping
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
from torch import nn

from ..data import ConfigError
from .embedder import ConvFront, PatchFront
from .gpt2 import AttentionBackbone, Gpt2Backbone, LoraCfg, load_gpt2_weights
from .heads import TASKS, PickingHead, PoolingHead, split_upsampling

MODEL_FORMAT = "seismollm-model/1"

VARIANTS = ("full", "no_llm", "llm2att", "llm2trsf", "no_pretrain", "no_conv", "layers_2", "layers_6", "layers_12")
# variants whose blocks come from the pre-trained checkpoint
PRETRAINED_VARIANTS = ("full", "no_conv", "layers_2", "layers_6", "layers_12")


@dataclass(frozen=True)
class ModelDims:
    embed_channels: tuple[int, ...] = (16, 32, 64, 96)
    strides: tuple[int, ...] = (2, 2, 2, 1)
    kernel_sizes: tuple[int, ...] = (3, 5, 7, 9)
    patch_size: int = 8
    raw_patch_size: int = 32
    n_heads: int = 12
    n_positions: int = 1024
    lora_rank: int = 16
    lora_alpha: float = 16.0
    lora_dropout: float = 0.1
    dropout: float = 0.1
    head_channels: int = 128
    pick_channels: tuple[int, ...] = (48, 24, 8)

    @property
    def hidden(self) -> int:
        return self.embed_channels[-1] * self.patch_size

    @property
    def lora(self) -> LoraCfg:
        return LoraCfg(self.lora_rank, self.lora_alpha, self.lora_dropout)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelDims":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def variant_layers(variant: str, n_layers: int = 3) -> int:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}")
    if variant.startswith("layers_"):
        return int(variant.split("_")[1])
    if variant == "no_llm":
        return 0
    if variant in ("llm2att", "llm2trsf"):
        return 1
    return n_layers


class SeisMoLLM(nn.Module):
    """front (embedder + patching) -> backbone (GPT-2 blocks or an ablation) -> task head."""

    def __init__(self, front: nn.Module, backbone: nn.Module, head: nn.Module, task: str, variant: str = "full",
                 n_layers: int = 3, dims: ModelDims = ModelDims()):
        super().__init__()
        self.front = front
        self.backbone = backbone
        self.head = head
        self.task = task
        self.variant = variant
        self.n_layers = n_layers
        self.dims = dims

    @property
    def token_stride(self) -> int:
        return self.front.token_stride

    def tokens(self, waveform: torch.Tensor) -> torch.Tensor:
        return self.backbone(self.front(waveform))

    def forward(self, waveform: torch.Tensor) -> torch.Tensor:
        return self.head(self.tokens(waveform))

    def describe(self) -> dict:
        return {"task": self.task, "variant": self.variant, "n_layers": self.n_layers, "dims": asdict(self.dims)}


def make_head(task: str, dims: ModelDims, token_stride: int) -> nn.Module:
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}")
    if task == "picking":
        up = split_upsampling(token_stride // dims.patch_size, len(dims.pick_channels))
        return PickingHead(dims.embed_channels[-1], dims.patch_size, up, dims.pick_channels)
    return PoolingHead(task, dims.hidden, dims.head_channels)


def assemble(task: str, variant: str = "full", n_layers: int = 3, dims: ModelDims = ModelDims(),
             checkpoint: Mapping[str, torch.Tensor] | None = None, seed: int = 0,
             require_checkpoint: bool = True) -> SeisMoLLM:
    """Build any variant; only pre-trained variants read ``checkpoint``.

    ``require_checkpoint=False`` builds the bare architecture (used when the
    weights are restored from a saved model archive right after).
    """
    n_layers = variant_layers(variant, n_layers)
    if variant in PRETRAINED_VARIANTS and checkpoint is None and require_checkpoint:
        raise ConfigError(f"variant {variant!r} needs a GPT-2 checkpoint")
    torch.manual_seed(seed)
    d = dims.hidden
    if variant == "no_conv":
        front = PatchFront(dims.raw_patch_size, d)
    else:
        front = ConvFront(dims.embed_channels, dims.strides, dims.kernel_sizes, dims.patch_size)

    if variant == "no_llm":
        backbone = nn.Identity()
    elif variant == "llm2att":
        backbone = AttentionBackbone(d, dims.n_heads, dims.n_positions, dims.dropout)
    elif variant == "llm2trsf":
        backbone = Gpt2Backbone(1, d, dims.n_heads, dims.n_positions, None, dims.dropout)
    else:
        backbone = Gpt2Backbone(n_layers, d, dims.n_heads, dims.n_positions, dims.lora, dims.dropout)
        if variant in PRETRAINED_VARIANTS and checkpoint is not None:
            load_gpt2_weights(backbone, checkpoint)

    head = make_head(task, dims, front.token_stride)
    model = SeisMoLLM(front, backbone, head, task, variant, n_layers, dims)
    apply_partition(model)
    return model


def apply_partition(model: SeisMoLLM) -> None:
    """Freeze pre-trained attention/FFN weights and biases; everything else trains."""
    for name, p in model.named_parameters():
        frozen = model.variant in PRETRAINED_VARIANTS and name.startswith("backbone.") and ".base." in name
        p.requires_grad_(not frozen)


def build_model(config, checkpoint: Mapping[str, torch.Tensor] | None) -> SeisMoLLM:
    """Build from an experiment config (anything with task/variant/n_layers/dims/seed)."""
    return assemble(config.task, config.variant, config.n_layers, config.dims, checkpoint, config.seed)


def partition(model: nn.Module) -> tuple[set[str], set[str]]:
    frozen, trainable = set(), set()
    for name, p in model.named_parameters():
        (trainable if p.requires_grad else frozen).add(name)
    return frozen, trainable


def parameter_counts(model: nn.Module) -> tuple[int, int]:
    trainable = sum(p.numel() for p in model.parameters() if p.requires_grad)
    total = sum(p.numel() for p in model.parameters())
    return trainable, total


def trainable_fraction(model: nn.Module) -> float:
    trainable, total = parameter_counts(model)
    return trainable / total if total else 0.0


def frozen_checksums(model: nn.Module) -> dict[str, str]:
    return {
        name: hashlib.sha256(p.detach().cpu().contiguous().numpy().tobytes()).hexdigest()
        for name, p in model.named_parameters()
        if not p.requires_grad
    }


def llm_blocks_forward(tokens: torch.Tensor, model: SeisMoLLM, training: bool = False) -> torch.Tensor:
    """Run only the backbone on ``[N, D]`` or ``[B, N, D]`` tokens."""
    if model.n_layers == 0:
        raise ConfigError("model has no LLM blocks")
    squeeze = tokens.dim() == 2
    x = tokens.unsqueeze(0) if squeeze else tokens
    was = model.backbone.training
    model.backbone.train(training)
    try:
        out = model.backbone(x)
    finally:
        model.backbone.train(was)
    return out.squeeze(0) if squeeze else out


def save_model(model: SeisMoLLM, path: str | os.PathLike, config: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frozen, trainable = partition(model)
    torch.save(
        {
            "format": MODEL_FORMAT,
            "build": model.describe(),
            "state": model.state_dict(),
            "frozen": sorted(frozen),
            "trainable": sorted(trainable),
            "config": config or {},
        },
        path,
    )
    return path


def load_model(path: str | os.PathLike) -> tuple[SeisMoLLM, dict]:
    archive = torch.load(path, map_location="cpu", weights_only=False)
    if archive.get("format") != MODEL_FORMAT:
        raise ConfigError(f"{path}: unsupported model archive format {archive.get('format')!r}")
    b = archive["build"]
    dims = ModelDims.from_dict(b["dims"])
    model = assemble(b["task"], b["variant"], b["n_layers"], dims, require_checkpoint=False)
    model.load_state_dict(archive["state"])
    frozen = set(archive["frozen"])
    for name, p in model.named_parameters():
        p.requires_grad_(name not in frozen)
    return model, archive["config"]
