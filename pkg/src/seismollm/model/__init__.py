from .embedder import (
    ConvEmbedder,
    ConvFront,
    MultiScaleBlock,
    MultiScaleBlockCfg,
    PatchFront,
    ShapeError,
    latent_patch,
    latent_unpatch,
    multiscale_block_forward,
    standardize,
)
from .gpt2 import (
    CapacityError,
    CheckpointError,
    CheckpointReader,
    Gpt2Backbone,
    LoraCfg,
    find_checkpoint,
    load_gpt2_weights,
    random_gpt2_state,
    write_checkpoint,
)
from .heads import TASKS, PickingHead, PoolingHead
from .lora import LoRALinear, Projection, lora_forward
from .network import (
    PRETRAINED_VARIANTS,
    VARIANTS,
    ModelDims,
    SeisMoLLM,
    assemble,
    build_model,
    frozen_checksums,
    llm_blocks_forward,
    load_model,
    parameter_counts,
    partition,
    save_model,
    trainable_fraction,
)
