"""Seismic monitoring with a multi-scale convolutional embedder and LoRA-adapted GPT-2 blocks."""

__version__ = "0.1.0"
