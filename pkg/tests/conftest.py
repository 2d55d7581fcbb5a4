import os
from pathlib import Path

import numpy as np
import pytest
import torch

from seismollm.data import ScalingRanges, SynthConfig, synth_dataset
from seismollm.model.gpt2 import CheckpointReader, random_gpt2_state, write_checkpoint

# one result line per acceptance criterion, printed at the end of the run
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}
ACCEPTANCE_TITLES = {
    1: "shape/compression suite",
    2: "LoRA identity at init vs reference GPT-2",
    3: "freezing contract and trainable fraction",
    4: "gradient suite (losses + toy model)",
    5: "patch bijection",
    6: "metric oracles",
    7: "location geometry",
    8: "overfit sanity per task",
    9: "synthetic generalization ordering",
    10: "ablation matrix smoke",
    11: "augmentation statistics",
    12: "label fixtures",
}


@pytest.fixture
def acceptance():
    def record(cid: int, passed: bool, detail: str = ""):
        ACCEPTANCE[cid] = (ACCEPTANCE_TITLES[cid], bool(passed), detail)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE_TITLES):
        if cid in ACCEPTANCE:
            title, ok, detail = ACCEPTANCE[cid]
            tr.write_line(f"criterion {cid:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
        else:
            tr.write_line(f"criterion {cid:2d} NOT RUN  {ACCEPTANCE_TITLES[cid]}")


@pytest.fixture(scope="session")
def gpt2_state():
    """Random GPT-2-small-shaped weights (wte shrunk, it is never read)."""
    return random_gpt2_state(n_layers=12, vocab_size=16, seed=1234, perturb=True)


@pytest.fixture(scope="session")
def checkpoint_path(gpt2_state, tmp_path_factory):
    return write_checkpoint(gpt2_state, tmp_path_factory.mktemp("gpt2") / "model.safetensors")


@pytest.fixture
def checkpoint(checkpoint_path):
    return CheckpointReader(checkpoint_path)


@pytest.fixture(scope="session")
def synth_small():
    scaling = ScalingRanges(magnitude=(0.0, 4.0), distance_km=(0.0, 50.0))
    return synth_dataset(SynthConfig(n=24, seed=3, length=512, sample_rate=50.0), scaling)


def published_checkpoint():
    """Path of real GPT-2 small weights under $SEISMOLLM_CACHE, if any."""
    from seismollm.model.gpt2 import find_checkpoint

    if not os.environ.get("SEISMOLLM_CACHE"):
        return None
    return find_checkpoint()
