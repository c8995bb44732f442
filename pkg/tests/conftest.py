"""Shared fixtures for the test suite.

The toy end-to-end model is expensive (several minutes of CPU training), so
it is trained once per session and shared by every test that needs a
converged cascade. All of its knobs are pinned; changing any of them
invalidates the calibrated accuracy floors in the acceptance suite.
"""

from __future__ import annotations

import pytest
import torch

torch.set_num_threads(1)

from octaseg.config import RunConfig, SynthSpec
from octaseg.dataset import split_samples
from octaseg.synth import synthesize_dataset
from octaseg.training import train_model

TOY_SAMPLE_COUNT = 200
TOY_DATA_SEED = 500
TOY_SPLIT_SEED = 1


def toy_config() -> RunConfig:
    """Frozen training recipe for the converged toy cascade."""
    cfg = RunConfig()
    cfg.train.epochs = 55
    cfg.train.batch_size = 4
    cfg.train.input_size = 64
    cfg.train.mc_samples = 10
    cfg.train.weight_update_period = 10
    cfg.train.val_period = 5
    cfg.train.seed = 11
    cfg.train.augment = False
    return cfg


@pytest.fixture(scope="session")
def toy_split():
    spec = SynthSpec(image_size=64)
    samples = synthesize_dataset(TOY_SAMPLE_COUNT, TOY_DATA_SEED, spec)
    return split_samples(samples, split_seed=TOY_SPLIT_SEED)


@pytest.fixture(scope="session")
def toy_run(toy_split, tmp_path_factory):
    """Train the full cascade once; returns (model, record, split)."""
    out_dir = tmp_path_factory.mktemp("toy_run")
    model, record = train_model(toy_config(), toy_split, out_dir,
                                variant="M*3")
    model.eval()
    return model, record, toy_split
