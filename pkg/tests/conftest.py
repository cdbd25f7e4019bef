import os

import numpy as np
import pytest
import torch

from app.config import build_config, format_value
from app.services.data_service import DataService

# Configuration must not leak in from a developer's shell or .env
for _name in [name for name in os.environ if name.startswith("LAFR_")]:
    del os.environ[_name]


# Every stage shrunk to run in seconds on one CPU core
TINY_OVERRIDES = {
    "data.corpus_size": 24,
    "data.image_size": 16,
    "data.train_subset": 8,
    "data.eval_size": 4,
    "data.codec_images": 16,
    "codec.hidden_widths": [8, 16, 16],
    "codec.epochs": 2,
    "codec.batch_size": 8,
    "codec.min_images": 4,
    "codec.max_final_loss": 1.0,
    "prior.hidden_channels": 8,
    "prior.context_dim": 8,
    "prior.vocab_size": 32,
    "prior.epochs": 1,
    "prior.batch_size": 4,
    "adapter.codebook_size": 16,
    "adapter.code_dim": 8,
    "adapter.hidden_channels": 8,
    "stage1.epochs": 1,
    "stage1.batch_size": 4,
    "stage2.total_steps": 2,
    "stage2.batch_size": 2,
    "stage2.log_every": 1,
    "eval.diagnostic_samples": 4,
}


@pytest.fixture
def tiny_overrides(tmp_path):
    """Override map for a tiny run rooted in a temporary directory."""
    return {**TINY_OVERRIDES, "output_dir": str(tmp_path / "run")}


@pytest.fixture
def tiny_config(tiny_overrides):
    """Resolved tiny RunConfig (no file, no environment)."""
    return build_config(overrides=tiny_overrides, environ={}, use_dotenv=False)


@pytest.fixture
def toy_faces():
    """Eight 16×16 toy faces."""
    return DataService.generate_toy_faces(8, 16, seed=7)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


def as_set_args(overrides):
    """Override map → repeated --set key=value CLI arguments"""
    args = []
    for key, value in overrides.items():
        args.extend(["--set", f"{key}={format_value(value)}"])
    return args


@pytest.fixture(scope="session")
def tiny_set_args():
    """--set arguments for a tiny run (output dir supplied per test)."""
    return as_set_args(TINY_OVERRIDES)
