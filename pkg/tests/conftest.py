import logging

import numpy as np
import pytest
import torch

from eendvc.experiment import SyntheticExperiment, run_synthetic
from eendvc.features import MockBackbone
from eendvc.model import EncoderConfig, build_model

logging.getLogger("eendvc").setLevel(logging.WARNING)


@pytest.fixture(scope="session")
def synthetic_run(tmp_path_factory):
    """The tiny model trained for 20 epochs on the synthetic corpus, shared across modules."""
    torch.set_num_threads(1)
    return run_synthetic(tmp_path_factory.mktemp("synthetic"), SyntheticExperiment())


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_mock_model():
    backbone = MockBackbone()
    config = EncoderConfig(input_dim=16, model_dim=16, ff_dim=32, heads=2, conv_kernel=3, blocks=1,
                           dropout=0.0)
    return build_model(config, backbone=backbone, seed=0)
