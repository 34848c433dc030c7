"""Shared fixtures: a small configuration and a reusable random cloud."""

import numpy as np
import pytest

from geocaps.config import desk_config


@pytest.fixture
def tiny_cfg():
    """Desk configuration shrunk until a training step takes milliseconds."""
    cfg = desk_config()
    cfg.data.n_train = 8
    cfg.data.n_val = 4
    cfg.data.n_test = 4
    cfg.data.n_points = 64
    cfg.parts.net_width = 8
    cfg.parts.net_res_blocks = 1
    cfg.parts.fold_width = 8
    cfg.parts.fold_res_blocks = 1
    cfg.parts.decoder_points = 16
    cfg.parts.steps = 4
    cfg.parts.batch_size = 2
    cfg.objects.net_width = 8
    cfg.objects.net_res_blocks = 1
    cfg.objects.steps = 4
    cfg.objects.batch_size = 2
    cfg.eval.n_objects = 4
    cfg.eval.trials = 2
    return cfg


@pytest.fixture
def cloud_batch():
    rng = np.random.default_rng(11)
    return rng.uniform(-1.0, 1.0, size=(3, 64, 3))
