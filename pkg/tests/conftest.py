import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from regioncap import autodiff as ad
from regioncap.config import RunConfig


@pytest.fixture(autouse=True)
def checked_math():
    """All tests run with finiteness checks on every primitive."""
    ad.set_checked(True)
    yield
    ad.set_checked(False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_tiny_cfg(seed=0, dtype="float64") -> RunConfig:
    """Desk-scale-squared config for fast model tests."""
    cfg = RunConfig()
    cfg.seed = seed
    cfg.data.image_size = 32
    cfg.data.min_objects = 2
    cfg.data.max_objects = 4
    cfg.data.vocab_min_count = 1
    cfg.model.backbone_channels = (8, 16)
    cfg.model.backbone_pools = (True, True)
    cfg.model.rpn_channels = 16
    cfg.model.anchor_scales = (6.0, 12.0, 20.0)
    cfg.model.anchor_ratios = (0.5, 1.0, 2.0)
    cfg.model.roi_x = 3
    cfg.model.roi_y = 3
    cfg.model.code_dim = 32
    cfg.model.fc_dim = 32
    cfg.model.dropout = 0.1
    cfg.model.embed_dim = 16
    cfg.model.hidden_dim = 16
    cfg.model.dtype = dtype
    cfg.train.region_batch = 32
    cfg.train.iterations = 8
    cfg.train.checkpoint_interval = 0
    cfg.train.log_interval = 100
    cfg.eval.test_keep = 20
    cfg.eval.max_caption_len = 8
    return cfg


@pytest.fixture
def tiny_cfg():
    return make_tiny_cfg()
