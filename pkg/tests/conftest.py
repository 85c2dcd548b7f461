"""Shared fixtures: small model configs and seeded synthetic pairs."""

import numpy as np
import pytest

from beat.model import BeatConfig, init_model
from beat.preprocess import Segment, SegmentPair


def tiny_config(**overrides) -> BeatConfig:
    """Smallest interesting model: 4 patches, 2 queries, 2 heads."""
    base = dict(
        context_len=20, n_leads=1, patch_frame=5, embed_dim=8, n_queries=2,
        enc_layers=1, dec_layers=1, heads=2, ffn_mult=2,
        codebook_size1=4, codebook_size2=4, levels=2, pred_len=10,
    )
    base.update(overrides)
    return BeatConfig(**base)


def random_pair(config: BeatConfig, seed: int = 0) -> SegmentPair:
    rng = np.random.default_rng(seed)
    context = Segment(
        samples=rng.normal(size=(config.context_len, config.n_leads)),
        fs=250.0,
    )
    future = rng.normal(size=(config.pred_len, config.n_leads))
    return SegmentPair(context=context, future=future)


@pytest.fixture
def tiny_model():
    config = tiny_config()
    return config, init_model(config, seed=1)


@pytest.fixture
def tiny_pair():
    return random_pair(tiny_config(), seed=0)
