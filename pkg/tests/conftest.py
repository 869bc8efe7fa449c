import numpy as np
import pytest
import torch

from ctxcue.config import ModelConfig, SyntheticConfig
from ctxcue.data import ConversationalSample, generate_synthetic
from ctxcue.gradcheck import micro_config


def make_sample(sid="s0", tc=2, tu=1, dims=(4, 3, 2), label=0, sar=None, seed=0):
    rng = np.random.default_rng(seed)
    ctx = {m: rng.standard_normal((tc, d)).astype(np.float32) for m, d in zip("tav", dims)}
    utt = {m: rng.standard_normal((tu, d)).astype(np.float32) for m, d in zip("tav", dims)}
    return ConversationalSample(sid, label, ctx, utt, sar)


@pytest.fixture
def small_bundle():
    return generate_synthetic(SyntheticConfig(num_samples=24, d_t=6, d_a=5, d_v=4, len_ctx=3, len_utt=2), seed=3)


@pytest.fixture
def micro_cfg() -> ModelConfig:
    return micro_config()


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
