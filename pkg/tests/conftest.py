from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cluscomp.model import ModelConfig, init_lm
from cluscomp.recovery import TrainConfig, pretrain
from cluscomp.toydata import CorpusSpec, batchify, gen_corpus

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def markov_rows():
    """Seeded order-1 Markov text cut into 64-token rows."""
    return batchify(gen_corpus(CorpusSpec(vocab=96, length=300_000, seed=1, alpha=0.1)), 64)


@pytest.fixture(scope="session")
def pretrained_lm(markov_rows):
    """The 2-block toy LM after one epoch of full-parameter training."""
    cfg = TrainConfig(lr=3e-3, schedule="cosine", max_grad_norm=1.0, batch=16, warmup_ratio=0.05, seed=0)
    return pretrain(init_lm(ModelConfig(), 0), markov_rows[:-128], markov_rows[-128:], cfg).model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
