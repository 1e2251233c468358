"""Shared toy-scale fixtures.

The toy geometry keeps every feature of the full architecture (both
encoders, gated fusion, three conv stages, the dense head) while staying
small enough for finite-difference probing: a 6x6 fused grid with
kernel-2 stages at strides 1, 1, 2 shrinks 6 -> 5 -> 4 -> 2 before the
mean pool.
"""

import numpy as np
import pytest

from jsfusion.config import ModelConfig, SynthConfig
from jsfusion.synthdata import generate_corpus


def toy_model_config(**overrides) -> ModelConfig:
    base = dict(
        variant="match",
        vocab_size=21,          # 20 words + blank
        n_max=6,
        m_max=6,
        word_dim=8,
        video_dim=5,
        lstm_hidden=4,
        video_cnn_dim=6,
        d1_dim=8,
        d2_dim=8,
        d3_dim=8,
        d4_dim=8,
        conv_channels=(8, 8, 8),
        conv_kernel=2,
        conv_strides=(1, 1, 2),
        head_dims=(8, 8, 8),
        output_dim=1,
    )
    base.update(overrides)
    return ModelConfig(**base)


def toy_synth_config(**overrides) -> SynthConfig:
    base = dict(
        corpus_size=12,
        vocab_size=20,
        sentence_len=(3, 6),
        frames_per_word=(1, 2),
        feature_dim=5,
        latent_dim=4,
        embedding_dim=8,
        noise=0.05,
        seed=0,
        n_max=6,
        m_max=6,
    )
    base.update(overrides)
    return SynthConfig(**base)


@pytest.fixture(scope="session")
def toy_dataset():
    return generate_corpus(toy_synth_config())


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
