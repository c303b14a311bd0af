import numpy as np
import pytest

from refseg.config import ModelConfig
from refseg.data import GrammarConfig, vocabulary_for


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    """Smallest full-pipeline config: 16x16 image, C=8, 2 queries."""
    return ModelConfig(
        image_size=16,
        fusion_width=8,
        text_global_width=8,
        num_queries=2,
        max_tokens=9,
        heads=2,
        text_layers=1,
        decoder_layers=1,
        backbone_channels=(4, 8, 8, 8),
        precision="double",
    )


@pytest.fixture
def tiny_grammar():
    return GrammarConfig(image_size=16, max_shapes=3, size_frac_min=0.12, size_frac_max=0.2)


@pytest.fixture
def vocab():
    return vocabulary_for(GrammarConfig())
