import numpy as np
import pytest
from hypothesis import settings

from coground.data import (
    MentionSpan,
    NarrationTokens,
    RegionSet,
    Sample,
    SampleLabels,
)
from coground.model import CorefGroundingModel, ModelConfig

# property tests must behave identically run to run, like everything else here
settings.register_profile("deterministic", derandomize=True)
settings.load_profile("deterministic")


def tiny_config(**overrides) -> ModelConfig:
    base = dict(
        d_region=6,
        d_embed=8,
        vocab_size=12,
        n_text_layers=1,
        n_fusion_layers=1,
        n_visual_layers=1,
        n_heads=2,
        ffn_hidden=8,
        max_regions=8,
        max_tokens=16,
        seed=0,
    )
    base.update(overrides)
    return ModelConfig(**base)


def toy_sample(seed=0, n_mentions=2, n_regions=3, n_tokens=6, d_region=6, labeled=True):
    """A hand-sized sample: n_mentions spans over n_tokens, n_regions boxes."""
    rng = np.random.default_rng(seed)
    boxes = np.zeros((n_regions, 4))
    for i in range(n_regions):
        w = h = 0.8 / n_regions
        boxes[i] = (i / n_regions + 0.05 / n_regions, 0.3, w, h)
    regions = RegionSet(
        features=rng.normal(size=(n_regions, d_region)),
        boxes=boxes,
        class_ids=list(range(n_regions)),
    )
    token_ids = [int(t) for t in rng.integers(3, 12, size=n_tokens)]
    span_starts = np.linspace(0, n_tokens - 2, n_mentions).astype(int)
    mentions = [
        MentionSpan(int(s), int(s) + (2 if i % 2 == 0 else 1), "np" if i % 2 == 0 else "pron")
        for i, s in enumerate(span_starts)
    ]
    labels = None
    if labeled:
        chain = list(range(min(2, n_mentions)))
        labels = SampleLabels(
            chains=[chain] if len(chain) > 1 else [],
            mention_boxes=[boxes[i % n_regions].copy() for i in range(n_mentions)],
        )
    return Sample(
        id=f"toy-{seed}",
        regions=regions,
        narration=NarrationTokens(token_ids, mentions),
        labels=labels,
    )


@pytest.fixture
def tiny_model():
    return CorefGroundingModel(tiny_config())
