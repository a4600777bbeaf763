import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coground.alignment import SOFT, GroundingMatrix
from coground.inference import (
    predict_chains,
    predict_grounding,
    tune_chain_threshold,
)
from coground.partitions import Partition

from .oracles import components_by_unionfind, cosine_matrix


def test_threshold_at_one_gives_singletons():
    emb = np.tile([1.0, 0.0], (4, 1))  # identical embeddings, cos exactly 1
    part = predict_chains(emb, 1.0)
    assert part.as_sets() == [frozenset({m}) for m in range(4)]


def test_identical_embeddings_cluster_together():
    emb = np.tile([0.3, 0.4], (5, 1))
    part = predict_chains(emb, 0.5)
    assert part.as_sets() == [frozenset(range(5))]


def test_chains_match_unionfind_oracle():
    rng = np.random.default_rng(0)
    for trial in range(30):
        emb = rng.normal(size=(rng.integers(2, 9), 6))
        thresh = rng.uniform(-0.2, 0.9)
        part = predict_chains(emb, thresh)
        cos = cosine_matrix(emb)
        n = emb.shape[0]
        edges = [(i, j) for i in range(n) for j in range(i + 1, n) if cos[i, j] > thresh]
        want = components_by_unionfind(n, edges)
        assert set(part.as_sets()) == want, f"trial {trial}"


@settings(max_examples=40, deadline=None)
@given(st.integers(min_value=0, max_value=10_000))
def test_partition_always_valid(seed):
    rng = np.random.default_rng(seed)
    emb = rng.normal(size=(int(rng.integers(1, 8)), 4))
    part = predict_chains(emb, float(rng.uniform(-1, 1.2)))
    assert isinstance(part, Partition)  # Partition validates in __post_init__
    assert part.n_mentions == emb.shape[0]


def test_monotonic_in_threshold():
    rng = np.random.default_rng(1)
    for _ in range(20):
        emb = rng.normal(size=(6, 5))
        t1, t2 = sorted(rng.uniform(-0.5, 1.0, size=2))
        coarse = predict_chains(emb, t1)
        fine = predict_chains(emb, t2)
        coarse_of = coarse.cluster_of()
        for cluster in fine.as_sets():
            # every cluster at the higher threshold stays inside one coarse cluster
            containers = {coarse_of[m] for m in cluster}
            assert len(containers) == 1


def test_scale_invariance():
    rng = np.random.default_rng(2)
    emb = rng.normal(size=(5, 4))
    base = predict_chains(emb, 0.4)
    scaled = predict_chains(emb * 37.5, 0.4)
    assert base == scaled


def test_empty_input():
    part = predict_chains(np.zeros((0, 4)), 0.5)
    assert part.n_mentions == 0 and part.clusters == ()


def test_greedy_variant_links_to_best_antecedent():
    # mention 2 is closest to mention 0; greedy links it there even though
    # mention 1 also clears the threshold
    emb = np.array([[1.0, 0.0], [0.9, 0.3], [0.99, 0.05]])
    part = predict_chains(emb, 0.9, method="greedy")
    assert part.cluster_of()[2] == part.cluster_of()[0]


def soft(values):
    return GroundingMatrix(np.asarray(values, dtype=float), SOFT)


def test_grounding_one_hot_rows():
    boxes = np.array([[0.0, 0.0, 0.1, 0.1], [0.5, 0.5, 0.2, 0.2], [0.2, 0.7, 0.1, 0.2]])
    pred = predict_grounding(soft([[0, 1, 0], [0, 0, 1]]), boxes)
    assert pred.region_indices == [1, 2]
    np.testing.assert_array_equal(pred.boxes[0], boxes[1])


def test_grounding_single_region():
    boxes = np.array([[0.1, 0.1, 0.3, 0.3]])
    pred = predict_grounding(soft([[1.0], [1.0], [1.0]]), boxes)
    assert pred.region_indices == [0, 0, 0]


def test_grounding_matches_linear_scan():
    rng = np.random.default_rng(3)
    raw = rng.uniform(size=(7, 5))
    g = soft(raw / raw.sum(axis=1, keepdims=True))
    boxes = np.column_stack(
        [rng.uniform(0, 0.5, 5), rng.uniform(0, 0.5, 5), rng.uniform(0.1, 0.4, 5), rng.uniform(0.1, 0.4, 5)]
    )
    pred = predict_grounding(g, boxes)
    for m in range(7):
        best, val = 0, -np.inf
        for r in range(5):
            if g.values[m, r] > val:
                best, val = r, g.values[m, r]
        assert pred.region_indices[m] == best


def test_tune_threshold_picks_separator():
    # two tight clusters at cos ~ 0.985 within, ~0 across: any threshold in
    # between is perfect, so the tuned one must score perfectly too
    a = np.array([1.0, 0.0])
    b = np.array([0.0, 1.0])
    jitter = np.array([0.1, 0.0])
    docs = [np.vstack([a, a + jitter[::-1] * 0.2, b, b + jitter * 0.2])]
    gold = [Partition(((0, 1), (2, 3)), 4)]
    thresh = tune_chain_threshold(docs, gold)
    from coground.metrics import evaluate_corpus

    part = predict_chains(docs[0], thresh)
    assert evaluate_corpus(gold, [part]).conll_f1 == pytest.approx(1.0)
