"""Inference: coreference chains from pairwise cosine similarity, grounding
from the last fusion layer's cross-attention.

Chains are the connected components of the thresholded similarity graph:
labeling pairs positive/negative leaves the chain structure implicit, and
components are the minimal transitively-consistent closure. A greedy
best-antecedent linker is available for comparison.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .alignment import GroundingMatrix
from .autodiff import Tensor
from .errors import ContractError
from .partitions import Partition

COMPONENTS = "components"
GREEDY = "greedy"


def cosine_similarities(embeddings) -> np.ndarray:
    emb = np.asarray(
        embeddings.data if isinstance(embeddings, Tensor) else embeddings, dtype=np.float64
    )
    unit = emb / np.maximum(np.linalg.norm(emb, axis=1, keepdims=True), 1e-12)
    # clip: rounding must not push identical vectors past cos = 1
    return np.clip(unit @ unit.T, -1.0, 1.0)


def _components(n: int, adjacency: np.ndarray) -> list[list[int]]:
    seen = [False] * n
    clusters = []
    for start in range(n):
        if seen[start]:
            continue
        queue = deque([start])
        seen[start] = True
        members = []
        while queue:
            node = queue.popleft()
            members.append(node)
            for other in range(n):
                if adjacency[node, other] and not seen[other]:
                    seen[other] = True
                    queue.append(other)
        clusters.append(sorted(members))
    return clusters


def _greedy_antecedents(n: int, cos: np.ndarray, thresh: float) -> list[list[int]]:
    # each mention links to its single best earlier mention above threshold
    parent = list(range(n))
    for m in range(1, n):
        best, best_sim = -1, thresh
        for a in range(m):
            if cos[m, a] > best_sim:
                best, best_sim = a, cos[m, a]
        if best >= 0:
            root = best
            while parent[root] != root:
                root = parent[root]
            parent[m] = root
    groups: dict[int, list[int]] = {}
    for m in range(n):
        root = m
        while parent[root] != root:
            root = parent[root]
        groups.setdefault(root, []).append(m)
    return [sorted(g) for g in groups.values()]


def predict_chains(fused, thresh: float, method: str = COMPONENTS) -> Partition:
    """Cluster mentions whose pairwise cosine similarity exceeds ``thresh``.

    Unconnected mentions come back as singletons; thresh >= 1 therefore
    yields all singletons (similarity is clipped to [-1, 1] and the
    comparison is strict).
    """
    emb = np.asarray(fused.data if isinstance(fused, Tensor) else fused, dtype=np.float64)
    n = emb.shape[0]
    if n == 0:
        return Partition((), 0)
    if method not in (COMPONENTS, GREEDY):
        raise ContractError(f"predict_chains: unknown method {method!r}")
    cos = cosine_similarities(emb)
    if method == GREEDY:
        clusters = _greedy_antecedents(n, cos, thresh)
    else:
        adjacency = cos > thresh
        np.fill_diagonal(adjacency, False)
        clusters = _components(n, adjacency)
    clusters.sort(key=lambda c: c[0])
    return Partition(tuple(tuple(c) for c in clusters), n)


@dataclass
class GroundingPrediction:
    """Per-mention predicted region index and its box."""

    region_indices: list[int]
    boxes: list[np.ndarray]


def predict_grounding(g_last: GroundingMatrix, region_boxes) -> GroundingPrediction:
    """Argmax region per mention from the last-layer attention; lowest index wins ties."""
    region_boxes = np.asarray(region_boxes, dtype=np.float64)
    if g_last.n_regions != region_boxes.shape[0]:
        raise ContractError(
            f"predict_grounding: {g_last.n_regions} attention columns vs "
            f"{region_boxes.shape[0]} region boxes"
        )
    indices = [int(np.argmax(row)) for row in g_last.values]
    return GroundingPrediction(indices, [region_boxes[i].copy() for i in indices])


def tune_chain_threshold(
    embeddings_per_doc,
    gold_partitions,
    grid=None,
) -> float:
    """Grid-search the chain threshold by corpus CoNLL F1 on held-out docs."""
    from .metrics import evaluate_corpus  # metrics also imports nothing from here

    grid = list(grid) if grid is not None else [round(0.05 * k, 2) for k in range(1, 20)]
    best_thresh, best_score = grid[0], -1.0
    for thresh in grid:
        preds = [predict_chains(emb, thresh) for emb in embeddings_per_doc]
        score = evaluate_corpus(gold_partitions, preds).conll_f1
        if score > best_score:
            best_thresh, best_score = thresh, score
    return best_thresh
