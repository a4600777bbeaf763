"""Mention-region alignment labels: IoU, gold alignment, pseudo-labels.

Boxes are (x, y, w, h) in normalized image coordinates. All tie-breaks pick
the lowest region index so runs are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .errors import ContractError, DataError

SOFT = "soft"
BINARY_GT = "binary_gt"
BINARY_PSEUDO = "binary_pseudo"


@dataclass
class GroundingMatrix:
    """Per-(mention, region) alignment scores.

    ``values`` is always a plain array for inspection; soft matrices coming
    out of the model also carry the autodiff ``tensor`` so losses can
    backpropagate through the same numbers.
    """

    values: np.ndarray
    kind: str
    tensor: Tensor | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ContractError(f"grounding matrix must be 2-D, got shape {self.values.shape}")
        if self.kind not in (SOFT, BINARY_GT, BINARY_PSEUDO):
            raise ContractError(f"unknown grounding matrix kind {self.kind!r}")
        if self.kind == SOFT and self.values.shape[0] > 0 and self.values.shape[1] > 0:
            sums = self.values.sum(axis=1)
            if not np.allclose(sums, 1.0, atol=1e-6):
                raise ContractError("soft grounding rows must sum to 1")
        if self.kind in (BINARY_GT, BINARY_PSEUDO):
            if not np.all((self.values == 0.0) | (self.values == 1.0)):
                raise ContractError(f"{self.kind} grounding entries must be 0 or 1")
            if self.kind == BINARY_GT and np.any(self.values.sum(axis=1) > 1):
                raise ContractError("gold alignment rows must be one-hot or all-zero")

    @property
    def n_mentions(self) -> int:
        return self.values.shape[0]

    @property
    def n_regions(self) -> int:
        return self.values.shape[1]


@dataclass
class PseudoCorefSets:
    """Imputed positive/negative mention sets, one pair per mention.

    For every mention the two sets are disjoint and together cover all the
    other mentions.
    """

    positives: list[list[int]]
    negatives: list[list[int]]

    def __post_init__(self):
        if len(self.positives) != len(self.negatives):
            raise ContractError("pseudo sets: positives and negatives differ in length")
        n = len(self.positives)
        others = [set(range(n)) - {m} for m in range(n)]
        for m in range(n):
            pos, negs = set(self.positives[m]), set(self.negatives[m])
            if m in pos or m in negs:
                raise ContractError(f"pseudo sets: mention {m} refers to itself")
            if pos & negs or (pos | negs) != others[m]:
                raise ContractError(f"pseudo sets: mention {m} does not split the others")


def iou(a, b) -> float:
    """Intersection over union of two (x, y, w, h) boxes."""
    ax, ay, aw, ah = (float(v) for v in a)
    bx, by, bw, bh = (float(v) for v in b)
    if aw <= 0 or ah <= 0 or bw <= 0 or bh <= 0:
        raise DataError(f"iou: degenerate box (w/h must be positive): {tuple(a)} vs {tuple(b)}")
    ix = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    iy = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = ix * iy
    union = aw * ah + bw * bh - inter
    # rounding in the interval arithmetic can push the ratio a few ulp past 1
    return min(1.0, max(0.0, inter / union))


def gt_alignment(mention_boxes, region_boxes) -> GroundingMatrix:
    """One-hot gold alignment: each mention points at its max-IoU region.

    A mention without a gold box, or whose box overlaps no region at all,
    gets an all-zero row and is excluded from alignment supervision.
    """
    region_boxes = np.asarray(region_boxes, dtype=np.float64)
    if region_boxes.ndim != 2 or region_boxes.shape[1] != 4 or region_boxes.shape[0] == 0:
        raise ContractError(f"gt_alignment: need a nonempty |I|x4 box array, got {region_boxes.shape}")
    values = np.zeros((len(mention_boxes), region_boxes.shape[0]))
    for m, box in enumerate(mention_boxes):
        if box is None:
            continue
        overlaps = [iou(box, r) for r in region_boxes]
        best = int(np.argmax(overlaps))  # argmax takes the lowest index on ties
        if overlaps[best] > 0.0:
            values[m, best] = 1.0
    return GroundingMatrix(values, BINARY_GT)


def argmax_region(g: GroundingMatrix, mention: int) -> int:
    """Index of the highest-scoring region for a mention; ties pick the lowest index."""
    return int(np.argmax(g.values[mention]))


def pseudo_coref(fused, thresh: float) -> PseudoCorefSets:
    """Split every mention's peers into pseudo-positives and pseudo-negatives.

    Peers whose cosine similarity with the mention exceeds ``thresh`` are
    positives, the rest negatives. Requires at least two mentions.
    """
    emb = np.asarray(fused.data if isinstance(fused, Tensor) else fused, dtype=np.float64)
    n = emb.shape[0]
    if n < 2:
        raise ContractError(f"pseudo_coref: need at least 2 mentions, got {n}")
    norms = np.maximum(np.linalg.norm(emb, axis=1, keepdims=True), 1e-12)
    unit = emb / norms
    cos = np.clip(unit @ unit.T, -1.0, 1.0)
    positives, negatives = [], []
    for m in range(n):
        pos = [j for j in range(n) if j != m and cos[m, j] > thresh]
        neg = [j for j in range(n) if j != m and cos[m, j] <= thresh]
        positives.append(pos)
        negatives.append(neg)
    return PseudoCorefSets(positives, negatives)


def pseudo_grounding(g: GroundingMatrix, thresh: float) -> GroundingMatrix:
    """Entrywise confidence thresholding of a soft grounding matrix."""
    if g.kind != SOFT:
        raise ContractError(f"pseudo_grounding: need a soft matrix, got kind {g.kind!r}")
    return GroundingMatrix((g.values > thresh).astype(np.float64), BINARY_PSEUDO)
