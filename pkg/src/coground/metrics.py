"""Coreference and grounding evaluation: MUC, B-cubed, CEAF, CoNLL F1.

Each metric is computed per document as (recall_num, recall_den,
precision_num, precision_den) so corpora micro-aggregate by summing the
components; singletons are part of the B-cubed and CEAF universes, while MUC
ignores them by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .alignment import iou
from .errors import ContractError, EvalError
from .partitions import Partition


@dataclass(frozen=True)
class ScoreTriple:
    recall: float
    precision: float
    f1: float

    @staticmethod
    def from_counts(r_num: float, r_den: float, p_num: float, p_den: float) -> "ScoreTriple":
        r = r_num / r_den if r_den > 0 else 0.0
        p = p_num / p_den if p_den > 0 else 0.0
        f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
        return ScoreTriple(recall=r, precision=p, f1=f1)

    def as_dict(self) -> dict:
        return {"recall": self.recall, "precision": self.precision, "f1": self.f1}


@dataclass(frozen=True)
class GroundingAccuracy:
    np_acc: float
    pron_acc: float
    overall_acc: float

    def as_dict(self) -> dict:
        return {
            "noun_phrases": self.np_acc,
            "pronouns": self.pron_acc,
            "overall": self.overall_acc,
        }


@dataclass(frozen=True)
class EvalReport:
    muc: ScoreTriple
    b3: ScoreTriple
    ceaf: ScoreTriple
    conll_f1: float
    grounding: GroundingAccuracy

    def as_dict(self) -> dict:
        return {
            "muc": self.muc.as_dict(),
            "b3": self.b3.as_dict(),
            "ceaf_phi4": self.ceaf.as_dict(),
            "conll_f1": self.conll_f1,
            "grounding": self.grounding.as_dict(),
        }


def _check_universe(gold: Partition, pred: Partition) -> None:
    if gold.n_mentions != pred.n_mentions:
        raise ContractError(
            f"partitions score different universes: {gold.n_mentions} vs {pred.n_mentions} mentions"
        )


# ---------------------------------------------------------------------------
# MUC (link-based)
# ---------------------------------------------------------------------------


def muc_counts(gold: Partition, pred: Partition) -> tuple[float, float, float, float]:
    _check_universe(gold, pred)

    def half(key: Partition, response: Partition) -> tuple[float, float]:
        # sum over key clusters K of (|K| - #response clusters intersecting K),
        # over (|K| - 1); size-1 clusters contribute nothing to either side
        owner = response.cluster_of()
        num = 0.0
        den = 0.0
        for cluster in key.clusters:
            if len(cluster) < 2:
                continue
            partitions_of_cluster = {owner[m] for m in cluster}
            num += len(cluster) - len(partitions_of_cluster)
            den += len(cluster) - 1
        return num, den

    r_num, r_den = half(gold, pred)
    p_num, p_den = half(pred, gold)
    return r_num, r_den, p_num, p_den


def muc(gold: Partition, pred: Partition) -> ScoreTriple:
    return ScoreTriple.from_counts(*muc_counts(gold, pred))


# ---------------------------------------------------------------------------
# B-cubed (mention-based)
# ---------------------------------------------------------------------------


def b_cubed_counts(gold: Partition, pred: Partition) -> tuple[float, float, float, float]:
    _check_universe(gold, pred)
    gold_of = gold.cluster_of()
    pred_of = pred.cluster_of()
    r_num = sum(len(gold_of[m] & pred_of[m]) / len(gold_of[m]) for m in gold_of)
    p_num = sum(len(gold_of[m] & pred_of[m]) / len(pred_of[m]) for m in pred_of)
    n = float(gold.n_mentions)
    return r_num, n, p_num, n


def b_cubed(gold: Partition, pred: Partition) -> ScoreTriple:
    return ScoreTriple.from_counts(*b_cubed_counts(gold, pred))


# ---------------------------------------------------------------------------
# CEAF with the entity-level similarity 2|K∩R| / (|K| + |R|)
# ---------------------------------------------------------------------------


def _phi4(a: tuple[int, ...], b: tuple[int, ...]) -> float:
    inter = len(set(a) & set(b))
    return 2.0 * inter / (len(a) + len(b))


def ceaf_phi4_counts(gold: Partition, pred: Partition) -> tuple[float, float, float, float]:
    _check_universe(gold, pred)
    if not gold.clusters or not pred.clusters:
        return 0.0, float(len(gold.clusters)), 0.0, float(len(pred.clusters))
    # square similarity matrix, zero-padded, maximized by optimal assignment
    n = max(len(gold.clusters), len(pred.clusters))
    sim = np.zeros((n, n))
    for i, k in enumerate(gold.clusters):
        for j, r in enumerate(pred.clusters):
            sim[i, j] = _phi4(k, r)
    rows, cols = linear_sum_assignment(-sim)
    best = float(sim[rows, cols].sum())
    return best, float(len(gold.clusters)), best, float(len(pred.clusters))


def ceaf_phi4(gold: Partition, pred: Partition) -> ScoreTriple:
    return ScoreTriple.from_counts(*ceaf_phi4_counts(gold, pred))


def conll_f1(muc_score: ScoreTriple, b3_score: ScoreTriple, ceaf_score: ScoreTriple) -> float:
    """Arithmetic mean of the three coreference F1 scores."""
    return (muc_score.f1 + b3_score.f1 + ceaf_score.f1) / 3.0


# ---------------------------------------------------------------------------
# grounding accuracy
# ---------------------------------------------------------------------------


def grounding_counts(pred_boxes, gold_boxes, kinds) -> dict[str, list[int]]:
    """Correct/total counts per mention kind at the IoU > 0.5 criterion.

    Mentions without a gold box are excluded from every denominator.
    """
    if not (len(pred_boxes) == len(gold_boxes) == len(kinds)):
        raise ContractError(
            f"grounding: got {len(pred_boxes)} predictions, {len(gold_boxes)} gold boxes, "
            f"{len(kinds)} kinds"
        )
    counts = {"np": [0, 0], "pron": [0, 0]}
    for pred, gold, kind in zip(pred_boxes, gold_boxes, kinds):
        if gold is None:
            continue
        if kind not in counts:
            raise ContractError(f"grounding: unknown mention kind {kind!r}")
        counts[kind][1] += 1
        if pred is not None and iou(pred, gold) > 0.5:
            counts[kind][0] += 1
    return counts


def _acc(pair: list[int]) -> float:
    return pair[0] / pair[1] if pair[1] > 0 else 0.0


def grounding_accuracy(pred_boxes, gold_boxes, kinds) -> GroundingAccuracy:
    counts = grounding_counts(pred_boxes, gold_boxes, kinds)
    overall = [counts["np"][0] + counts["pron"][0], counts["np"][1] + counts["pron"][1]]
    return GroundingAccuracy(_acc(counts["np"]), _acc(counts["pron"]), _acc(overall))


# ---------------------------------------------------------------------------
# corpus-level aggregation
# ---------------------------------------------------------------------------


def evaluate_corpus(
    gold_partitions,
    pred_partitions,
    pred_boxes=None,
    gold_boxes=None,
    kinds=None,
) -> EvalReport:
    """Micro-aggregated scores over per-document partitions (and grounding).

    Components are summed across documents before recall/precision are
    formed. Grounding inputs are optional; without them the grounding block
    is all zeros.
    """
    if len(gold_partitions) != len(pred_partitions):
        raise EvalError(
            f"corpus: {len(gold_partitions)} gold documents vs {len(pred_partitions)} predicted"
        )
    if not gold_partitions:
        raise EvalError("corpus: nothing to evaluate")
    totals = {"muc": [0.0] * 4, "b3": [0.0] * 4, "ceaf": [0.0] * 4}
    for gold, pred in zip(gold_partitions, pred_partitions):
        for name, fn in (("muc", muc_counts), ("b3", b_cubed_counts), ("ceaf", ceaf_phi4_counts)):
            for i, c in enumerate(fn(gold, pred)):
                totals[name][i] += c
    muc_score = ScoreTriple.from_counts(*totals["muc"])
    b3_score = ScoreTriple.from_counts(*totals["b3"])
    ceaf_score = ScoreTriple.from_counts(*totals["ceaf"])

    if pred_boxes is not None:
        merged = {"np": [0, 0], "pron": [0, 0]}
        for pb, gb, kk in zip(pred_boxes, gold_boxes, kinds):
            doc = grounding_counts(pb, gb, kk)
            for kind in merged:
                merged[kind][0] += doc[kind][0]
                merged[kind][1] += doc[kind][1]
        overall = [
            merged["np"][0] + merged["pron"][0],
            merged["np"][1] + merged["pron"][1],
        ]
        grounding = GroundingAccuracy(_acc(merged["np"]), _acc(merged["pron"]), _acc(overall))
    else:
        grounding = GroundingAccuracy(0.0, 0.0, 0.0)

    return EvalReport(
        muc=muc_score,
        b3=b3_score,
        ceaf=ceaf_score,
        conll_f1=conll_f1(muc_score, b3_score, ceaf_score),
        grounding=grounding,
    )
