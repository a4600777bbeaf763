"""The seven training objectives and their weighted joint total.

Supervised terms (labeled samples): a contrastive coreference loss over
mention embeddings, a cross-entropy grounding alignment loss on the
cross-attention matrix, and smooth-L1 bounding-box regression. Pseudo-label
terms (unlabeled samples): a mean-embedding triplet loss over imputed
coreference sets and a confidence-thresholded grounding loss. Two
self-supervised terms run on every sample: image-text contrastive alignment
of the pre-fusion embeddings and masked language modeling.

Mention embeddings are L2-normalized before the cosine-based terms, so the
squared distances in the triplet loss live on the 2 - 2cos scale and the
margin keeps a fixed meaning. Logs inside cross-entropies are clamped at
1e-12 to keep gradient checks finite on degenerate inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .alignment import (
    BINARY_GT,
    GroundingMatrix,
    argmax_region,
    gt_alignment,
    pseudo_coref,
    pseudo_grounding,
)
from .autodiff import Tensor
from .data import Sample, mask_tokens
from .errors import ContractError, DataError

LOG_FLOOR = 1e-12
TERMS = ("cr", "gd", "bbr", "pcr", "pgd", "itc", "mlm")

DENOM_NEGATIVES = "negatives"  # denominator over negatives only, as defined
DENOM_ALL = "all"  # conventional variant: denominator over all other mentions


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.1
    alpha: float = 0.2
    ground_thresh: float = 0.9
    coref_pseudo_thresh: float = 0.5
    beta_smooth_l1: float = 1.0
    mlm_mask_prob: float = 0.15
    cr_denominator: str = DENOM_NEGATIVES
    loss_weights: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.tau <= 0:
            raise ContractError(f"loss config: tau must be positive, got {self.tau}")
        if self.alpha < 0:
            raise ContractError(f"loss config: alpha must be nonnegative, got {self.alpha}")
        # 0.0 is allowed so the no-thresholding ablation is runnable
        if not 0.0 <= self.ground_thresh < 1.0:
            raise ContractError(
                f"loss config: ground_thresh must be in [0, 1), got {self.ground_thresh}"
            )
        if self.beta_smooth_l1 <= 0:
            raise ContractError(f"loss config: beta must be positive, got {self.beta_smooth_l1}")
        if not 0.0 <= self.mlm_mask_prob <= 1.0:
            raise ContractError(
                f"loss config: mlm_mask_prob must be in [0, 1], got {self.mlm_mask_prob}"
            )
        if self.cr_denominator not in (DENOM_NEGATIVES, DENOM_ALL):
            raise ContractError(
                f"loss config: cr_denominator must be '{DENOM_NEGATIVES}' or '{DENOM_ALL}'"
            )
        unknown = set(self.loss_weights) - set(TERMS)
        if unknown:
            raise ContractError(f"loss config: unknown loss weights {sorted(unknown)}")

    def weight(self, term: str) -> float:
        return float(self.loss_weights.get(term, 1.0))


@dataclass
class LossReport:
    """Per-term batch means (unweighted) plus the weighted total."""

    cr: float = 0.0
    gd: float = 0.0
    bbr: float = 0.0
    pcr: float = 0.0
    pgd: float = 0.0
    itc: float = 0.0
    mlm: float = 0.0
    total: float = 0.0
    active_terms: tuple[str, ...] = ()

    def as_dict(self, step: int | None = None) -> dict:
        row = {name: getattr(self, name) for name in TERMS}
        row["total"] = self.total
        if step is not None:
            row = {"step": step, **row}
        return row


def _zero() -> Tensor:
    return Tensor(0.0)


def _sum_scalars(terms: list[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total


def _mean_scalars(terms: list[Tensor]) -> Tensor:
    return ad.scale(_sum_scalars(terms), 1.0 / len(terms))


def _logsumexp(logits: Tensor) -> Tensor:
    # the shift constant is read from the values, which is exact for gradients
    c = float(np.max(logits.data))
    return ad.shift(ad.log(ad.sum_all(ad.exp(ad.shift(logits, -c)))), c)


# ---------------------------------------------------------------------------
# supervised terms
# ---------------------------------------------------------------------------


def coref_contrastive_loss(
    fused: Tensor,
    positives: list[list[int]],
    negatives: list[list[int]],
    tau: float,
    denominator: str = DENOM_NEGATIVES,
) -> Tensor:
    """Supervised contrastive loss over L2-normalized mention embeddings.

    Per mention m with a nonempty positive set:
    -(1/|P|) sum_p log( exp(s(m,p)/tau) / sum_a exp(s(m,a)/tau) ), where the
    denominator pool is the negative set (default) or all other mentions.
    Mentions without positives contribute nothing.
    """
    n = fused.shape[0]
    contributing = [m for m in range(n) if positives[m]]
    if not contributing:
        return _zero()
    for m in contributing:
        if denominator == DENOM_NEGATIVES and not negatives[m]:
            raise ContractError(
                f"coreference loss: mention {m} has positives but no negatives, "
                "so the denominator is undefined"
            )
    unit = ad.l2_normalize(fused)
    sims = ad.scale(ad.matmul(unit, ad.transpose(unit)), 1.0 / tau)
    terms = []
    for m in contributing:
        pool = negatives[m] if denominator == DENOM_NEGATIVES else negatives[m] + positives[m]
        lse = _logsumexp(ad.select(sims, [m] * len(pool), pool))
        pos = ad.sum_all(ad.select(sims, [m] * len(positives[m]), positives[m]))
        term = ad.sub(pos, ad.scale(lse, float(len(positives[m]))))
        terms.append(ad.scale(term, -1.0 / len(positives[m])))
    return _sum_scalars(terms)


def grounding_alignment_loss(g: GroundingMatrix, h: GroundingMatrix) -> Tensor:
    """Cross-entropy between soft attention g and one-hot gold alignment h.

    All-zero rows of h (ungrounded mentions) contribute nothing.
    """
    if h.kind != BINARY_GT:
        raise ContractError(f"grounding loss: labels must be {BINARY_GT}, got {h.kind!r}")
    if g.values.shape != h.values.shape:
        raise ContractError(
            f"grounding loss: shapes differ, g {g.values.shape} vs h {h.values.shape}"
        )
    if g.tensor is None:
        raise ContractError("grounding loss: g carries no autodiff tensor")
    rows, cols = np.nonzero(h.values)
    if rows.size == 0:
        return _zero()
    picked = ad.select(g.tensor, rows, cols)
    return ad.neg(ad.sum_all(ad.log(picked, floor=LOG_FLOOR)))


def smooth_l1_value(residual: float, beta: float = 1.0) -> float:
    """The piecewise smooth-L1 penalty of one scalar residual."""
    r = abs(float(residual))
    if r < beta:
        return 0.5 * r * r / beta
    return r - 0.5 * beta


def box_to_deltas(anchor, gt) -> np.ndarray:
    """Target (dx, dy, dw, dh) mapping an anchor box onto a gold box."""
    ax, ay, aw, ah = (float(v) for v in anchor)
    gx, gy, gw, gh = (float(v) for v in gt)
    if aw <= 0 or ah <= 0:
        raise DataError(f"box deltas: degenerate anchor {tuple(anchor)}")
    if gw <= 0 or gh <= 0:
        raise DataError(f"box deltas: degenerate gold box {tuple(gt)}")
    return np.array([(gx - ax) / aw, (gy - ay) / ah, np.log(gw / aw), np.log(gh / ah)])


def apply_deltas(anchor, deltas) -> np.ndarray:
    """Inverse of :func:`box_to_deltas`: refine an anchor by predicted deltas."""
    ax, ay, aw, ah = (float(v) for v in anchor)
    dx, dy, dw, dh = (float(v) for v in deltas)
    return np.array([ax + dx * aw, ay + dy * ah, aw * np.exp(dw), ah * np.exp(dh)])


def box_regression_loss(pred_deltas: Tensor, anchors, gt_boxes, beta: float = 1.0) -> Tensor:
    """Smooth-L1 between predicted and target deltas.

    Summed over the four coordinates, averaged over the grounded mentions.
    """
    anchors = np.asarray(anchors, dtype=np.float64)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64)
    n = pred_deltas.shape[0]
    if n == 0:
        return _zero()
    if anchors.shape != (n, 4) or gt_boxes.shape != (n, 4):
        raise ContractError(
            f"box regression: {n} predictions vs anchors {anchors.shape}, gold {gt_boxes.shape}"
        )
    targets = np.stack([box_to_deltas(a, g) for a, g in zip(anchors, gt_boxes)])
    residual = ad.sub(pred_deltas, Tensor(targets))
    return ad.scale(ad.sum_all(ad.smooth_l1(residual, beta=beta)), 1.0 / n)


# ---------------------------------------------------------------------------
# pseudo-label terms
# ---------------------------------------------------------------------------


def pseudo_coref_loss(
    fused: Tensor,
    pseudo_positives: list[list[int]],
    pseudo_negatives: list[list[int]],
    alpha: float,
) -> Tensor:
    """Triplet loss against the means of the pseudo-positive/negative sets.

    Using set means rather than sampled members damps the effect of
    individual wrong pseudo-labels. Mentions with an empty set on either
    side are skipped.
    """
    n = fused.shape[0]
    kept = [m for m in range(n) if pseudo_positives[m] and pseudo_negatives[m]]
    if not kept:
        return _zero()
    unit = ad.l2_normalize(fused)
    anchor = ad.gather_rows(unit, kept)
    pos_mean = ad.pool_rows(unit, [pseudo_positives[m] for m in kept])
    neg_mean = ad.pool_rows(unit, [pseudo_negatives[m] for m in kept])
    d_pos = ad.sum_axis(ad.mul(ad.sub(anchor, pos_mean), ad.sub(anchor, pos_mean)), axis=1)
    d_neg = ad.sum_axis(ad.mul(ad.sub(anchor, neg_mean), ad.sub(anchor, neg_mean)), axis=1)
    hinge = ad.relu(ad.shift(ad.sub(d_pos, d_neg), alpha))
    return ad.sum_all(hinge)


def pseudo_grounding_loss(g: GroundingMatrix, thresh: float) -> Tensor:
    """Cross-entropy against confidence-thresholded self-labels.

    The labels are read from g's values (no gradient flows through the
    thresholding); rows with no entry above the threshold contribute 0.
    """
    if g.tensor is None:
        raise ContractError("pseudo grounding loss: g carries no autodiff tensor")
    labels = pseudo_grounding(g, thresh)
    rows, cols = np.nonzero(labels.values)
    if rows.size == 0:
        return _zero()
    picked = ad.select(g.tensor, rows, cols)
    return ad.neg(ad.sum_all(ad.log(picked, floor=LOG_FLOOR)))


# ---------------------------------------------------------------------------
# self-supervised terms
# ---------------------------------------------------------------------------


def image_text_contrastive_loss(region_emb: Tensor, mention_emb: Tensor, selected) -> Tensor:
    """Align each pre-fusion mention embedding with its selected region.

    Softmax over all regions of the raw dot-product matching scores, with the
    selected region as the positive; selection happens upstream and carries
    no gradient.
    """
    n = mention_emb.shape[0]
    if n == 0:
        return _zero()
    if len(selected) != n:
        raise ContractError(f"itc: {len(selected)} selections for {n} mentions")
    scores = ad.matmul(mention_emb, ad.transpose(region_emb))
    picked = ad.select(ad.log_softmax(scores, axis=-1), range(n), list(selected))
    return ad.neg(ad.sum_all(picked))


def masked_lm_loss(token_logits: Tensor, masked_positions, original_ids) -> Tensor:
    """Mean softmax cross-entropy over the masked positions only."""
    if len(masked_positions) == 0:
        return _zero()
    targets = [original_ids[p] for p in masked_positions]
    picked = ad.select(ad.log_softmax(token_logits, axis=-1), list(masked_positions), targets)
    return ad.neg(ad.mean_all(picked))


def select_itc_regions(g_values: np.ndarray, sample: Sample, class_map=None) -> list[int]:
    """Positive region per mention for the image-text term.

    Defaults to the argmax of the current grounding row. When a token-class
    map is supplied (synthetic data, first epoch, before the attention is
    informative) the first region whose class matches the mention's head
    token wins instead.
    """
    selected = []
    for m, span in enumerate(sample.narration.mentions):
        idx = -1
        if class_map:
            cls = class_map.get(sample.narration.token_ids[span.end - 1])
            if cls is not None:
                for r, cid in enumerate(sample.regions.class_ids):
                    if cid == cls:
                        idx = r
                        break
        if idx < 0:
            idx = int(np.argmax(g_values[m]))
        selected.append(idx)
    return selected


# ---------------------------------------------------------------------------
# the joint objective
# ---------------------------------------------------------------------------


def total_loss(
    batch: list[Sample],
    labeled_tags: list[bool],
    model,
    cfg: LossConfig,
    rng: np.random.Generator,
    itc_class_map: dict[int, int] | None = None,
) -> tuple[LossReport, Tensor]:
    """The joint objective over one mixed batch.

    Supervised terms are averaged over the labeled samples in the batch,
    pseudo-label terms over the unlabeled ones, and the self-supervised
    terms over every sample; each term then enters the total through its
    configured weight. Terms with weight zero are skipped entirely.
    """
    if not batch:
        raise ContractError("total loss: empty batch")
    if len(labeled_tags) != len(batch):
        raise ContractError(
            f"total loss: {len(batch)} samples but {len(labeled_tags)} labeled tags"
        )
    per_term: dict[str, list[Tensor]] = {t: [] for t in TERMS}
    want = {t: cfg.weight(t) != 0.0 for t in TERMS}

    for sample, labeled in zip(batch, labeled_tags):
        if labeled and sample.labels is None:
            raise ContractError(f"total loss: sample {sample.id} tagged labeled but has no labels")
        need_forward = any(
            want[t]
            for t in ("cr", "gd", "bbr", "pcr", "pgd", "itc")
        )
        enc = model.forward(sample) if need_forward else None

        if labeled and enc is not None:
            n = sample.n_mentions
            if want["cr"]:
                pos, neg = sample.coref_labels()
                per_term["cr"].append(
                    coref_contrastive_loss(
                        enc.fused_mention_emb, pos, neg, cfg.tau, cfg.cr_denominator
                    )
                )
            if want["gd"] or want["bbr"]:
                h = gt_alignment(sample.labels.mention_boxes, sample.regions.boxes)
                if want["gd"]:
                    per_term["gd"].append(grounding_alignment_loss(enc.last_grounding, h))
                if want["bbr"]:
                    grounded = [m for m in range(n) if h.values[m].sum() > 0]
                    if grounded:
                        deltas = ad.gather_rows(model.box_deltas(enc.fused_mention_emb), grounded)
                        anchors = np.stack(
                            [
                                sample.regions.boxes[argmax_region(enc.last_grounding, m)]
                                for m in grounded
                            ]
                        )
                        gts = np.stack([sample.labels.mention_boxes[m] for m in grounded])
                        per_term["bbr"].append(
                            box_regression_loss(deltas, anchors, gts, cfg.beta_smooth_l1)
                        )
                    else:
                        per_term["bbr"].append(_zero())
        elif not labeled and enc is not None:
            if want["pcr"]:
                if sample.n_mentions >= 2:
                    sets = pseudo_coref(enc.fused_mention_emb.data, cfg.coref_pseudo_thresh)
                    per_term["pcr"].append(
                        pseudo_coref_loss(
                            enc.fused_mention_emb, sets.positives, sets.negatives, cfg.alpha
                        )
                    )
                else:
                    per_term["pcr"].append(_zero())
            if want["pgd"]:
                per_term["pgd"].append(pseudo_grounding_loss(enc.last_grounding, cfg.ground_thresh))

        if want["itc"] and enc is not None:
            selected = select_itc_regions(enc.last_grounding.values, sample, itc_class_map)
            per_term["itc"].append(
                image_text_contrastive_loss(enc.region_emb, enc.mention_emb, selected)
            )
        if want["mlm"]:
            masked, positions = mask_tokens(sample.narration.token_ids, cfg.mlm_mask_prob, rng)
            if positions:
                logits = model.mlm_logits(masked)
                per_term["mlm"].append(
                    masked_lm_loss(logits, positions, sample.narration.token_ids)
                )
            else:
                per_term["mlm"].append(_zero())

    report = LossReport()
    total = _zero()
    active = []
    for term in TERMS:
        if not per_term[term]:
            continue
        mean = _mean_scalars(per_term[term])
        setattr(report, term, mean.item())
        total = ad.add(total, ad.scale(mean, cfg.weight(term)))
        active.append(term)
    report.total = total.item()
    report.active_terms = tuple(active)
    return report, total
