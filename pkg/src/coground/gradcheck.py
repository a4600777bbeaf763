"""Finite-difference audit of every training objective's gradients.

Pseudo-labels, argmax anchors, and masking decisions are stop-gradient
choices: the true objective is piecewise smooth with those choices held
constant. The audit therefore freezes every discrete decision at the current
parameters and compares tape gradients of the remaining smooth function
against central differences, per parameter tensor.

Thresholds used to build the frozen pseudo-label structures are picked
adaptively (median similarity / median attention) so the pseudo terms are
actually exercised at random initialization instead of gating to zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import losses as L
from .alignment import argmax_region, gt_alignment, pseudo_coref, pseudo_grounding
from .autodiff import Tensor
from .data import (
    MentionSpan,
    NarrationTokens,
    RegionSet,
    Sample,
    SampleLabels,
    mask_tokens,
)
from .losses import TERMS, LossConfig
from .model import CorefGroundingModel, ModelConfig

AUDIT_TERMS = TERMS + ("total",)


def audit_model_config(seed: int, d_embed: int = 8) -> ModelConfig:
    return ModelConfig(
        d_region=6,
        d_embed=d_embed,
        vocab_size=12,
        n_text_layers=1,
        n_fusion_layers=1,
        n_visual_layers=1,
        n_heads=2,
        ffn_hidden=d_embed,
        max_regions=8,
        max_tokens=16,
        seed=seed,
    )


def toy_sample(seed: int, n_mentions: int, n_regions: int, labeled: bool, chain: bool) -> Sample:
    """A hand-sized image-narration pair with evenly spaced regions."""
    rng = np.random.default_rng(seed)
    boxes = np.zeros((n_regions, 4))
    for i in range(n_regions):
        w = h = 0.8 / n_regions
        boxes[i] = (i / n_regions + 0.1 / n_regions, 0.3, w, h)
    regions = RegionSet(rng.normal(size=(n_regions, 6)), boxes, list(range(n_regions)))
    n_tokens = 2 * n_mentions + 2
    token_ids = [int(t) for t in rng.integers(3, 12, size=n_tokens)]
    mentions = [MentionSpan(2 * i, 2 * i + 2, "np" if i % 2 == 0 else "pron") for i in range(n_mentions)]
    labels = None
    if labeled:
        chains = [[0, 1]] if chain and n_mentions >= 3 else []
        labels = SampleLabels(
            chains=chains,
            mention_boxes=[boxes[i % n_regions].copy() for i in range(n_mentions)],
        )
    return Sample(
        id=f"audit-{seed}-{n_mentions}m{n_regions}r",
        regions=regions,
        narration=NarrationTokens(token_ids, mentions),
        labels=labels,
    )


def audit_batch(seed: int, n_mentions: int = 2, n_regions: int = 3) -> tuple[list[Sample], list[bool]]:
    labeled = toy_sample(seed * 2 + 1, n_mentions, n_regions, labeled=True, chain=True)
    unlabeled = toy_sample(seed * 2 + 2, n_mentions, n_regions, labeled=False, chain=False)
    return [labeled, unlabeled], [True, False]


@dataclass
class _Plan:
    """Every discrete choice for one sample, frozen at the audit point."""

    sample: Sample
    labeled: bool
    coref: tuple[list[list[int]], list[list[int]]] | None = None
    gd_mask: tuple[np.ndarray, np.ndarray] | None = None
    bbr: tuple[list[int], np.ndarray, np.ndarray] | None = None
    pcr_sets: tuple[list[list[int]], list[list[int]]] | None = None
    pgd_mask: tuple[np.ndarray, np.ndarray] | None = None
    itc_selected: list[int] | None = None
    masked_tokens: list[int] | None = None
    masked_positions: list[int] | None = None


def _freeze_plans(model, batch, tags, cfg: LossConfig, mask_seed: int) -> list[_Plan]:
    plans = []
    mask_rng = np.random.default_rng(mask_seed)
    for sample, labeled in zip(batch, tags):
        enc = model.forward(sample)
        g = enc.last_grounding
        plan = _Plan(sample=sample, labeled=labeled)
        if labeled and sample.labels is not None:
            pos, neg = sample.coref_labels()
            if any(pos[m] and neg[m] for m in range(sample.n_mentions)):
                plan.coref = (pos, neg)
            h = gt_alignment(sample.labels.mention_boxes, sample.regions.boxes)
            rows, cols = np.nonzero(h.values)
            if rows.size:
                plan.gd_mask = (rows, cols)
            grounded = [m for m in range(sample.n_mentions) if h.values[m].sum() > 0]
            if grounded:
                anchors = np.stack(
                    [sample.regions.boxes[argmax_region(g, m)] for m in grounded]
                )
                gts = np.stack([sample.labels.mention_boxes[m] for m in grounded])
                plan.bbr = (grounded, anchors, gts)
        elif not labeled:
            if sample.n_mentions >= 2:
                emb = enc.fused_mention_emb.data
                unit = emb / np.maximum(np.linalg.norm(emb, axis=1, keepdims=True), 1e-12)
                cos = unit @ unit.T
                off = cos[~np.eye(len(cos), dtype=bool)]
                sets = pseudo_coref(emb, float(np.median(off)))
                if any(p and a for p, a in zip(sets.positives, sets.negatives)):
                    plan.pcr_sets = (sets.positives, sets.negatives)
            if g.values.size:
                mask = pseudo_grounding(g, float(np.median(g.values)))
                rows, cols = np.nonzero(mask.values)
                if rows.size:
                    plan.pgd_mask = (rows, cols)
        plan.itc_selected = L.select_itc_regions(g.values, sample)
        masked, positions = mask_tokens(sample.narration.token_ids, cfg.mlm_mask_prob, mask_rng)
        if positions:
            plan.masked_tokens = masked
            plan.masked_positions = positions
        plans.append(plan)
    return plans


def _nll_at(g_tensor: Tensor, mask: tuple[np.ndarray, np.ndarray]) -> Tensor:
    rows, cols = mask
    picked = ad.select(g_tensor, rows, cols)
    return ad.neg(ad.sum_all(ad.log(picked, floor=L.LOG_FLOOR)))


def frozen_term_builders(model, plans: list[_Plan], cfg: LossConfig) -> dict:
    """One zero-argument loss builder per active term (plus the total).

    Each builder re-runs the forward pass but reuses the frozen discrete
    structures, so repeated calls are smooth in the parameters.
    """

    def term_values(plan: _Plan) -> dict[str, Tensor]:
        sample = plan.sample
        enc = model.forward(sample)
        values: dict[str, Tensor] = {}
        if plan.coref is not None:
            values["cr"] = L.coref_contrastive_loss(
                enc.fused_mention_emb, plan.coref[0], plan.coref[1], cfg.tau, cfg.cr_denominator
            )
        if plan.gd_mask is not None:
            values["gd"] = _nll_at(enc.last_grounding.tensor, plan.gd_mask)
        if plan.bbr is not None:
            grounded, anchors, gts = plan.bbr
            deltas = ad.gather_rows(model.box_deltas(enc.fused_mention_emb), grounded)
            values["bbr"] = L.box_regression_loss(deltas, anchors, gts, cfg.beta_smooth_l1)
        if plan.pcr_sets is not None:
            values["pcr"] = L.pseudo_coref_loss(
                enc.fused_mention_emb, plan.pcr_sets[0], plan.pcr_sets[1], cfg.alpha
            )
        if plan.pgd_mask is not None:
            values["pgd"] = _nll_at(enc.last_grounding.tensor, plan.pgd_mask)
        if plan.itc_selected is not None and sample.n_mentions > 0:
            values["itc"] = L.image_text_contrastive_loss(
                enc.region_emb, enc.mention_emb, plan.itc_selected
            )
        return values

    def mlm_value(plan: _Plan) -> Tensor:
        logits = model.mlm_logits(plan.masked_tokens)
        return L.masked_lm_loss(logits, plan.masked_positions, plan.sample.narration.token_ids)

    contributors: dict[str, list[_Plan]] = {t: [] for t in TERMS}
    for plan in plans:
        if plan.coref is not None:
            contributors["cr"].append(plan)
        if plan.gd_mask is not None:
            contributors["gd"].append(plan)
        if plan.bbr is not None:
            contributors["bbr"].append(plan)
        if plan.pcr_sets is not None:
            contributors["pcr"].append(plan)
        if plan.pgd_mask is not None:
            contributors["pgd"].append(plan)
        if plan.itc_selected is not None and plan.sample.n_mentions > 0:
            contributors["itc"].append(plan)
        if plan.masked_positions:
            contributors["mlm"].append(plan)

    builders: dict = {}

    def make_builder(term: str, plans_for_term: list[_Plan]):
        if term == "mlm":
            def build():
                vals = [mlm_value(p) for p in plans_for_term]
                return ad.scale(L._sum_scalars(vals), 1.0 / len(vals))
        else:
            def build():
                vals = [term_values(p)[term] for p in plans_for_term]
                return ad.scale(L._sum_scalars(vals), 1.0 / len(vals))
        return build

    for term in TERMS:
        if contributors[term]:
            builders[term] = make_builder(term, contributors[term])

    def build_total():
        parts = []
        for term in TERMS:
            if term in builders and cfg.weight(term) != 0.0:
                parts.append(ad.scale(builders[term](), cfg.weight(term)))
        return L._sum_scalars(parts) if parts else Tensor(0.0)

    builders["total"] = build_total
    return builders


@dataclass
class AuditResult:
    term: str
    max_rel_error: float | None  # None: not exercised by this instance

    @property
    def skipped(self) -> bool:
        return self.max_rel_error is None


def _term_vector_fn(model, plans: list[_Plan], cfg: LossConfig, builders: dict):
    """Evaluate every active term (and the total) from one forward per sample.

    Amortizing the forward across terms is what keeps the full-parameter
    finite-difference sweep affordable.
    """
    active = [t for t in TERMS if t in builders]

    def values() -> np.ndarray:
        sums = {t: 0.0 for t in active}
        counts = {t: 0 for t in active}
        for plan in plans:
            sample = plan.sample
            enc = model.forward(sample)
            if plan.coref is not None:
                sums["cr"] += L.coref_contrastive_loss(
                    enc.fused_mention_emb, plan.coref[0], plan.coref[1], cfg.tau, cfg.cr_denominator
                ).item()
                counts["cr"] += 1
            if plan.gd_mask is not None:
                sums["gd"] += _nll_at(enc.last_grounding.tensor, plan.gd_mask).item()
                counts["gd"] += 1
            if plan.bbr is not None:
                grounded, anchors, gts = plan.bbr
                deltas = ad.gather_rows(model.box_deltas(enc.fused_mention_emb), grounded)
                sums["bbr"] += L.box_regression_loss(deltas, anchors, gts, cfg.beta_smooth_l1).item()
                counts["bbr"] += 1
            if plan.pcr_sets is not None:
                sums["pcr"] += L.pseudo_coref_loss(
                    enc.fused_mention_emb, plan.pcr_sets[0], plan.pcr_sets[1], cfg.alpha
                ).item()
                counts["pcr"] += 1
            if plan.pgd_mask is not None:
                sums["pgd"] += _nll_at(enc.last_grounding.tensor, plan.pgd_mask).item()
                counts["pgd"] += 1
            if plan.itc_selected is not None and sample.n_mentions > 0:
                sums["itc"] += L.image_text_contrastive_loss(
                    enc.region_emb, enc.mention_emb, plan.itc_selected
                ).item()
                counts["itc"] += 1
            if plan.masked_positions:
                logits = model.mlm_logits(plan.masked_tokens)
                sums["mlm"] += L.masked_lm_loss(
                    logits, plan.masked_positions, sample.narration.token_ids
                ).item()
                counts["mlm"] += 1
        means = [sums[t] / counts[t] for t in active]
        total = sum(cfg.weight(t) * m for t, m in zip(active, means))
        return np.array(means + [total])

    return active + ["total"], values


RETRY_STEPS = (1e-4, 1e-3)


def audit_gradients(
    model,
    batch,
    tags,
    cfg: LossConfig | None = None,
    mask_seed: int = 0,
    step: float = 1e-5,
    tolerance: float = 1e-4,
) -> list[AuditResult]:
    """Gradient-vs-finite-difference error per loss term, over all parameters.

    No single step suits every coordinate: at 1e-5, f64 rounding noise in
    O(1) loss values dominates coordinates whose true gradient is below
    ~1e-8, while larger steps walk across ReLU kinks. So the sweep runs at
    the base step and any coordinate over tolerance is re-measured at larger
    steps, keeping its best agreement. A systematic gradient bug disagrees
    at every step; only step artifacts are forgiven by the retry.
    """
    cfg = cfg or LossConfig()
    plans = _freeze_plans(model, batch, tags, cfg, mask_seed)
    builders = frozen_term_builders(model, plans, cfg)
    params = model.parameters()

    # analytic pass, one tape per term
    analytic: dict[str, dict[str, np.ndarray]] = {}
    for term, builder in builders.items():
        for p in params.values():
            p.zero_grad()
        with ad.Tape() as tape:
            loss = builder()
        tape.backward(loss)
        analytic[term] = {
            name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
            for name, p in params.items()
        }
    for p in params.values():
        p.zero_grad()

    # numeric pass: every term from the same two evaluations per coordinate
    names, values = _term_vector_fn(model, plans, cfg, builders)

    def rel_err(a: float, n: float) -> float:
        return abs(a - n) / max(1e-8, abs(a) + abs(n))

    def probe(flat: np.ndarray, i: int, h: float) -> np.ndarray:
        orig = flat[i]
        flat[i] = orig + h
        plus = values()
        flat[i] = orig - h
        minus = values()
        flat[i] = orig
        return (plus - minus) / (2.0 * h)

    def probe_richardson(flat: np.ndarray, i: int, h: float) -> np.ndarray:
        # 4-point stencil cancels the h^2 truncation term, which rescues
        # coordinates whose gradient is small but whose curvature is not
        return (4.0 * probe(flat, i, h / 2.0) - probe(flat, i, h)) / 3.0

    retries = [lambda f, i, h=h: probe(f, i, h) for h in RETRY_STEPS]
    retries += [lambda f, i, h=h: probe_richardson(f, i, h) for h in (1e-3, 4e-3, 1.6e-2)]

    worst = {t: 0.0 for t in names}
    for pname, p in params.items():
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            numeric = probe(flat, i, step)
            errs = np.array(
                [rel_err(analytic[t][pname].flat[i], numeric[j]) for j, t in enumerate(names)]
            )
            if np.any(errs > tolerance):
                for retry in retries:
                    numeric = retry(flat, i)
                    errs = np.minimum(
                        errs,
                        [
                            rel_err(analytic[t][pname].flat[i], numeric[j])
                            for j, t in enumerate(names)
                        ],
                    )
                    if not np.any(errs > tolerance):
                        break
            for j, term in enumerate(names):
                if errs[j] > worst[term]:
                    worst[term] = errs[j]

    results = []
    for term in AUDIT_TERMS:
        results.append(AuditResult(term, worst[term] if term in worst else None))
    return results


def run_audit(seeds, d_embed: int = 8, n_mentions: int = 2, n_regions: int = 3) -> dict:
    """The full sweep: fresh model and data per seed, one row per term.

    Returns {"worst": {term: err}, "rows": [{seed, term, err}, ...]}.
    """
    worst: dict[str, float | None] = {t: None for t in AUDIT_TERMS}
    rows = []
    for seed in seeds:
        model = CorefGroundingModel(audit_model_config(seed, d_embed))
        batch, tags = audit_batch(seed, n_mentions, n_regions)
        for result in audit_gradients(model, batch, tags, mask_seed=seed):
            rows.append({"seed": seed, "term": result.term, "max_rel_error": result.max_rel_error})
            if result.max_rel_error is not None:
                prev = worst[result.term]
                worst[result.term] = (
                    result.max_rel_error if prev is None else max(prev, result.max_rel_error)
                )
    return {"worst": worst, "rows": rows}
