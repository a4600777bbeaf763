"""Scikit-learn style front door: fit on image-narration samples, predict
coreference chains and grounded regions.

X is a list of :class:`coground.data.Sample`; samples that carry labels form
the supervised pool, the rest are used through the pseudo-label objectives.
The estimator follows sklearn conventions (constructor stores parameters
verbatim, fitted state lives in trailing-underscore attributes, get_params /
set_params / clone work), so it slots into pipelines and model selection
tooling that can handle list-shaped X.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .data import Sample
from .errors import ContractError, EvalError
from .inference import predict_chains, predict_grounding, tune_chain_threshold
from .losses import LossConfig
from .metrics import EvalReport, evaluate_corpus
from .model import CorefGroundingModel, ModelConfig
from .training import TrainConfig, fit
from .validation import check_samples

AUTO = "auto"


class CorefGroundingEstimator(BaseEstimator):
    """Joint coreference + grounding model with a fit/predict surface.

    Parameters mirror the model, loss, and schedule knobs; anything left at
    its default matches the documented training recipe. ``chain_threshold``
    may be a float or "auto", which grid-searches the inference threshold on
    a held-out slice of the labeled data after training.
    """

    def __init__(
        self,
        d_embed: int = 32,
        n_heads: int = 2,
        n_text_layers: int = 2,
        n_fusion_layers: int = 2,
        n_visual_layers: int = 1,
        ffn_hidden: int = 0,
        max_regions: int = 32,
        max_tokens: int = 128,
        pe_scale: float = 0.05,
        tau: float = 0.1,
        alpha: float = 0.2,
        ground_thresh: float = 0.9,
        coref_pseudo_thresh: float = 0.5,
        beta_smooth_l1: float = 1.0,
        mlm_mask_prob: float = 0.15,
        cr_denominator: str = "negatives",
        loss_weights: dict | None = None,
        lr: float = 1e-3,
        warmup_epochs: int = 2,
        step_size_epochs: int = 10,
        gamma: float = 0.95,
        weight_decay: float = 0.01,
        batch_size: int = 8,
        epochs: int = 30,
        labeled_per_batch: int = 0,
        chain_threshold: float | str = AUTO,
        val_fraction: float = 0.2,
        itc_class_map: dict | None = None,
        seed: int = 0,
    ):
        self.d_embed = d_embed
        self.n_heads = n_heads
        self.n_text_layers = n_text_layers
        self.n_fusion_layers = n_fusion_layers
        self.n_visual_layers = n_visual_layers
        self.ffn_hidden = ffn_hidden
        self.max_regions = max_regions
        self.max_tokens = max_tokens
        self.pe_scale = pe_scale
        self.tau = tau
        self.alpha = alpha
        self.ground_thresh = ground_thresh
        self.coref_pseudo_thresh = coref_pseudo_thresh
        self.beta_smooth_l1 = beta_smooth_l1
        self.mlm_mask_prob = mlm_mask_prob
        self.cr_denominator = cr_denominator
        self.loss_weights = loss_weights
        self.lr = lr
        self.warmup_epochs = warmup_epochs
        self.step_size_epochs = step_size_epochs
        self.gamma = gamma
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.labeled_per_batch = labeled_per_batch
        self.chain_threshold = chain_threshold
        self.val_fraction = val_fraction
        self.itc_class_map = itc_class_map
        self.seed = seed

    # -- configuration ------------------------------------------------------

    def _validate_x(self, X) -> list[Sample]:
        if not isinstance(X, (list, tuple)) or not X:
            raise ContractError("X must be a nonempty list of Sample objects")
        for s in X:
            if not isinstance(s, Sample):
                raise ContractError(f"X contains a non-Sample entry: {type(s).__name__}")
        check_samples(X)
        return list(X)

    def _model_config(self, samples: list[Sample]) -> ModelConfig:
        d_region = samples[0].regions.features.shape[1]
        vocab_size = max(max(s.narration.token_ids, default=0) for s in samples) + 1
        return ModelConfig(
            d_region=d_region,
            d_embed=self.d_embed,
            vocab_size=vocab_size,
            n_text_layers=self.n_text_layers,
            n_fusion_layers=self.n_fusion_layers,
            n_visual_layers=self.n_visual_layers,
            n_heads=self.n_heads,
            ffn_hidden=self.ffn_hidden,
            max_regions=max(self.max_regions, max(len(s.regions) for s in samples)),
            max_tokens=max(self.max_tokens, max(len(s.narration.token_ids) for s in samples)),
            pe_scale=self.pe_scale,
            seed=self.seed,
        )

    def _loss_config(self) -> LossConfig:
        return LossConfig(
            tau=self.tau,
            alpha=self.alpha,
            ground_thresh=self.ground_thresh,
            coref_pseudo_thresh=self.coref_pseudo_thresh,
            beta_smooth_l1=self.beta_smooth_l1,
            mlm_mask_prob=self.mlm_mask_prob,
            cr_denominator=self.cr_denominator,
            loss_weights=dict(self.loss_weights or {}),
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            lr=self.lr,
            warmup_epochs=self.warmup_epochs,
            step_size_epochs=self.step_size_epochs,
            gamma=self.gamma,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=self.seed,
            labeled_per_batch=self.labeled_per_batch,
        )

    # -- fitting -------------------------------------------------------------

    def fit(self, X, y=None):
        """Train on a mixed list of labeled and unlabeled samples."""
        samples = self._validate_x(X)
        labeled = [s for s in samples if s.labels is not None]
        unlabeled = [s for s in samples if s.labels is None]
        if not labeled:
            raise ContractError("fit needs at least one labeled sample")
        self.model_ = CorefGroundingModel(self._model_config(samples))
        train_pool = labeled
        holdout: list[Sample] = []
        if self.chain_threshold == AUTO and len(labeled) >= 3:
            # carve a small validation slice for threshold tuning
            rng = np.random.default_rng(self.seed)
            order = rng.permutation(len(labeled))
            n_val = max(1, int(round(self.val_fraction * len(labeled))))
            holdout = [labeled[i] for i in order[:n_val]]
            train_pool = [labeled[i] for i in order[n_val:]]
            if not train_pool:
                train_pool, holdout = labeled, []
        _, self.history_ = fit(
            self.model_,
            train_pool,
            unlabeled,
            self._loss_config(),
            self._train_config(),
            itc_class_map=self.itc_class_map,
        )
        if self.chain_threshold == AUTO:
            tune_on = holdout or labeled
            embeddings = [self.model_.forward(s).fused_mention_emb.data for s in tune_on]
            gold = [s.gold_partition() for s in tune_on]
            self.chain_threshold_ = tune_chain_threshold(embeddings, gold)
        else:
            self.chain_threshold_ = float(self.chain_threshold)
        return self

    def _require_fitted(self) -> CorefGroundingModel:
        model = getattr(self, "model_", None)
        if model is None:
            raise NotFittedError("this estimator has not been fitted yet")
        return model

    # -- inference -------------------------------------------------------------

    def transform(self, X) -> list[np.ndarray]:
        """Fused mention embeddings per sample (one |N| x D array each)."""
        model = self._require_fitted()
        return [model.forward(s).fused_mention_emb.data for s in self._validate_x(X)]

    def predict(self, X) -> list[dict]:
        """Chains and grounded region per mention for each sample."""
        model = self._require_fitted()
        out = []
        for sample in self._validate_x(X):
            enc = model.forward(sample)
            chains = predict_chains(enc.fused_mention_emb.data, self.chain_threshold_)
            grounding = predict_grounding(enc.last_grounding, sample.regions.boxes)
            out.append(
                {
                    "id": sample.id,
                    "chains": [list(c) for c in chains.clusters],
                    "grounding": grounding.region_indices,
                }
            )
        return out

    def evaluate(self, X) -> EvalReport:
        """Corpus-level coreference and grounding scores on labeled samples."""
        model = self._require_fitted()
        samples = self._validate_x(X)
        for s in samples:
            if s.labels is None:
                raise EvalError(f"sample {s.id} has no labels to evaluate against")
        gold_parts, pred_parts = [], []
        pred_boxes, gold_boxes, kinds = [], [], []
        for sample in samples:
            enc = model.forward(sample)
            gold_parts.append(sample.gold_partition())
            pred_parts.append(predict_chains(enc.fused_mention_emb.data, self.chain_threshold_))
            grounding = predict_grounding(enc.last_grounding, sample.regions.boxes)
            pred_boxes.append(grounding.boxes)
            gold_boxes.append(sample.labels.mention_boxes)
            kinds.append([m.kind for m in sample.narration.mentions])
        return evaluate_corpus(gold_parts, pred_parts, pred_boxes, gold_boxes, kinds)

    def score(self, X, y=None) -> float:
        """CoNLL F1 on labeled samples (the sklearn scoring hook)."""
        return self.evaluate(X).conll_f1
