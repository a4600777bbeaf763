"""Optimization: decoupled-weight-decay Adam, warmup + step-decay schedule,
and the epoch loop over mixed labeled/unlabeled batches.

Pseudo-labels are recomputed from the live model at every step (they are
functions of the current similarities and attention), never cached across
steps. Runs are bit-reproducible given (data, config, seed).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, Tensor
from .data import Sample
from .errors import ContractError, TrainingError
from .losses import LossConfig, total_loss
from .model import CorefGroundingModel


@dataclass(frozen=True)
class TrainConfig:
    """Warmup 2 epochs, step decay every 10 at gamma 0.95, batch 8, weight
    decay 0.01, 30 epochs. A 1e-5 learning rate only makes sense when
    starting from pretrained weights; training from scratch at this scale
    wants ~1e-3, which is the default."""

    lr: float = 1e-3
    warmup_epochs: int = 2
    step_size_epochs: int = 10
    gamma: float = 0.95
    weight_decay: float = 0.01
    batch_size: int = 8
    epochs: int = 30
    seed: int = 0
    labeled_per_batch: int = 0  # 0: mix in proportion to the split sizes

    def __post_init__(self):
        if self.lr <= 0:
            raise ContractError(f"train config: lr must be positive, got {self.lr}")
        if not 0.0 < self.gamma <= 1.0:
            raise ContractError(f"train config: gamma must be in (0, 1], got {self.gamma}")
        if self.batch_size < 1:
            raise ContractError(f"train config: batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0 or self.warmup_epochs < 0 or self.step_size_epochs < 1:
            raise ContractError("train config: bad schedule values")


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Linear ramp over the warmup epochs, then stepwise geometric decay."""
    if epoch < 0:
        raise ContractError(f"lr_at: epoch must be nonnegative, got {epoch}")
    if epoch < cfg.warmup_epochs:
        return cfg.lr * (epoch + 1) / cfg.warmup_epochs
    return cfg.lr * cfg.gamma ** ((epoch - cfg.warmup_epochs) // cfg.step_size_epochs)


@dataclass
class OptimizerState:
    """First/second moment accumulators plus the shared step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @staticmethod
    def for_params(params: dict[str, Tensor]) -> "OptimizerState":
        return OptimizerState(
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
        )


BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


def optimizer_step(
    params: dict[str, Tensor],
    state: OptimizerState,
    lr: float,
    weight_decay: float,
) -> None:
    """One AdamW update: bias-corrected moments plus decoupled decay.

    The decay multiplies parameters by (1 - lr * wd) independently of the
    gradient step, so zero-gradient parameters still shrink by exactly that
    factor. Missing gradients count as zero.
    """
    state.step += 1
    t = state.step
    for name, p in params.items():
        grad = p.grad
        if grad is not None and not np.all(np.isfinite(grad)):
            raise TrainingError(f"non-finite gradient in parameter {name!r} at step {t}")
        if grad is None:
            grad = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= BETA1
        m += (1 - BETA1) * grad
        v *= BETA2
        v += (1 - BETA2) * grad * grad
        m_hat = m / (1 - BETA1**t)
        v_hat = v / (1 - BETA2**t)
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        p.data -= lr * m_hat / (np.sqrt(v_hat) + EPS)


def _batches(order: np.ndarray, batch_size: int):
    for start in range(0, len(order), batch_size):
        yield order[start : start + batch_size]


def _mixed_order(
    n_labeled: int, n_unlabeled: int, batch_size: int, labeled_per_batch: int, rng
) -> np.ndarray:
    """Sample presentation order for one epoch.

    Default is a plain shuffle of the union, which mixes the two pools in
    proportion to their sizes. A fixed labeled-per-batch quota interleaves
    shuffled pools instead (the last batches absorb the remainders).
    """
    if labeled_per_batch <= 0 or n_unlabeled == 0:
        return rng.permutation(n_labeled + n_unlabeled)
    labeled = list(rng.permutation(n_labeled))
    unlabeled = list(rng.permutation(n_unlabeled) + n_labeled)
    quota = min(labeled_per_batch, batch_size)
    order = []
    while labeled or unlabeled:
        for _ in range(quota):
            if labeled:
                order.append(labeled.pop())
        for _ in range(batch_size - quota):
            if unlabeled:
                order.append(unlabeled.pop())
        if not labeled:
            order.extend(unlabeled)
            unlabeled = []
    return np.array(order, dtype=np.intp)


def fit(
    model: CorefGroundingModel,
    labeled: list[Sample],
    unlabeled: list[Sample],
    loss_cfg: LossConfig,
    train_cfg: TrainConfig,
    itc_class_map: dict[int, int] | None = None,
    epoch_hook=None,
) -> tuple[CorefGroundingModel, list[dict]]:
    """Train in place; returns the model and the per-step loss log.

    ``itc_class_map`` (head-token -> region class) is only consulted during
    the first epoch, before the cross-attention is informative. The optional
    ``epoch_hook(epoch, model)`` runs after each epoch (checkpointing).
    """
    if not labeled:
        raise ContractError("fit: the labeled set must be nonempty")
    params = model.parameters()
    state = OptimizerState.for_params(params)
    rng = np.random.default_rng(train_cfg.seed)
    pool = list(labeled) + [s.without_labels() for s in unlabeled]
    tags = [True] * len(labeled) + [False] * len(unlabeled)
    log: list[dict] = []
    step = 0
    for epoch in range(train_cfg.epochs):
        lr = lr_at(epoch, train_cfg)
        order = _mixed_order(
            len(labeled), len(unlabeled), train_cfg.batch_size, train_cfg.labeled_per_batch, rng
        )
        class_map = itc_class_map if epoch == 0 else None
        for chunk in _batches(order, train_cfg.batch_size):
            batch = [pool[i] for i in chunk]
            batch_tags = [tags[i] for i in chunk]
            model.zero_grad()
            with Tape() as tape:
                report, loss = total_loss(
                    batch, batch_tags, model, loss_cfg, rng, itc_class_map=class_map
                )
            tape.backward(loss)
            optimizer_step(params, state, lr, train_cfg.weight_decay)
            row = report.as_dict(step=step)
            row["epoch"] = epoch
            row["lr"] = lr
            log.append(row)
            step += 1
        if epoch_hook is not None:
            epoch_hook(epoch, model)
    return model, log
