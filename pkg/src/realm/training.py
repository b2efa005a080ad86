"""Mini-batch BCE training with AUROC-monitored early stopping.

The optimizer is AdamW (betas 0.9/0.999, eps 1e-8, decoupled weight decay
0.01 by default). After each epoch the model is evaluated on the
validation set; the parameter state with the best validation AUROC is
kept and training stops once it has not improved for ``patience`` epochs.
Batch shuffling draws from its own seeded stream, so a (config, seed)
pair pins the whole trajectory.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from . import metrics
from .model import Batch, RealmModel

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 256
    max_epochs: int = 30
    patience: int = 5
    lr: float = 6e-4
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self) -> None:
        if self.patience > self.max_epochs:
            raise TrainingError(
                f"patience ({self.patience}) must be <= max_epochs ({self.max_epochs})"
            )
        if min(self.batch_size, self.max_epochs, self.patience) < 1 or self.lr < 0:
            raise TrainingError("batch_size/max_epochs/patience must be >= 1 and lr >= 0")


@dataclass
class TrainResult:
    model: RealmModel
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_auroc: float = 0.0


def bce_loss_torch(y_hat: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    p = torch.clamp(y_hat, 1e-7, 1.0 - 1e-7)
    return -(y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p)).mean()


def train(
    model: RealmModel,
    train_batch: Batch,
    val_batch: Batch,
    cfg: TrainConfig,
    shuffle_seed: Optional[int] = None,
) -> TrainResult:
    """Optimize ``model`` in place and return it restored to the best
    validation checkpoint, along with the per-epoch history."""
    if len(train_batch) == 0 or len(val_batch) == 0:
        raise TrainingError("train and validation sets must be non-empty")
    val_labels = val_batch.y.numpy()
    if val_labels.min() == val_labels.max():
        raise TrainingError("validation set needs both classes for AUROC early stopping")

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed if shuffle_seed is None else shuffle_seed)
    opt = torch.optim.AdamW(
        model.parameters(),
        lr=cfg.lr,
        betas=cfg.betas,
        eps=cfg.adam_eps,
        weight_decay=cfg.weight_decay,
    )

    n = len(train_batch)
    best_state = copy.deepcopy(model.state_dict())
    best_auroc = -1.0
    best_epoch = 0
    since_best = 0
    history: list[dict] = []

    for epoch in range(1, cfg.max_epochs + 1):
        model.train()
        order = rng.permutation(n)
        losses = []
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = torch.from_numpy(order[start : start + cfg.batch_size])
            mini = train_batch.select(idx)
            opt.zero_grad()
            out = model(mini)
            loss = bce_loss_torch(out.y_hat, mini.y)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))

        scores = model.predict_proba(val_batch).numpy()
        val_auroc = metrics.auroc(scores, val_labels)
        history.append(
            {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_auroc": val_auroc}
        )
        log.debug("epoch %d loss %.4f val auroc %.4f", epoch, np.mean(losses), val_auroc)

        if val_auroc > best_auroc:
            best_auroc = val_auroc
            best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break

    model.load_state_dict(best_state)
    return TrainResult(model=model, history=history, best_epoch=best_epoch, best_val_auroc=best_auroc)


def evaluate(
    model: RealmModel, batch: Batch, b: int = 10, seed: int = 0
) -> tuple[np.ndarray, metrics.MetricReport]:
    """Eval-mode scores plus the bootstrap metric report."""
    scores = model.predict_proba(batch).numpy()
    report = metrics.bootstrap_metrics(scores, batch.y.numpy().astype(int), b=b, seed=seed)
    return scores, report
