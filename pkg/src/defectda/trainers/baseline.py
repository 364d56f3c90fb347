"""Two-phase fine-tuning with early stopping on a held-out validation split."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
import torch

from ..config import TrainConfig
from ..dataset import stratified_pick
from ..losses import cross_entropy
from ..models import Classifier
from .common import BatchSampler, TrainingError, TrainLog, as_tensor, make_optimizer


@dataclass
class PhaseResult:
    lr: float
    epochs_run: int
    best_epoch: int
    best_val_loss: float
    val_losses: list[float] = field(default_factory=list)


@dataclass
class BaselineHistory:
    n_train: int
    n_val: int
    phases: list[PhaseResult] = field(default_factory=list)
    phase1_state: dict | None = None


@torch.no_grad()
def validation_loss(clf: Classifier, x: torch.Tensor, y: torch.Tensor, batch_size: int = 256) -> float:
    was_training = clf.training
    clf.eval()
    total = 0.0
    for i in range(0, len(x), batch_size):
        total += float(cross_entropy(clf(x[i:i + batch_size]), y[i:i + batch_size], reduction="none").sum())
    clf.train(was_training)
    return total / len(x)


def fit_phase(clf: Classifier, x: torch.Tensor, y: torch.Tensor, val_x: torch.Tensor, val_y: torch.Tensor,
              lr: float, epochs: int, config: TrainConfig, rng: np.random.Generator,
              extra: tuple[torch.Tensor, torch.Tensor] | None = None, log: TrainLog | None = None,
              step0: int = 0) -> PhaseResult:
    """Train the currently trainable parameters; restore the best-validation state.

    ``extra`` holds pseudo-labeled samples; each labeled batch of size b is
    topped up with at most ``pl_ratio * b`` of them.
    """
    opt = make_optimizer(clf.parameters(), config, lr)
    # only trained epochs compete; the entry state is never restored
    best_state = copy.deepcopy(clf.state_dict())
    best_loss = float("inf")
    result = PhaseResult(lr=lr, epochs_run=0, best_epoch=0, best_val_loss=best_loss)
    extra_sampler = BatchSampler(len(extra[0]), config.batch_size, rng) if extra is not None and len(extra[0]) else None
    steps_per_epoch = int(np.ceil(len(x) / config.batch_size))
    stale = 0
    step = step0
    for epoch in range(1, epochs + 1):
        clf.train()
        order = rng.permutation(len(x))
        for i in range(steps_per_epoch):
            idx = order[i * config.batch_size:(i + 1) * config.batch_size]
            xb, yb = x[idx], y[idx]
            if extra_sampler is not None:
                j = extra_sampler.next(min(config.pl_ratio * len(idx), extra_sampler.n))
                xb, yb = torch.cat([xb, extra[0][j]]), torch.cat([yb, extra[1][j]])
            loss = cross_entropy(clf(xb), yb)
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            if log is not None:
                log.log(step, {"ce": loss.item()}, lr, epoch / max(epochs, 1))
        val = validation_loss(clf, val_x, val_y)
        result.val_losses.append(val)
        result.epochs_run = epoch
        if log is not None:
            log.log(step, {"val_loss": val}, lr, epoch / max(epochs, 1))
        if val < best_loss:
            best_loss, best_state, stale = val, copy.deepcopy(clf.state_dict()), 0
            result.best_epoch, result.best_val_loss = epoch, val
        else:
            stale += 1
            if stale >= config.patience:
                break
    clf.load_state_dict(best_state)
    return result


def split_validation(y: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Boolean mask of the stratified validation subset."""
    return stratified_pick(y, fraction, rng)


def train_baseline(clf: Classifier, x: np.ndarray, y: np.ndarray, config: TrainConfig,
                   rng: np.random.Generator | None = None, extra: tuple[np.ndarray, np.ndarray] | None = None,
                   log: TrainLog | None = None, start_state: dict | None = None) -> tuple[Classifier, BaselineHistory]:
    """Phase 1 trains adapter and head (plus the whole backbone when it is not
    pretrained); phase 2 also unfreezes the back half of the backbone at a
    tenth of the learning rate."""
    y = np.asarray(y)
    if len(y) == 0:
        raise TrainingError("no labeled training data")
    if len(np.unique(y)) < 2:
        raise TrainingError("labeled training data contains a single class")
    rng = np.random.default_rng(config.seed) if rng is None else rng
    is_val = split_validation(y, config.val_fraction, rng)
    xt, yt = as_tensor(x[~is_val]), torch.as_tensor(y[~is_val])
    xv, yv = as_tensor(x[is_val]), torch.as_tensor(y[is_val])
    extra_t = None
    if extra is not None and len(extra[0]):
        extra_t = (as_tensor(extra[0]), torch.as_tensor(np.asarray(extra[1])))
    history = BaselineHistory(n_train=len(yt), n_val=len(yv))

    if start_state is not None:
        clf.load_state_dict(start_state)
    clf.set_trainable(None if clf.pretrained else 0)
    p1 = fit_phase(clf, xt, yt, xv, yv, config.lr, config.epochs_phase1, config, rng, extra_t, log)
    history.phases.append(p1)
    history.phase1_state = copy.deepcopy(clf.state_dict())

    clf.set_trainable(len(clf.blocks) // 2)
    lr2 = config.lr * config.phase2_lr_factor
    p2 = fit_phase(clf, xt, yt, xv, yv, lr2, config.epochs_phase2, config, rng, extra_t, log,
                   step0=p1.epochs_run * int(np.ceil(len(yt) / config.batch_size)))
    history.phases.append(p2)
    clf.set_trainable(0)
    clf.eval()
    return clf, history
