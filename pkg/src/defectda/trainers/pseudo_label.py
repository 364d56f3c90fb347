"""Offline (iterative self-training) and online (per-batch) pseudo-labeling."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from ..config import TrainConfig
from ..dataset import ScenarioData
from ..losses import alpha_ramp, online_pl_loss, pseudo_label
from ..models import Classifier
from .baseline import BaselineHistory, train_baseline
from .common import BatchSampler, TrainLog, as_tensor, make_optimizer, predict_probs


@dataclass
class PLIteration:
    index: int
    n_selected: int
    min_confidence: float
    labels_per_class: tuple[int, int]


@dataclass
class OfflinePLHistory:
    baseline: BaselineHistory
    iterations: list[PLIteration] = field(default_factory=list)
    stopped_early: bool = False


def train_offline_pl(clf: Classifier, scenario: ScenarioData, config: TrainConfig,
                     log: TrainLog | None = None) -> tuple[Classifier, OfflinePLHistory]:
    rng = np.random.default_rng(config.seed)
    x_l, y_l = scenario.labeled_x, scenario.labeled_y
    x_u = scenario.target_unlabeled_x
    clf, base = train_baseline(clf, x_l, y_l, config, rng=rng, log=log)
    warm_start = base.phase1_state
    history = OfflinePLHistory(baseline=base)
    for it in range(1, config.pl_iterations + 1):
        pl = pseudo_label(predict_probs(clf, x_u), config.pl_tau)
        selected = pl.mask.numpy().astype(bool)
        labels = pl.labels.numpy()[selected]
        history.iterations.append(PLIteration(
            index=it,
            n_selected=int(selected.sum()),
            min_confidence=float(pl.confidences[selected].min()) if selected.any() else float("nan"),
            labels_per_class=(int((labels == 0).sum()), int((labels == 1).sum())),
        ))
        if log is not None:
            log.log(it, {"pl_selected": float(selected.sum())}, config.lr, it / config.pl_iterations)
        if not selected.any():
            history.stopped_early = True
            break
        clf, _ = train_baseline(clf, x_l, y_l, config, rng=rng, extra=(x_u[selected], labels),
                                log=log, start_state=warm_start)
    return clf, history


@dataclass
class OnlinePLHistory:
    total_steps: int
    alphas: list[float] = field(default_factory=list)
    mask_rates: list[float] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)


def train_online_pl(clf: Classifier, scenario: ScenarioData, config: TrainConfig,
                    log: TrainLog | None = None) -> tuple[Classifier, OnlinePLHistory]:
    """One run on batches of b labeled plus ``pl_ratio * b`` unlabeled images."""
    rng = np.random.default_rng(config.seed)
    x_l, y_l = as_tensor(scenario.labeled_x), torch.as_tensor(scenario.labeled_y)
    x_u = as_tensor(scenario.target_unlabeled_x)
    b = config.batch_size
    steps_per_epoch = int(np.ceil(len(y_l) / b))
    total = config.online_epochs * steps_per_epoch
    lab, unl = BatchSampler(len(y_l), b, rng), BatchSampler(len(x_u), config.pl_ratio * b, rng)
    clf.set_trainable(len(clf.blocks) // 2 if clf.pretrained else 0)
    opt = make_optimizer(clf.parameters(), config, config.lr)
    history = OnlinePLHistory(total_steps=total)
    clf.train()
    for t in range(total):
        i, j = lab.next(), unl.next()
        loss, pl = online_pl_loss(clf, x_l[i], y_l[i], x_u[j], t, total, config.pl_tau, config.pl_alpha_max)
        opt.zero_grad()
        loss.backward()
        opt.step()
        alpha = alpha_ramp(t, total, config.pl_alpha_max)
        history.alphas.append(alpha)
        history.mask_rates.append(float(pl.mask.mean()))
        history.losses.append(loss.item())
        if log is not None:
            log.log(t, {"online_pl": loss.item(), "alpha": alpha, "mask_rate": float(pl.mask.mean())},
                    config.lr, t / total)
    clf.set_trainable(0)
    clf.eval()
    return clf, history
