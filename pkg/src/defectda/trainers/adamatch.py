"""AdaMatch: weak/strong consistency with random logit interpolation,
distribution alignment and a relative confidence threshold."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np
import torch

from ..augment import CTAugmentState, ct_update, match_score, strong_augment, weak_augment
from ..config import TrainConfig
from ..dataset import ScenarioData
from ..losses import adamatch_confidence_mask, adamatch_losses, distribution_alignment, random_logit_interpolation
from ..models import Classifier
from .common import BatchSampler, TrainLog, as_tensor, make_optimizer

EXPECTATION_FLOOR = 1e-6


@dataclass
class AdaMatchHistory:
    total_steps: int
    source_batch: int
    target_batch: int
    first_expectations: tuple[np.ndarray, np.ndarray] | None = None
    mask_rates: list[float] = field(default_factory=list)
    source_losses: list[float] = field(default_factory=list)
    target_losses: list[float] = field(default_factory=list)
    ct_state: CTAugmentState | None = None


def augment_batch(x: np.ndarray, state: CTAugmentState, rng: np.random.Generator):
    """Weak view and strong view (CTAugment on top of the same flip) per image."""
    weak = np.empty_like(x)
    strong = np.empty_like(x)
    applied = []
    for k in range(len(x)):
        weak[k] = weak_augment(x[k], rng)
        strong[k], ops = strong_augment(weak[k], state, rng)
        applied.append(ops)
    return weak, strong, applied


def train_adamatch(clf: Classifier, scenario: ScenarioData, config: TrainConfig,
                   log: TrainLog | None = None, ct_state: CTAugmentState | None = None) -> tuple[Classifier, AdaMatchHistory]:
    rng = np.random.default_rng(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    x_l, y_l = scenario.labeled_x, scenario.labeled_y
    x_u = scenario.target_unlabeled_x
    n_s = config.adamatch_batch_size
    n_t = config.adamatch_ratio * n_s
    total = config.adamatch_steps
    state = CTAugmentState.uniform() if ct_state is None else ct_state
    lab, unl = BatchSampler(len(y_l), n_s, rng), BatchSampler(len(x_u), n_t, rng)
    clf.set_trainable(len(clf.blocks) // 2 if clf.pretrained else 0)
    opt = make_optimizer(clf.parameters(), config, config.adamatch_lr, config.adamatch_weight_decay)
    window_s: deque = deque(maxlen=config.da_window)
    window_t: deque = deque(maxlen=config.da_window)
    history = AdaMatchHistory(total_steps=total, source_batch=n_s, target_batch=n_t, ct_state=state)
    clf.train()
    for t in range(total):
        i, j = lab.next(), unl.next()
        sw, ss, source_ops = augment_batch(x_l[i], state, rng)
        tw, ts, _ = augment_batch(x_u[j], state, rng)
        y = torch.as_tensor(y_l[i])
        source = as_tensor(np.concatenate([sw, ss]))
        n = len(i)

        z_mixed = clf(torch.cat([source, as_tensor(np.concatenate([tw, ts]))]))
        z_source_only = clf(source)
        z_sl = random_logit_interpolation(z_mixed[: 2 * n], z_source_only, generator=gen)
        z_sl_w, z_sl_s = z_sl[:n], z_sl[n:]
        z_tu_w, z_tu_s = z_mixed[2 * n:].split(len(j))

        p_sl_w = torch.softmax(z_sl_w.detach(), dim=1)
        p_tu_w = torch.softmax(z_tu_w.detach(), dim=1)
        window_s.append(p_sl_w.mean(dim=0))
        window_t.append(p_tu_w.mean(dim=0))
        e_s, e_t = torch.stack(list(window_s)).mean(0), torch.stack(list(window_t)).mean(0)
        if t == 0:
            history.first_expectations = (e_s.numpy().copy(), e_t.numpy().copy())
        aligned = distribution_alignment(p_tu_w, e_s, e_t, eps=EXPECTATION_FLOOR)
        mask = adamatch_confidence_mask(aligned, p_sl_w, config.adamatch_tau)
        l_source, l_target, loss = adamatch_losses(z_sl_w, z_sl_s, y, z_tu_s, aligned, mask, t, total)

        opt.zero_grad()
        loss.backward()
        opt.step()

        probe = torch.softmax(z_source_only[n:].detach(), dim=1).numpy()
        for k in range(n):
            ct_update(state, source_ops[k], match_score(probe[k], int(y[k])))

        history.mask_rates.append(float(mask.mean()))
        history.source_losses.append(l_source.item())
        history.target_losses.append(l_target.item())
        if log is not None:
            log.log(t, {"L_source": l_source.item(), "L_target": l_target.item(), "L_final": loss.item(),
                        "mask_rate": float(mask.mean())}, config.adamatch_lr, t / total)
    clf.set_trainable(0)
    clf.eval()
    return clf, history
