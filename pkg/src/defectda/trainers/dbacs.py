"""DBACS: adversarial training of two aligners and two discriminators around
a frozen source classifier."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..config import TrainConfig
from ..dataset import ScenarioData
from ..losses import adversarial_term, cross_entropy, dbacs_final_loss, feature_matching_term, l1, msssim_term
from ..models import (SOURCE_TO_TARGET, TARGET_TO_SOURCE, Aligner, Classifier, Discriminator, build_aligner,
                      build_discriminator, parameter_checksum, save_checkpoint, set_requires_grad)
from .common import BatchSampler, TrainingError, TrainLog, as_tensor, make_optimizer

TERMS = ("cc", "adv", "cyc", "ssim", "id", "fm")


@dataclass
class DbacsEnsemble:
    f_cc: Classifier
    F: Aligner  # target -> source
    G: Aligner  # source -> target
    D_A: Discriminator  # source vs F(target)
    D_B: Discriminator  # target vs G(source)


def build_ensemble(f_cc: Classifier, config: TrainConfig) -> DbacsEnsemble:
    side = f_cc.input_side
    return DbacsEnsemble(
        f_cc=f_cc,
        F=build_aligner(TARGET_TO_SOURCE, side, config.aligner_width, config.aligner_residual),
        G=build_aligner(SOURCE_TO_TARGET, side, config.aligner_width, config.aligner_residual),
        D_A=build_discriminator(side, config.disc_width),
        D_B=build_discriminator(side, config.disc_width),
    )


@dataclass
class DbacsHistory:
    updates: list[str] = field(default_factory=list)
    epoch_bounds: list[int] = field(default_factory=list)
    classifier_checksum: str = ""
    terms: dict[str, list[float]] = field(default_factory=lambda: {k: [] for k in TERMS + ("final", "disc")})
    checkpoints: list[Path] = field(default_factory=list)


def dbacs_terms(ens: DbacsEnsemble, xs: torch.Tensor, xt: torch.Tensor,
                x_tl: torch.Tensor | None = None, y_tl: torch.Tensor | None = None) -> dict[str, torch.Tensor]:
    """All loss terms on one pair of batches, sharing the translated images."""
    fake_s, fake_t = ens.F(xt), ens.G(xs)
    taps_a_real, taps_a_fake = ens.D_A.taps(xs), ens.D_A.taps(fake_s)
    taps_b_real, taps_b_fake = ens.D_B.taps(xt), ens.D_B.taps(fake_t)
    cyc_s, cyc_t = ens.F(fake_t), ens.G(fake_s)
    if x_tl is not None and len(x_tl):
        cc = cross_entropy(ens.f_cc(ens.F(x_tl)), y_tl)
    else:
        cc = torch.zeros((), dtype=xs.dtype)
    return {
        "cc": cc,
        "adv": adversarial_term(torch.sigmoid(taps_a_real[-1]), torch.sigmoid(taps_a_fake[-1]))
        + adversarial_term(torch.sigmoid(taps_b_real[-1]), torch.sigmoid(taps_b_fake[-1])),
        "cyc": l1(cyc_s, xs) + l1(cyc_t, xt),
        "ssim": msssim_term(cyc_s, xs) + msssim_term(cyc_t, xt),
        "id": l1(ens.F(xs), xs) + l1(ens.G(xt), xt),
        "fm": feature_matching_term(taps_a_real, taps_a_fake) + feature_matching_term(taps_b_real, taps_b_fake),
    }


def discriminator_objective(ens: DbacsEnsemble, xs: torch.Tensor, xt: torch.Tensor) -> torch.Tensor:
    """The adversarial part of the final loss with aligner outputs held fixed."""
    with torch.no_grad():
        fake_s, fake_t = ens.F(xt), ens.G(xs)
    return adversarial_term(ens.D_A(xs), ens.D_A(fake_s)) + adversarial_term(ens.D_B(xt), ens.D_B(fake_t))


def identity_warmup(ens: DbacsEnsemble, x: torch.Tensor, steps: int, lr: float, rng: np.random.Generator,
                    batch_size: int = 64) -> float:
    """Pre-train both aligners to reproduce their input (L1)."""
    params = list(ens.F.parameters()) + list(ens.G.parameters())
    opt = torch.optim.Adam(params, lr=lr)
    sampler = BatchSampler(len(x), batch_size, rng)
    loss = torch.zeros(())
    for _ in range(steps):
        xb = x[sampler.next()]
        loss = l1(ens.F(xb), xb) + l1(ens.G(xb), xb)
        opt.zero_grad()
        loss.backward()
        opt.step()
    return float(loss)


def train_dbacs(ens: DbacsEnsemble, scenario: ScenarioData, config: TrainConfig, log: TrainLog | None = None,
                run_dir: str | Path | None = None) -> tuple[DbacsEnsemble, DbacsHistory]:
    if not ens.f_cc.frozen or any(p.requires_grad for p in ens.f_cc.parameters()):
        raise TrainingError("DBACS needs a frozen source classifier")
    rng = np.random.default_rng(config.seed)
    weights = config.loss_weights
    xs_all, xt_all = as_tensor(scenario.source_x), as_tensor(scenario.target_train_x)
    x_tl, y_tl = as_tensor(scenario.target_labeled_x), torch.as_tensor(scenario.target_labeled_y)
    ssda = len(y_tl) > 0
    b = config.dbacs_batch_size
    src, tgt = BatchSampler(len(xs_all), b, rng), BatchSampler(len(xt_all), b, rng)
    tl = BatchSampler(len(y_tl), min(b, len(y_tl)), rng) if ssda else None
    steps_per_epoch = config.dbacs_steps_per_epoch or int(np.ceil(max(len(xs_all), len(xt_all)) / b))

    history = DbacsHistory(classifier_checksum=parameter_checksum(ens.f_cc))
    if config.dbacs_identity_warmup:
        identity_warmup(ens, torch.cat([xs_all, xt_all]), config.dbacs_identity_warmup, config.dbacs_lr * 10, rng, b)

    discs = list(ens.D_A.parameters()) + list(ens.D_B.parameters())
    aligners = list(ens.F.parameters()) + list(ens.G.parameters())
    opt_d = make_optimizer(discs, config, config.dbacs_lr)
    opt_a = make_optimizer(aligners, config, config.dbacs_lr)
    total = config.dbacs_epochs * steps_per_epoch
    step = 0
    for module in (ens.F, ens.G, ens.D_A, ens.D_B):
        module.train()
    for epoch in range(1, config.dbacs_epochs + 1):
        for _ in range(steps_per_epoch):
            set_requires_grad(ens.D_A, True)
            set_requires_grad(ens.D_B, True)
            for _ in range(config.dbacs_r_adv):
                adv = discriminator_objective(ens, xs_all[src.next()], xt_all[tgt.next()])
                loss_d = -weights.adv * adv
                opt_d.zero_grad()
                loss_d.backward()
                opt_d.step()
                history.updates.append("D")
                history.terms["disc"].append(adv.item())

            set_requires_grad(ens.D_A, False)
            set_requires_grad(ens.D_B, False)
            if ssda:
                k = tl.next()
                terms = dbacs_terms(ens, xs_all[src.next()], xt_all[tgt.next()], x_tl[k], y_tl[k])
            else:
                terms = dbacs_terms(ens, xs_all[src.next()], xt_all[tgt.next()])
            final = dbacs_final_loss(weights, **terms)
            opt_a.zero_grad()
            final.backward()
            opt_a.step()
            history.updates.append("A")
            step += 1
            for name, value in terms.items():
                history.terms[name].append(value.item())
            history.terms["final"].append(final.item())
            if log is not None:
                values = {f"L_{k}": v.item() for k, v in terms.items()}
                values["L_final"] = final.item()
                values["L_adv_disc"] = adv.item()
                log.log(step, values, config.dbacs_lr, step / total)
        history.epoch_bounds.append(len(history.updates))
        if run_dir is not None and config.dbacs_ckpt_every and epoch % config.dbacs_ckpt_every == 0:
            history.checkpoints.append(save_ensemble(ens, Path(run_dir) / f"ckpt_{epoch}"))

    set_requires_grad(ens.D_A, True)
    set_requires_grad(ens.D_B, True)
    for module in (ens.F, ens.G, ens.D_A, ens.D_B):
        module.eval()
    if parameter_checksum(ens.f_cc) != history.classifier_checksum:
        raise TrainingError("source classifier changed during DBACS training")
    return ens, history


def save_ensemble(ens: DbacsEnsemble, directory: Path) -> Path:
    side = ens.f_cc.input_side
    for name in ("F", "G", "D_A", "D_B"):
        module = getattr(ens, name)
        save_checkpoint(module, directory, name, type(module).__name__.lower(), side)
    return directory
