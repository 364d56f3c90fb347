"""Loss terms and label manipulation for DBACS, pseudo-labeling and AdaMatch.

Networks are passed in where the loss needs them; every function also has an
image-level building block (``*_term``) that trainers reuse when translated
batches are already at hand.
"""

from __future__ import annotations

import math
from dataclasses import astuple, dataclass

import torch
import torch.nn.functional as F

LOG_CLAMP = 1e-7
MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
SSIM_WINDOW = 7
SSIM_SIGMA = 1.5
SSIM_FLOOR = 1e-6


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    cc: float = 1.0
    adv: float = 0.5
    cyc: float = 0.3
    id: float = 0.2
    fm: float = 0.0

    def __post_init__(self):
        if any(w < 0 for w in astuple(self)):
            raise LossError(f"loss weights must be nonnegative, got {self}")


@dataclass
class PseudoLabelBatch:
    labels: torch.Tensor
    confidences: torch.Tensor
    mask: torch.Tensor
    threshold_used: float


# --- classification --------------------------------------------------------------


def cross_entropy(inputs: torch.Tensor, targets: torch.Tensor, from_logits: bool = True,
                  reduction: str = "mean") -> torch.Tensor:
    """Categorical cross entropy.

    ``inputs`` are logits (default) or probabilities (``from_logits=False``).
    ``targets`` are class ids of shape (B,) or distributions of shape (B, C).
    """
    if from_logits:
        log_p = F.log_softmax(inputs, dim=1)
    else:
        log_p = torch.log(inputs.clamp_min(LOG_CLAMP))
    if targets.dim() == 1:
        if targets.numel() and (targets.min() < 0 or targets.max() >= inputs.shape[1]):
            raise LossError(f"labels must lie in [0, {inputs.shape[1] - 1}]")
        per_sample = -log_p.gather(1, targets.long().unsqueeze(1)).squeeze(1)
    else:
        per_sample = -(targets * log_p).sum(dim=1)
    if reduction == "none":
        return per_sample
    return per_sample.mean()


def dbacs_classifier_loss(f_cc, F_net, x_tl: torch.Tensor, y_tl: torch.Tensor) -> torch.Tensor:
    """CE of the frozen source classifier on target-labeled images mapped by F.

    Zero when the target has no labels (UDA).
    """
    if len(x_tl) == 0:
        return torch.zeros(())
    if not getattr(f_cc, "frozen", True):
        raise LossError("the source classifier must be frozen")
    return cross_entropy(f_cc(F_net(x_tl)), y_tl)


# --- adversarial -----------------------------------------------------------------


def adversarial_term(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    """mean log(1 - D(fake)) + mean log D(real), log arguments clamped."""
    return torch.log((1 - d_fake).clamp_min(LOG_CLAMP)).mean() + torch.log(d_real.clamp_min(LOG_CLAMP)).mean()


def adversarial_loss_S(F_net, D_A, x_s: torch.Tensor, x_t: torch.Tensor) -> torch.Tensor:
    return adversarial_term(D_A(x_s), D_A(F_net(x_t)))


def adversarial_loss_T(G_net, D_B, x_s: torch.Tensor, x_t: torch.Tensor) -> torch.Tensor:
    return adversarial_term(D_B(x_t), D_B(G_net(x_s)))


# --- reconstruction --------------------------------------------------------------


def l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (a - b).abs().mean()


def cycle_loss(F_net, G_net, x_s: torch.Tensor, x_t: torch.Tensor) -> torch.Tensor:
    return l1(F_net(G_net(x_s)), x_s) + l1(G_net(F_net(x_t)), x_t)


def identity_loss(F_net, G_net, x_s: torch.Tensor, x_t: torch.Tensor) -> torch.Tensor:
    return l1(F_net(x_s), x_s) + l1(G_net(x_t), x_t)


# --- MS-SSIM ---------------------------------------------------------------------


def msssim_scales(side: int) -> int:
    if side < 32:
        raise LossError(f"MS-SSIM needs images of side >= 32, got {side}")
    return 2 if side < 64 else 3


def _gaussian_kernel(dtype, device) -> torch.Tensor:
    coords = torch.arange(SSIM_WINDOW, dtype=dtype, device=device) - (SSIM_WINDOW - 1) / 2
    g = torch.exp(-(coords**2) / (2 * SSIM_SIGMA**2))
    return g / g.sum()


def _blur(x: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    x = F.conv2d(x, g.view(1, 1, 1, -1))
    return F.conv2d(x, g.view(1, 1, -1, 1))


def _ssim_parts(x: torch.Tensor, y: torch.Tensor, g: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-image mean SSIM and mean contrast-structure term (valid windows)."""
    mu_x, mu_y = _blur(x, g), _blur(y, g)
    sxx = _blur(x * x, g) - mu_x**2
    syy = _blur(y * y, g) - mu_y**2
    sxy = _blur(x * y, g) - mu_x * mu_y
    cs = (2 * sxy + SSIM_C2) / (sxx + syy + SSIM_C2)
    lum = (2 * mu_x * mu_y + SSIM_C1) / (mu_x**2 + mu_y**2 + SSIM_C1)
    return (lum * cs).mean(dim=(1, 2, 3)), cs.mean(dim=(1, 2, 3))


def ms_ssim(x: torch.Tensor, y: torch.Tensor, scales: int | None = None) -> torch.Tensor:
    """Per-image MS-SSIM of intensities in [0, 1]; shape (B,).

    Per-scale factors are floored at 1e-6 before exponentiation, which keeps
    the product real and bounds the result to [0, 1].
    """
    x, y = (t.unsqueeze(1) if t.dim() == 3 else t for t in (x, y))
    if x.shape != y.shape:
        raise LossError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    scales = msssim_scales(x.shape[-1]) if scales is None else scales
    weights = torch.tensor(MSSSIM_WEIGHTS[:scales], dtype=x.dtype, device=x.device)
    weights = weights / weights.sum()
    g = _gaussian_kernel(x.dtype, x.device)
    result = torch.ones(x.shape[0], dtype=x.dtype, device=x.device)
    for j in range(scales):
        ssim, cs = _ssim_parts(x, y, g)
        factor = ssim if j == scales - 1 else cs
        result = result * factor.clamp_min(SSIM_FLOOR) ** weights[j]
        if j < scales - 1:
            x, y = F.avg_pool2d(x, 2), F.avg_pool2d(y, 2)
    return result


def msssim_term(cycled: torch.Tensor, original: torch.Tensor) -> torch.Tensor:
    return 1 - ms_ssim(cycled, original).mean()


def msssim_loss(F_net, G_net, x_s: torch.Tensor, x_t: torch.Tensor) -> torch.Tensor:
    return msssim_term(F_net(G_net(x_s)), x_s) + msssim_term(G_net(F_net(x_t)), x_t)


# --- feature matching ------------------------------------------------------------


def feature_matching_term(real_taps: list[torch.Tensor], fake_taps: list[torch.Tensor]) -> torch.Tensor:
    """Mean over hidden layers (output tap excluded) of the squared L2 distance
    between batch-mean activations."""
    if len(real_taps) < 2 or len(real_taps) != len(fake_taps):
        raise LossError("feature matching needs at least one hidden tap per discriminator")
    dists = [((r.mean(dim=0) - f.mean(dim=0)) ** 2).sum() for r, f in zip(real_taps[:-1], fake_taps[:-1])]
    return torch.stack(dists).mean()


def feature_matching_loss(net, D, x_real: torch.Tensor, x_other: torch.Tensor) -> torch.Tensor:
    """FM for one aligner/discriminator pair: real ``x_real`` vs ``net(x_other)``.

    ``feature_matching_loss(F, D_A, X_S, X_T)`` is the A term and
    ``feature_matching_loss(G, D_B, X_T, X_S)`` the B term.
    """
    if not hasattr(D, "taps"):
        raise LossError("discriminator exposes no activation taps")
    return feature_matching_term(D.taps(x_real), D.taps(net(x_other)))


# --- final DBACS loss ------------------------------------------------------------


def dbacs_final_loss(weights: LossWeights, cc, adv, cyc, ssim, id, fm):
    return weights.cc * cc + weights.adv * adv + weights.cyc * (cyc + ssim) + weights.id * id + weights.fm * fm


# --- pseudo-labeling -------------------------------------------------------------


def pseudo_label(probs: torch.Tensor, tau: float) -> PseudoLabelBatch:
    """argmax labels; mask keeps samples whose max probability is >= tau."""
    confidences, labels = probs.max(dim=1)
    mask = (confidences >= tau).to(probs.dtype)
    return PseudoLabelBatch(labels=labels, confidences=confidences, mask=mask, threshold_used=float(tau))


def alpha_ramp(t: float, total: float, alpha_max: float = 1.0, start: float = 0.2, end: float = 0.6) -> float:
    """Linear ramp: 0 before start*T, alpha_max after end*T."""
    if total <= 0:
        raise LossError("total step count must be positive")
    t1, t2 = start * total, end * total
    if t < t1:
        return 0.0
    if t >= t2:
        return alpha_max
    return alpha_max * (t - t1) / (t2 - t1)


def online_pl_loss(f, x_l: torch.Tensor, y_l: torch.Tensor, x_u: torch.Tensor, t: float, total: float,
                   tau: float = 0.9, alpha_max: float = 1.0) -> tuple[torch.Tensor, PseudoLabelBatch]:
    """Supervised CE plus alpha(t) times the masked CE on per-batch pseudo-labels.

    Labeled and unlabeled images share one forward pass; pseudo-labels come
    from that pass and carry no gradient.
    """
    logits = f(torch.cat([x_l, x_u]))
    logits_l, logits_u = logits[: len(x_l)], logits[len(x_l):]
    sup = cross_entropy(logits_l, y_l)
    pl = pseudo_label(torch.softmax(logits_u.detach(), dim=1), tau)
    alpha = alpha_ramp(t, total, alpha_max)
    if len(x_u) == 0:
        return sup, pl
    unsup = (cross_entropy(logits_u, pl.labels, reduction="none") * pl.mask).mean()
    return sup + alpha * unsup, pl


# --- AdaMatch --------------------------------------------------------------------


def random_logit_interpolation(z_mixed: torch.Tensor, z_source: torch.Tensor,
                               generator: torch.Generator | None = None,
                               lam: torch.Tensor | float | None = None) -> torch.Tensor:
    """lam * z_mixed + (1 - lam) * z_source with lam ~ U(0, 1) per logit entry."""
    if z_mixed.shape != z_source.shape:
        raise LossError(f"shape mismatch {tuple(z_mixed.shape)} vs {tuple(z_source.shape)}")
    if lam is None:
        lam = torch.rand(z_mixed.shape, generator=generator, dtype=z_mixed.dtype)
    return lam * z_mixed + (1 - lam) * z_source


def distribution_alignment(p_target: torch.Tensor, expect_source: torch.Tensor, expect_target: torch.Tensor,
                           eps: float = 1e-6) -> torch.Tensor:
    if eps <= 0 and (expect_target <= 0).any():
        raise LossError("target expectation has a zero entry and no floor")
    ratio = expect_source.clamp_min(eps) / expect_target.clamp_min(eps) if eps > 0 else expect_source / expect_target
    aligned = p_target * ratio
    return aligned / aligned.sum(dim=1, keepdim=True)


def adamatch_confidence_mask(p_target: torch.Tensor, p_source: torch.Tensor, tau: float) -> torch.Tensor:
    """1 where target confidence >= tau * mean source confidence."""
    if len(p_source) == 0:
        raise LossError("empty source batch")
    threshold = tau * p_source.max(dim=1).values.mean()
    return (p_target.max(dim=1).values >= threshold).to(p_target.dtype)


def mu_warmup(t: float, total: float) -> float:
    """0.5 - cos(min(pi, 2 pi t / T)) / 2: reaches 1 at T/2 and stays."""
    if total <= 0:
        raise LossError("total step count must be positive")
    return 0.5 - math.cos(min(math.pi, 2 * math.pi * t / total)) / 2


def adamatch_losses(z_source_weak: torch.Tensor, z_source_strong: torch.Tensor, y_source: torch.Tensor,
                    z_target_strong: torch.Tensor, pseudo: torch.Tensor, mask: torch.Tensor,
                    t: float, total: float) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    source = cross_entropy(z_source_weak, y_source) + cross_entropy(z_source_strong, y_source)
    per_sample = cross_entropy(z_target_strong, pseudo.detach(), reduction="none")
    target = (per_sample * mask.detach()).mean()
    return source, target, source + mu_warmup(t, total) * target
