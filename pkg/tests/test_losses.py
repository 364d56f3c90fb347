import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.signal import correlate2d

from defectda.losses import (LossError, LossWeights, adamatch_confidence_mask, adamatch_losses, adversarial_loss_S,
                             adversarial_loss_T, adversarial_term, alpha_ramp, cross_entropy, cycle_loss,
                             dbacs_classifier_loss, dbacs_final_loss, distribution_alignment, feature_matching_loss,
                             feature_matching_term, identity_loss, ms_ssim, msssim_loss, msssim_scales, mu_warmup,
                             online_pl_loss, pseudo_label, random_logit_interpolation)
from defectda.models import parameter_checksum


@pytest.fixture(autouse=True)
def _float64():
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(torch.float32)


class Const(torch.nn.Module):
    def __init__(self, value):
        super().__init__()
        self.value = value

    def forward(self, x):
        return torch.full_like(x, self.value)


class Lambda(torch.nn.Module):
    def __init__(self, fn):
        super().__init__()
        self.fn = fn

    def forward(self, x):
        return self.fn(x)


IDENTITY = Lambda(lambda x: x)


# --- independent MS-SSIM reference -----------------------------------------------


def _np_gauss(size=7, sigma=1.5):
    c = np.arange(size) - (size - 1) / 2
    g = np.exp(-c**2 / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _np_ssim(a, b):
    w = _np_gauss()
    f = lambda z: correlate2d(z, w, mode="valid")
    mx, my = f(a), f(b)
    vx, vy, cxy = f(a * a) - mx**2, f(b * b) - my**2, f(a * b) - mx * my
    c1, c2 = 0.01**2, 0.03**2
    cs = (2 * cxy + c2) / (vx + vy + c2)
    lum = (2 * mx * my + c1) / (mx**2 + my**2 + c1)
    return (lum * cs).mean(), cs.mean()


def _np_msssim(a, b):
    scales = 3 if a.shape[0] >= 64 else 2
    w = np.array([0.0448, 0.2856, 0.3001, 0.2363, 0.1333][:scales])
    w /= w.sum()
    out = 1.0
    for j in range(scales):
        s, cs = _np_ssim(a, b)
        out *= max(s if j == scales - 1 else cs, 1e-6) ** w[j]
        h = a.shape[0] // 2
        a = a.reshape(h, 2, h, 2).mean(axis=(1, 3))
        b = b.reshape(h, 2, h, 2).mean(axis=(1, 3))
    return out


# --- cross entropy ---------------------------------------------------------------


def test_ce_perfect_prediction_is_zero():
    probs = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    assert float(cross_entropy(probs, torch.tensor([0, 1]), from_logits=False)) == pytest.approx(0, abs=1e-6)


def test_ce_uniform_is_ln2():
    assert float(cross_entropy(torch.zeros(4, 2), torch.tensor([0, 1, 1, 0]))) == pytest.approx(math.log(2), abs=1e-4)


def test_ce_batch_mean_equals_mean_of_samples():
    z = torch.randn(9, 2, generator=torch.Generator().manual_seed(0))
    y = torch.randint(0, 2, (9,), generator=torch.Generator().manual_seed(1))
    per = torch.stack([cross_entropy(z[i:i + 1], y[i:i + 1]) for i in range(9)])
    assert float(cross_entropy(z, y)) == pytest.approx(float(per.mean()), abs=1e-12)


def test_ce_soft_targets_match_hard_labels():
    z = torch.randn(5, 2)
    y = torch.tensor([0, 1, 1, 0, 1])
    soft = torch.nn.functional.one_hot(y, 2).double()
    assert float(cross_entropy(z, soft)) == pytest.approx(float(cross_entropy(z, y)), abs=1e-12)


def test_ce_rejects_out_of_range_labels():
    with pytest.raises(LossError):
        cross_entropy(torch.zeros(2, 2), torch.tensor([0, 2]))


# --- DBACS terms -----------------------------------------------------------------


class LinearClassifier(torch.nn.Module):
    """Logits from mean intensity; frozen on construction."""

    frozen = True

    def __init__(self):
        super().__init__()
        self.lin = torch.nn.Linear(1, 2)
        with torch.no_grad():
            self.lin.weight.copy_(torch.tensor([[-50.0], [50.0]]))
            self.lin.bias.copy_(torch.tensor([25.0, -25.0]))
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x):
        return self.lin(x.mean(dim=(1, 2, 3)).unsqueeze(1))


def test_classifier_loss_zero_without_target_labels():
    f = LinearClassifier()
    assert float(dbacs_classifier_loss(f, IDENTITY, torch.zeros(0, 1, 8, 8), torch.zeros(0, dtype=torch.long))) == 0


def test_classifier_loss_perfect_classifier_identity_aligner():
    f = LinearClassifier()
    x = torch.cat([torch.full((2, 1, 8, 8), 0.1), torch.full((2, 1, 8, 8), 0.9)])
    y = torch.tensor([0, 0, 1, 1])
    assert float(dbacs_classifier_loss(f, IDENTITY, x, y)) == pytest.approx(0, abs=1e-6)


def test_classifier_loss_updates_aligner_only():
    f = LinearClassifier()
    before = parameter_checksum(f)
    aligner = torch.nn.Conv2d(1, 1, 3, padding=1)
    opt = torch.optim.SGD(aligner.parameters(), lr=0.1)
    x = torch.rand(4, 1, 8, 8)
    loss = dbacs_classifier_loss(f, aligner, x, torch.tensor([0, 1, 0, 1]))
    loss.backward()
    opt.step()
    assert aligner.weight.grad is not None and aligner.weight.grad.abs().sum() > 0
    assert parameter_checksum(f) == before


def test_classifier_loss_rejects_unfrozen_classifier():
    f = LinearClassifier()
    f.frozen = False
    with pytest.raises(LossError):
        dbacs_classifier_loss(f, IDENTITY, torch.rand(2, 1, 8, 8), torch.tensor([0, 1]))


def test_adversarial_half_discriminator():
    d = Lambda(lambda x: torch.full((x.shape[0],), 0.5))
    xs, xt = torch.rand(3, 1, 8, 8), torch.rand(3, 1, 8, 8)
    assert float(adversarial_loss_S(IDENTITY, d, xs, xt)) == pytest.approx(-1.3863, abs=1e-4)


def test_adversarial_perfect_discriminator_near_zero():
    assert float(adversarial_term(torch.ones(4), torch.zeros(4))) == pytest.approx(0, abs=1e-6)


def test_adversarial_clamp_keeps_values_finite():
    value = adversarial_term(torch.zeros(2), torch.ones(2))
    assert torch.isfinite(value)
    assert float(value) == pytest.approx(2 * math.log(1e-7), rel=1e-6)


def test_adversarial_s_t_symmetry():
    torch.manual_seed(0)
    net = torch.nn.Conv2d(1, 1, 3, padding=1)
    disc = Lambda(lambda x: torch.sigmoid(x.mean(dim=(1, 2, 3))))
    xs, xt = torch.rand(3, 1, 8, 8), torch.rand(3, 1, 8, 8)
    with torch.no_grad():
        assert float(adversarial_loss_S(net, disc, xs, xt)) == pytest.approx(float(adversarial_loss_T(net, disc, xt, xs)))


def test_cycle_identity_nets_zero():
    x = torch.rand(2, 1, 8, 8)
    assert float(cycle_loss(IDENTITY, IDENTITY, x, x)) == 0
    assert float(identity_loss(IDENTITY, IDENTITY, x, x)) == 0


def test_cycle_constant_images():
    xs = torch.full((2, 1, 8, 8), 0.5)
    # F(G(xs)) = 0.7 everywhere; the target direction is exact
    shift = Lambda(lambda x: torch.where(x == 0.5, torch.full_like(x, 0.7), x))
    xt = torch.full((2, 1, 8, 8), 0.3)
    assert float(cycle_loss(shift, IDENTITY, xs, xt)) == pytest.approx(0.2, abs=1e-12)


def test_identity_inverting_net():
    x = torch.full((2, 1, 8, 8), 0.25)
    invert = Lambda(lambda z: 1 - z)
    assert float(identity_loss(invert, IDENTITY, x, x)) == pytest.approx(0.5, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_reconstruction_losses_nonnegative(seed):
    g = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    f_net, g_net = torch.nn.Conv2d(1, 1, 3, padding=1), torch.nn.Conv2d(1, 1, 3, padding=1)
    xs, xt = torch.rand(2, 1, 8, 8, generator=g), torch.rand(2, 1, 8, 8, generator=g)
    assert cycle_loss(f_net, g_net, xs, xt).item() >= 0
    assert identity_loss(f_net, g_net, xs, xt).item() >= 0


# --- MS-SSIM ---------------------------------------------------------------------


def test_msssim_scale_count():
    assert msssim_scales(32) == 2
    assert msssim_scales(64) == 3
    assert msssim_scales(128) == 3
    with pytest.raises(LossError):
        msssim_scales(16)


def test_msssim_loss_zero_for_perfect_cycle():
    x = torch.rand(2, 1, 32, 32)
    assert float(msssim_loss(IDENTITY, IDENTITY, x, x)) == pytest.approx(0, abs=1e-10)


@pytest.mark.parametrize("side", [32, 64])
def test_msssim_matches_reference(side):
    rng = np.random.default_rng(side)
    for _ in range(10):
        a = rng.random((side, side))
        b = np.clip(a + rng.normal(0, rng.uniform(0.02, 0.3), a.shape), 0, 1)
        got = float(ms_ssim(torch.tensor(a)[None], torch.tensor(b)[None])[0])
        assert got == pytest.approx(_np_msssim(a, b), abs=1e-4)


def test_msssim_loss_increases_with_noise():
    g = torch.Generator().manual_seed(0)
    x = torch.rand(4, 1, 64, 64, generator=g)
    noise = torch.randn(x.shape, generator=g)
    losses = []
    for sigma in (0.05, 0.1, 0.2):
        noisy = Lambda(lambda z, s=sigma: (z + s * noise).clamp(0, 1))
        losses.append(float(msssim_loss(noisy, IDENTITY, x, x)))
    assert losses[0] < losses[1] < losses[2]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_msssim_term_bounded(seed):
    g = torch.Generator().manual_seed(seed)
    a, b = torch.rand(2, 1, 32, 32, generator=g), torch.rand(2, 1, 32, 32, generator=g)
    v = ms_ssim(a, b)
    assert ((v >= 0) & (v <= 1 + 1e-12)).all()


# --- feature matching ------------------------------------------------------------


class TapDisc(torch.nn.Module):
    def __init__(self, w1, w_out):
        super().__init__()
        self.w1, self.w_out = w1, w_out

    def taps(self, x):
        h = self.w1 * x.mean(dim=(1, 2, 3)).unsqueeze(1)  # (B, k)
        return [h, (h * self.w_out).sum(dim=1)]


def test_fm_identical_batches_zero():
    d = TapDisc(torch.tensor([1.0, -2.0]), torch.tensor([0.3, 0.1]))
    x = torch.rand(3, 1, 8, 8)
    assert float(feature_matching_loss(IDENTITY, d, x, x)) == 0


def test_fm_linear_toy_hand_computed():
    d = TapDisc(torch.tensor([1.0, -2.0]), torch.tensor([0.3, 0.1]))
    x_real = torch.full((2, 1, 4, 4), 0.5)
    x_other = torch.full((2, 1, 4, 4), 0.2)
    # a1(real) = (0.5, -1.0); a1(fake) = (0.2, -0.4); squared distance 0.09 + 0.36
    assert float(feature_matching_loss(IDENTITY, d, x_real, x_other)) == pytest.approx(0.45, abs=1e-12)


def test_fm_ignores_output_layer():
    x_real, x_other = torch.rand(3, 1, 4, 4), torch.rand(3, 1, 4, 4)
    a = feature_matching_loss(IDENTITY, TapDisc(torch.tensor([1.0, 2.0]), torch.tensor([0.3, 0.1])), x_real, x_other)
    b = feature_matching_loss(IDENTITY, TapDisc(torch.tensor([1.0, 2.0]), torch.tensor([-7.0, 4.0])), x_real, x_other)
    assert float(a) == float(b)


def test_fm_requires_taps():
    with pytest.raises(LossError):
        feature_matching_loss(IDENTITY, Lambda(lambda x: x), torch.rand(1, 1, 4, 4), torch.rand(1, 1, 4, 4))
    with pytest.raises(LossError):
        feature_matching_term([torch.zeros(1)], [torch.zeros(1)])


# --- final loss ------------------------------------------------------------------


def test_final_loss_worked_example():
    # 1 + 0.5*2 + 0.3*(3+4) + 0.2*5 + 0*6
    w = LossWeights()
    assert dbacs_final_loss(w, 1, 2, 3, 4, 5, 6) == pytest.approx(5.1, abs=1e-12)


def test_final_loss_all_zero_weights():
    assert dbacs_final_loss(LossWeights(0, 0, 0, 0, 0), 1, 2, 3, 4, 5, 6) == 0


def test_final_loss_fm_weight_zero_ignores_fm():
    w = LossWeights()
    assert dbacs_final_loss(w, 1, 2, 3, 4, 5, 6) == dbacs_final_loss(w, 1, 2, 3, 4, 5, 1e6)


def test_negative_weight_rejected():
    with pytest.raises(LossError):
        LossWeights(adv=-0.1)


@given(st.lists(st.floats(-1e3, 1e3), min_size=6, max_size=6), st.lists(st.floats(0, 10), min_size=5, max_size=5))
def test_final_loss_weighted_sum_exact(terms, weights):
    w = LossWeights(*weights)
    cc, adv, cyc, ssim, idt, fm = terms
    expected = w.cc * cc + w.adv * adv + w.cyc * cyc + w.cyc * ssim + w.id * idt + w.fm * fm
    assert dbacs_final_loss(w, *terms) == pytest.approx(expected, abs=1e-6, rel=1e-9)


# --- pseudo-labeling -------------------------------------------------------------


def test_pseudo_label_examples():
    pl = pseudo_label(torch.tensor([[0.95, 0.05], [0.6, 0.4], [0.9, 0.1], [0.02, 0.98]]), 0.9)
    assert pl.labels.tolist() == [0, 0, 0, 1]
    assert pl.mask.tolist() == [1, 0, 1, 1]
    assert pl.threshold_used == 0.9


@given(st.lists(st.integers(0, 100), min_size=1, max_size=20), st.integers(1, 99))
def test_pseudo_label_mask_soundness(numerators, tau_pct):
    p0 = torch.tensor(numerators, dtype=torch.float64) / 100
    probs = torch.stack([p0, 1 - p0], dim=1)
    tau = tau_pct / 100
    pl = pseudo_label(probs, tau)
    for row, m in zip(numerators, pl.mask.tolist()):
        assert m == float(max(row, 100 - row) >= tau_pct)


def test_alpha_ramp_shape():
    assert alpha_ramp(0, 100) == 0
    assert alpha_ramp(19.9, 100) == 0
    assert alpha_ramp(40, 100) == pytest.approx(0.5)
    assert alpha_ramp(60, 100) == 1
    assert alpha_ramp(100, 100, alpha_max=3) == 3
    sweep = [alpha_ramp(t, 100) for t in np.linspace(0, 100, 100)]
    assert all(a <= b for a, b in zip(sweep, sweep[1:]))
    with pytest.raises(LossError):
        alpha_ramp(0, 0)


def test_online_pl_start_is_supervised_only():
    torch.manual_seed(0)
    f = torch.nn.Linear(4, 2)
    x_l, y_l, x_u = torch.randn(3, 4), torch.tensor([0, 1, 1]), torch.randn(6, 4)
    loss, _ = online_pl_loss(f, x_l, y_l, x_u, 0, 100)
    assert loss.item() == pytest.approx(cross_entropy(f(x_l), y_l).item(), abs=1e-12)


def test_online_pl_plateau_adds_masked_term():
    torch.manual_seed(0)
    f = torch.nn.Linear(4, 2)
    with torch.no_grad():
        f.weight.mul_(20)
    x_l, y_l, x_u = torch.randn(3, 4), torch.tensor([0, 1, 1]), torch.randn(6, 4)
    loss, pl = online_pl_loss(f, x_l, y_l, x_u, 80, 100, tau=0.9)
    zu = f(x_u)
    unsup = (cross_entropy(zu, zu.argmax(1), reduction="none") * (torch.softmax(zu, 1).max(1).values >= 0.9)).mean()
    assert loss.item() == pytest.approx((cross_entropy(f(x_l), y_l) + unsup).item(), abs=1e-12)
    assert 0 < float(pl.mask.mean()) <= 1


def test_online_pl_rejects_zero_total():
    f = torch.nn.Linear(4, 2)
    with pytest.raises(LossError):
        online_pl_loss(f, torch.randn(1, 4), torch.tensor([0]), torch.randn(1, 4), 0, 0)


# --- AdaMatch --------------------------------------------------------------------


def test_rli_endpoints_and_midpoint():
    a, b = torch.tensor([[2.0, 0.0]]), torch.tensor([[0.0, 2.0]])
    assert torch.equal(random_logit_interpolation(a, b, lam=0.0), b)
    assert torch.equal(random_logit_interpolation(a, b, lam=1.0), a)
    assert random_logit_interpolation(a, b, lam=0.5).tolist() == [[1.0, 1.0]]
    with pytest.raises(LossError):
        random_logit_interpolation(a, torch.zeros(2, 2))


@settings(deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_rli_convexity_bound(seed):
    g = torch.Generator().manual_seed(seed)
    a, b = torch.randn(5, 2, generator=g) * 10, torch.randn(5, 2, generator=g) * 10
    z = random_logit_interpolation(a, b, generator=g)
    assert (z >= torch.minimum(a, b) - 1e-12).all() and (z <= torch.maximum(a, b) + 1e-12).all()


def test_rli_is_elementwise():
    g = torch.Generator().manual_seed(0)
    a, b = torch.zeros(50, 2), torch.ones(50, 2)
    z = random_logit_interpolation(a, b, generator=g)
    assert len(torch.unique(z)) == z.numel()


def test_distribution_alignment_examples():
    p = torch.tensor([[0.3, 0.7], [0.9, 0.1]])
    e = torch.tensor([0.4, 0.6])
    assert torch.allclose(distribution_alignment(p, e, e), p)
    out = distribution_alignment(torch.tensor([[0.5, 0.5]]), torch.tensor([0.5, 0.5]), torch.tensor([0.25, 0.5]))
    assert out.tolist()[0] == pytest.approx([2 / 3, 1 / 3])


def test_distribution_alignment_zero_expectation():
    p = torch.tensor([[0.5, 0.5]])
    with pytest.raises(LossError):
        distribution_alignment(p, torch.tensor([0.5, 0.5]), torch.tensor([0.0, 1.0]), eps=0)
    assert torch.isfinite(distribution_alignment(p, torch.tensor([0.5, 0.5]), torch.tensor([0.0, 1.0]))).all()


@settings(deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_distribution_alignment_rows_sum_to_one(seed):
    g = torch.Generator().manual_seed(seed)
    p = torch.softmax(torch.randn(8, 2, generator=g) * 5, dim=1)
    e_s = torch.softmax(torch.randn(2, generator=g), 0)
    e_t = torch.softmax(torch.randn(2, generator=g), 0)
    out = distribution_alignment(p, e_s, e_t)
    assert torch.allclose(out.sum(dim=1), torch.ones(8), atol=1e-6)
    assert torch.allclose(torch.softmax(torch.randn(8, 2, generator=g), 1).sum(1), torch.ones(8), atol=1e-6)


def test_confidence_mask_examples():
    source = torch.tensor([[0.8, 0.2], [0.2, 0.8]])
    assert adamatch_confidence_mask(torch.tensor([[0.75, 0.25]]), source, 0.9).tolist() == [1]
    assert adamatch_confidence_mask(torch.tensor([[0.5, 0.5]]), source, 0.9).tolist() == [0]
    saturated = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    target = torch.tensor([[0.9, 0.1], [0.89, 0.11]])
    assert adamatch_confidence_mask(target, saturated, 0.9).tolist() == [1, 0]
    with pytest.raises(LossError):
        adamatch_confidence_mask(target, torch.zeros(0, 2), 0.9)


@given(st.lists(st.integers(50, 100), min_size=1, max_size=8), st.lists(st.integers(50, 100), min_size=1, max_size=8),
       st.integers(1, 99))
def test_confidence_mask_soundness(src, tgt, tau_pct):
    def probs(v):
        p = torch.tensor(v, dtype=torch.float64) / 100
        return torch.stack([p, 1 - p], dim=1)

    mask = adamatch_confidence_mask(probs(tgt), probs(src), tau_pct / 100)
    threshold = tau_pct / 100 * (sum(src) / 100 / len(src))
    for t, m in zip(tgt, mask.tolist()):
        if abs(t / 100 - threshold) > 1e-9:
            assert m == float(t / 100 >= threshold)


def test_mu_warmup():
    assert mu_warmup(0, 100) == 0
    assert mu_warmup(25, 100) == pytest.approx(0.5)
    assert mu_warmup(50, 100) == pytest.approx(1)
    assert mu_warmup(90, 100) == pytest.approx(1)
    with pytest.raises(LossError):
        mu_warmup(0, 0)


def _adamatch_inputs(seed=0):
    g = torch.Generator().manual_seed(seed)
    z_w, z_s = torch.randn(4, 2, generator=g), torch.randn(4, 2, generator=g)
    y = torch.tensor([0, 1, 1, 0])
    z_t = torch.randn(6, 2, generator=g, requires_grad=True)
    pseudo = torch.softmax(torch.randn(6, 2, generator=g), 1)
    return z_w, z_s, y, z_t, pseudo


def test_adamatch_mask_zero_gives_source_only():
    z_w, z_s, y, z_t, pseudo = _adamatch_inputs()
    source, target, final = adamatch_losses(z_w, z_s, y, z_t, pseudo, torch.zeros(6), 70, 100)
    assert target.item() == 0
    assert final.item() == source.item()
    expected = cross_entropy(z_w, y) + cross_entropy(z_s, y)
    assert source.item() == pytest.approx(expected.item())


def test_adamatch_step_zero_gives_source_only():
    z_w, z_s, y, z_t, pseudo = _adamatch_inputs()
    source, target, final = adamatch_losses(z_w, z_s, y, z_t, pseudo, torch.ones(6), 0, 100)
    assert target.item() > 0
    assert final.item() == source.item()


def test_adamatch_target_loss_value_and_stop_gradient():
    z_w, z_s, y, z_t, pseudo = _adamatch_inputs()
    pseudo = pseudo.clone().requires_grad_(True)
    mask = torch.tensor([1.0, 0, 1, 1, 0, 1])
    _, target, _ = adamatch_losses(z_w, z_s, y, z_t, pseudo, mask, 50, 100)
    expected = (-(pseudo * torch.log_softmax(z_t, 1)).sum(1) * mask).mean()
    assert target.item() == pytest.approx(expected.item())
    target.backward()
    assert pseudo.grad is None
    _, other, _ = adamatch_losses(z_w, z_s, y, z_t, pseudo.detach().flip(1), mask, 50, 100)
    assert other.item() != target.item()
