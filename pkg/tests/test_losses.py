import copy

import pytest
import torch
from hypothesis import given, settings, strategies as st

from unishadow.losses import (LossWeights, adversarial_d, adversarial_g, critic_mean, gradient_penalty, interpolate,
                              loss_feat, loss_id, loss_os, loss_perc, loss_sfr, total_generator_loss)
from unishadow.masking import compute_shadow_mask, invert_mask
from unishadow.networks import Critic, CriticConfig, critic_scores, deshadow, Generator, GeneratorConfig

from conftest import rand_image
from oracles import LinearCritic, central_difference_grad, rel_error


def test_default_weights():
    w = LossWeights()
    assert (w.gp, w.os, w.perc, w.sfr, w.feat, w.id) == (10, 1, 2, 5, 2, 1)
    with pytest.raises(ValueError):
        LossWeights(sfr=-1)


# --- output similarity -------------------------------------------------------

def test_os_examples(tgen):
    a = rand_image(tgen, 2, 3, 8, 8)
    assert loss_os(a, a.clone()) == 0
    assert float(loss_os(a + 0.5, a)) == pytest.approx(0.5, abs=1e-6)


def test_os_matches_elementwise_sum(tgen):
    a, b = rand_image(tgen, 2, 3, 5, 7), rand_image(tgen, 2, 3, 5, 7)
    brute = sum(abs(x - y) for x, y in zip(a.flatten().tolist(), b.flatten().tolist())) / a.numel()
    assert float(loss_os(a, b)) == pytest.approx(brute, abs=1e-6)


def test_shape_mismatch_raises():
    with pytest.raises(ValueError):
        loss_os(torch.zeros(3, 4, 4), torch.zeros(3, 4, 5))
    with pytest.raises(ValueError):
        loss_id(torch.zeros(3, 4, 4), torch.zeros(3, 5, 4))


# --- perceptual ------------------------------------------------------------------

def test_perc_identity_and_symmetry(tgen, vgg19_small):
    a, b = rand_image(tgen, 1, 3, 16, 16), rand_image(tgen, 1, 3, 16, 16)
    assert loss_perc(a, a.clone(), vgg19_small) == 0
    assert float(loss_perc(a, b, vgg19_small)) == float(loss_perc(b, a, vgg19_small))


def test_perc_single_tap_equals_plain_l1(tgen):
    from unishadow.networks import FeatureBackbone
    bb = FeatureBackbone("vgg19", ("conv2_2",))
    a, b = rand_image(tgen, 1, 3, 16, 16), rand_image(tgen, 1, 3, 16, 16)
    fa, fb = bb(a)[0], bb(b)[0]
    assert float(loss_perc(a, b, bb)) == pytest.approx(float((fa - fb).abs().mean()), rel=1e-6)


def test_perc_requires_backbone(tgen):
    with pytest.raises(ValueError):
        loss_perc(torch.zeros(1, 3, 8, 8), torch.zeros(1, 3, 8, 8), None)


# --- shadow-free region ----------------------------------------------------------

def test_sfr_identity_and_annihilating_mask(tgen):
    i_a, i_b = rand_image(tgen, 1, 3, 6, 6), rand_image(tgen, 1, 3, 6, 6)
    ones = torch.ones(1, 1, 6, 6)
    assert loss_sfr(i_a, i_a.clone(), ones, i_b, i_b.clone(), ones) == 0
    zeros = torch.zeros(1, 1, 6, 6)
    o_a, o_b = rand_image(tgen, 1, 3, 6, 6), rand_image(tgen, 1, 3, 6, 6)
    assert loss_sfr(i_a, o_a, zeros, i_b, o_b, zeros) == 0


def test_sfr_single_unmasked_pixel():
    g = 0.37
    inp = torch.zeros(1, 3, 2, 2)
    out = inp.clone()
    out[..., 1, 0] += g
    keep = torch.zeros(1, 1, 2, 2)
    keep[..., 1, 0] = 1
    same = torch.zeros(1, 3, 2, 2)
    assert float(loss_sfr(inp, out, keep, same, same, keep)) == pytest.approx(g, abs=1e-7)


def test_sfr_hand_computed_rms():
    inp = torch.zeros(1, 1 * 3, 2, 2)
    out = inp.clone()
    out[0, 0, 0, 0] = 0.3   # kept
    out[0, 1, 0, 1] = 0.4   # kept
    out[0, 2, 1, 1] = 9.0   # masked out
    keep = torch.tensor([[1.0, 1.0], [1.0, 0.0]]).view(1, 1, 2, 2)
    # 9 kept elements: squared gaps 0.09 + 0.16
    expected = ((0.09 + 0.16) / 9) ** 0.5
    zero = torch.zeros_like(inp)
    assert float(loss_sfr(inp, out, keep, zero, zero, keep)) == pytest.approx(expected, rel=1e-6)


def test_sfr_mask_shape_mismatch():
    with pytest.raises(ValueError):
        loss_sfr(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 4, 4), torch.ones(1, 1, 3, 4),
                 torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 4, 4), torch.ones(1, 1, 4, 4))


def test_sfr_gradient_finite_at_identity():
    inp = torch.rand(1, 3, 4, 4)
    out = inp.clone().requires_grad_(True)
    ones = torch.ones(1, 1, 4, 4)
    loss_sfr(inp, out, ones, inp, out, ones).backward()
    assert torch.isfinite(out.grad).all()


# --- feature ----------------------------------------------------------------------

def test_feat_identity_and_nonneg(tgen, vgg16_conv22):
    i_a, i_b = rand_image(tgen, 1, 3, 8, 8), rand_image(tgen, 1, 3, 8, 8)
    assert loss_feat(i_a, i_a.clone(), i_b, i_b.clone(), vgg16_conv22) == 0
    o_a, o_b = rand_image(tgen, 1, 3, 8, 8), rand_image(tgen, 1, 3, 8, 8)
    assert float(loss_feat(i_a, o_a, i_b, o_b, vgg16_conv22)) > 0


def test_feat_matches_separate_extraction(tgen, vgg16_conv22):
    """Independent path: run the raw torchvision-indexed layers up to conv2_2 by hand."""
    i_a, o_a, i_b, o_b = (rand_image(tgen, 1, 3, 16, 16) for _ in range(4))
    mean = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
    std = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)
    layers = list(vgg16_conv22.features)

    def conv22(x):
        x = ((x + 1) / 2 - mean) / std
        for layer in layers[:8]:  # conv1_1 relu conv1_2 relu pool conv2_1 relu conv2_2
            x = layer(x)
        return x

    oracle = (conv22(o_a) - conv22(i_a)).abs().mean() + (conv22(o_b) - conv22(i_b)).abs().mean()
    assert float(loss_feat(i_a, o_a, i_b, o_b, vgg16_conv22)) == pytest.approx(float(oracle), abs=1e-5)


def test_feat_branch_swap_invariant(tgen, vgg16_conv22):
    i_a, o_a, i_b, o_b = (rand_image(tgen, 1, 3, 8, 8) for _ in range(4))
    assert float(loss_feat(i_a, o_a, i_b, o_b, vgg16_conv22)) == pytest.approx(
        float(loss_feat(i_b, o_b, i_a, o_a, vgg16_conv22)), rel=1e-6)


# --- identity -----------------------------------------------------------------------

def test_id_examples(tgen):
    g = Generator(GeneratorConfig(base_width=4, num_downsamples=1, num_residual_blocks=1))
    sf = rand_image(tgen, 2, 3, 8, 8)
    assert loss_id(sf, deshadow(g, sf)) == 0
    interior = rand_image(tgen, 2, 3, 8, 8, margin=0.3)
    assert float(loss_id(interior, interior + 0.2)) == pytest.approx(0.2, abs=1e-6)
    brute = sum(abs(a - b) for a, b in zip(sf.flatten().tolist(), interior.flatten().tolist())) / sf.numel()
    assert float(loss_id(sf, interior)) == pytest.approx(brute, abs=1e-6)


# --- adversarial ----------------------------------------------------------------------

class ConstCritic(torch.nn.Module):
    def __init__(self, c):
        super().__init__()
        self.c = c

    def forward(self, x):
        return [torch.full((x.shape[0], 1, 2, 2), self.c), torch.full((x.shape[0], 1, 1, 1), self.c)]


def test_adversarial_g_constant_and_scaling(tgen):
    a, b = rand_image(tgen, 2, 3, 8, 8), rand_image(tgen, 2, 3, 8, 8)
    assert float(adversarial_g(ConstCritic(1.7), a, b)) == pytest.approx(-1.7)
    critic = Critic(CriticConfig(num_scales=1, layers_per_scale=2))
    base = float(adversarial_g(critic, a, b).detach())

    class Scaled(torch.nn.Module):
        def forward(self, x):
            return [3 * m for m in critic(x)]
    assert float(adversarial_g(Scaled(), a, b).detach()) == pytest.approx(3 * base, rel=1e-5)


def test_adversarial_g_from_raw_maps(tgen):
    critic = Critic(CriticConfig(num_scales=2, layers_per_scale=2))
    a, b = rand_image(tgen, 2, 3, 16, 16), rand_image(tgen, 2, 3, 16, 16)

    def per_branch(x):
        maps = critic(x)
        per_image = [torch.cat([m[i].flatten() for m in maps]).mean() for i in range(x.shape[0])]
        return sum(per_image) / len(per_image)
    expected = -(per_branch(a) + per_branch(b)) / 2
    assert float(adversarial_g(critic, a, b).detach()) == pytest.approx(float(expected.detach()), abs=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.05, 3.0))
def test_gp_linear_critic_closed_form(seed, scale):
    g = torch.Generator().manual_seed(seed)
    w = torch.randn(1, 3, 4, 4, generator=g, dtype=torch.float64)
    w = w / w.norm() * scale
    real = torch.rand(3, 3, 4, 4, generator=g, dtype=torch.float64)
    fake = torch.rand(3, 3, 4, 4, generator=g, dtype=torch.float64)
    gp = gradient_penalty(LinearCritic(w), real, fake, g)
    assert float(gp.detach()) == pytest.approx((scale - 1) ** 2, abs=1e-5)


def test_gp_unit_norm_is_zero():
    w = torch.ones(1, 3, 2, 2, dtype=torch.float64) / (12 ** 0.5)
    gp = gradient_penalty(LinearCritic(w), torch.rand(2, 3, 2, 2, dtype=torch.float64),
                          torch.rand(2, 3, 2, 2, dtype=torch.float64))
    assert float(gp.detach()) == pytest.approx(0.0, abs=1e-12)


def test_interpolation_mixes_fake_and_real():
    real, fake = torch.zeros(4, 3, 2, 2), torch.ones(4, 3, 2, 2)
    mixed, eps = interpolate(real, fake, torch.Generator().manual_seed(0))
    assert torch.allclose(mixed, eps.expand_as(mixed))
    assert torch.all((eps >= 0) & (eps <= 1)) and eps.unique().numel() == 4
    mixed, _ = interpolate(torch.zeros(2, 3, 2, 2), torch.ones(5, 3, 2, 2))
    assert mixed.shape[0] == 2


def test_gp_gradient_norm_matches_finite_differences(tgen):
    critic = Critic(CriticConfig(num_scales=1, layers_per_scale=2, base_width=4)).double()
    x = rand_image(tgen, 1, 3, 8, 8, dtype=torch.float64).requires_grad_(True)
    (auto,) = torch.autograd.grad(critic_scores(critic(x)).sum(), x)
    numeric = central_difference_grad(lambda z: critic_scores(critic(z)).sum(), x)
    assert abs(float(auto.norm()) - float(numeric.norm())) / float(numeric.norm()) < 1e-3


def test_adversarial_d_constant_critic(tgen):
    real, fake = rand_image(tgen, 2, 3, 4, 4), rand_image(tgen, 2, 3, 4, 4)

    class Const(torch.nn.Module):
        def __init__(self):
            super().__init__()
            self.c = torch.nn.Parameter(torch.tensor(2.5))

        def forward(self, x):
            return [self.c.expand(x.shape[0], 1, 1, 1)]
    l_d, w, gp = adversarial_d(Const(), real, fake, 10.0, tgen)
    assert float(w.detach()) == 0
    assert float(gp.detach()) == 1.0  # zero input gradient: (0 - 1)^2
    assert float(l_d.detach()) == pytest.approx(10 * float(gp.detach()))


def test_adversarial_d_without_penalty_equals_wasserstein(tgen):
    critic = Critic(CriticConfig(num_scales=1, layers_per_scale=2))
    real, fake = rand_image(tgen, 2, 3, 8, 8), rand_image(tgen, 4, 3, 8, 8)
    l_d, w, _ = adversarial_d(critic, real, fake, 0.0, tgen)
    assert float(l_d.detach()) == float(w.detach())
    raw_fake = critic_scores(critic(fake)).mean()
    raw_real = critic_scores(critic(real)).mean()
    assert float(w.detach()) == pytest.approx(float((raw_fake - raw_real).detach()), abs=1e-6)


# --- total ------------------------------------------------------------------------------

NAMES = ("os", "perc", "sfr", "feat", "id")


def test_total_examples():
    w = LossWeights()
    zeros = dict.fromkeys(NAMES, 0.0)
    assert total_generator_loss(-0.7, zeros, w) == -0.7
    ones = dict.fromkeys(NAMES, 1.0)
    assert total_generator_loss(0.25, ones, w) == pytest.approx(0.25 + 11)
    assert total_generator_loss(0.25, {"os": 1.0}, w) == pytest.approx(1.25)


@pytest.mark.parametrize("name", NAMES)
def test_total_linear_in_each_weight(name):
    terms = {"os": 0.3, "perc": 1.1, "sfr": 0.7, "feat": 2.0, "id": 0.05}
    values = []
    for lam in (0.0, 1.0, 2.0):
        w = LossWeights(**{name: lam})
        values.append(total_generator_loss(-1.0, terms, w))
    assert values[2] - values[1] == pytest.approx(values[1] - values[0]) == pytest.approx(terms[name])


def test_ablation_zero_weight_removes_term():
    terms = dict(zip(NAMES, (0.3, 1.1, 0.7, 2.0, 0.05)))
    w = LossWeights(perc=0, sfr=0, feat=0, id=0)
    assert total_generator_loss(-1.0, terms, w) == pytest.approx(-1.0 + 0.3)


# --- finite-difference gradient checks -----------------------------------------------------

@pytest.fixture(scope="module")
def double_backbones(vgg19_small, vgg16_conv22):
    return copy.deepcopy(vgg19_small).double(), copy.deepcopy(vgg16_conv22).double()


def _gradcheck(fn, x):
    x = x.detach().clone().requires_grad_(True)
    (auto,) = torch.autograd.grad(fn(x), x)
    numeric = central_difference_grad(fn, x)
    return rel_error(auto, numeric)


def test_subloss_gradients_match_finite_differences(tgen, double_backbones):
    vgg19, vgg16 = double_backbones
    shape = (1, 3, 8, 8)
    i_a, i_b, o_b = (rand_image(tgen, *shape, dtype=torch.float64) for _ in range(3))
    o_a = rand_image(tgen, *shape, dtype=torch.float64)
    keep_a = invert_mask(compute_shadow_mask(i_a, o_a))
    keep_b = invert_mask(compute_shadow_mask(i_b, o_b))
    critic = Critic(CriticConfig(num_scales=1, layers_per_scale=2, base_width=4)).double()
    checks = {
        "os": lambda x: loss_os(x, o_b),
        "perc": lambda x: loss_perc(x, o_b, vgg19),
        "sfr": lambda x: loss_sfr(i_a, x, keep_a, i_b, o_b, keep_b),
        "feat": lambda x: loss_feat(i_a, x, i_b, o_b, vgg16),
        "id": lambda x: loss_id(i_a, x),
        "g": lambda x: adversarial_g(critic, x, o_b),
    }
    for name, fn in checks.items():
        assert _gradcheck(fn, o_a) < 1e-3, name
