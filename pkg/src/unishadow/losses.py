"""Generator sub-losses and WGAN-GP critic objectives.

All L1 terms use mean reduction.  The shadow-free-region term is a root mean
square over the elements kept by the inverted mask.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import torch

from .networks import FeatureBackbone, critic_forward, critic_scores


@dataclass
class LossWeights:
    os: float = 1.0
    perc: float = 2.0
    sfr: float = 5.0
    feat: float = 2.0
    id: float = 1.0
    gp: float = 10.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be non-negative")


@dataclass
class LossBreakdown:
    """Per-step loss record; terms that were not computed stay None."""

    l_g: float | None = None
    l_os: float | None = None
    l_perc: float | None = None
    l_sfr: float | None = None
    l_feat: float | None = None
    l_id: float | None = None
    total: float | None = None
    l_d: float | None = None
    wasserstein: float | None = None
    gp: float | None = None
    # raw critic means behind the Wasserstein estimate
    d_fake: float | None = None
    d_real: float | None = None

    def as_dict(self) -> dict:
        return asdict(self)


def _check_shapes(*tensors: torch.Tensor) -> None:
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ValueError(f"shape mismatch: {tuple(shape)} vs {tuple(t.shape)}")


def loss_os(out_a: torch.Tensor, out_b: torch.Tensor) -> torch.Tensor:
    """Output similarity between the two composed branch outputs."""
    _check_shapes(out_a, out_b)
    return (out_a - out_b).abs().mean()


def _batched(x: torch.Tensor) -> torch.Tensor:
    return x if x.dim() == 4 else x.unsqueeze(0)


def loss_perc(out_a: torch.Tensor, out_b: torch.Tensor, backbone: FeatureBackbone) -> torch.Tensor:
    _check_shapes(out_a, out_b)
    if backbone is None:
        raise ValueError("perceptual loss needs a backbone")
    n = out_a.shape[0] if out_a.dim() == 4 else 1
    feats = backbone(torch.cat([_batched(out_a), _batched(out_b)]))  # one pass for both branches
    return sum((f[:n] - f[n:]).abs().mean() for f in feats)


def _masked_rms(inp: torch.Tensor, out: torch.Tensor, keep: torch.Tensor) -> torch.Tensor:
    if keep.shape[-2:] != inp.shape[-2:]:
        raise ValueError(f"mask shape {tuple(keep.shape)} does not match image {tuple(inp.shape)}")
    keep = keep.expand_as(inp)
    sq = ((keep * out - keep * inp) ** 2).sum()
    count = keep.sum()
    ms = sq / count.clamp_min(1)
    # sqrt has an infinite slope at 0; route exact zeros around it so gradients stay finite
    nonzero = ms > 0
    return torch.where(nonzero, torch.sqrt(torch.where(nonzero, ms, torch.ones_like(ms))), torch.zeros_like(ms))


def loss_sfr(inp_a, out_a, keep_a, inp_b, out_b, keep_b) -> torch.Tensor:
    """Shadow-free-region fidelity; ``keep_*`` are the inverted Otsu masks."""
    _check_shapes(inp_a, out_a)
    _check_shapes(inp_b, out_b)
    return _masked_rms(inp_a, out_a, keep_a) + _masked_rms(inp_b, out_b, keep_b)


def loss_feat(inp_a, out_a, inp_b, out_b, backbone: FeatureBackbone) -> torch.Tensor:
    """conv2_2 feature consistency between each branch's input and output."""
    _check_shapes(inp_a, out_a)
    _check_shapes(inp_b, out_b)
    if backbone is None:
        raise ValueError("feature loss needs a backbone")
    parts = [_batched(t) for t in (out_a, inp_a, out_b, inp_b)]
    sizes = [t.shape[0] for t in parts]
    total = 0
    for f in backbone(torch.cat(parts)):
        fo_a, fi_a, fo_b, fi_b = torch.split(f, sizes)
        total = total + (fo_a - fi_a).abs().mean() + (fo_b - fi_b).abs().mean()
    return total


def loss_id(inp_sf: torch.Tensor, out_sf: torch.Tensor) -> torch.Tensor:
    _check_shapes(inp_sf, out_sf)
    return (inp_sf - out_sf).abs().mean()


def critic_mean(critic, images: torch.Tensor) -> torch.Tensor:
    return critic_scores(critic_forward(critic, images)).mean()


def adversarial_g(critic, out_a: torch.Tensor, out_b: torch.Tensor) -> torch.Tensor:
    return -(critic_mean(critic, out_a) + critic_mean(critic, out_b)) / 2


def interpolate(real: torch.Tensor, fake: torch.Tensor, generator: torch.Generator | None = None):
    """Random per-sample mix ``eps * fake + (1 - eps) * real`` with ``eps ~ U(0, 1)``.

    Mismatched batch sizes are truncated to the smaller one.
    """
    n = min(real.shape[0], fake.shape[0])
    real, fake = real[:n], fake[:n]
    _check_shapes(real, fake)
    eps = torch.rand((n,) + (1,) * (real.ndim - 1), generator=generator, dtype=real.dtype)
    eps = eps.to(real.device)
    return eps * fake + (1 - eps) * real, eps


def gradient_penalty(critic, real: torch.Tensor, fake: torch.Tensor,
                     generator: torch.Generator | None = None) -> torch.Tensor:
    mixed, _ = interpolate(real.detach(), fake.detach(), generator)
    mixed.requires_grad_(True)
    scores = critic_scores(critic_forward(critic, mixed))
    (grad,) = torch.autograd.grad(scores.sum(), mixed, create_graph=True, materialize_grads=True)
    norms = grad.reshape(grad.shape[0], -1).norm(2, dim=1)
    return ((norms - 1) ** 2).mean()


def adversarial_d(critic, real: torch.Tensor, fake: torch.Tensor, lambda_gp: float,
                  generator: torch.Generator | None = None):
    """Return ``(l_d, wasserstein_estimate, gp)``.  ``fake`` must already be detached."""
    w = critic_mean(critic, fake) - critic_mean(critic, real)
    gp = gradient_penalty(critic, real, fake, generator)
    return w + lambda_gp * gp, w, gp


def total_generator_loss(l_g, terms: dict, weights: LossWeights):
    """Weighted total ``l_g + sum(lambda_x * l_x)``; ``terms`` maps os/perc/sfr/feat/id to losses.

    Missing or None terms are skipped, which is how disabled losses drop out.
    """
    total = l_g
    for name in ("os", "perc", "sfr", "feat", "id"):
        value = terms.get(name)
        if value is not None:
            total = total + getattr(weights, name) * value
    return total
