"""Parameter counts and train-time GFLOPS estimates from architecture configs.

Counting conventions:

* convolution cost is ``c_out * c_in * k^2`` MACs per output position
  (transposed convolutions: per *input* position), 1 MAC = 2 FLOPs, biases free;
* normalisation, activation, pooling and residual additions cost 1 FLOP per
  element they produce (pooling: one per window element);
* backward ~ 2x forward, so a training pass costs 3x a forward pass;
* a generator iteration runs ``d_steps_per_g`` critic iterations.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import torch.nn as nn

from .networks import CriticConfig, GeneratorConfig

BACKWARD_FACTOR = 2.0

VGG_CFG = {
    "vgg16": [64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M"],
    "vgg19": [64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M", 512, 512, 512, 512, "M",
              512, 512, 512, 512, "M"],
}


@dataclass(frozen=True)
class Layer:
    name: str
    kind: str  # conv | convT | norm | act | pool | add
    c_in: int
    c_out: int
    k: int = 1
    stride: int = 1
    bias: bool = True
    affine: bool = False
    in_hw: tuple[int, int] = (0, 0)
    out_hw: tuple[int, int] = (0, 0)

    @property
    def params(self) -> int:
        if self.kind in ("conv", "convT"):
            return self.c_out * self.c_in * self.k * self.k + (self.c_out if self.bias else 0)
        if self.kind == "norm" and self.affine:
            return 2 * self.c_out
        return 0

    @property
    def macs(self) -> int:
        if self.kind == "conv":
            return self.c_out * self.c_in * self.k ** 2 * self.out_hw[0] * self.out_hw[1]
        if self.kind == "convT":
            return self.c_out * self.c_in * self.k ** 2 * self.in_hw[0] * self.in_hw[1]
        return 0

    @property
    def flops(self) -> int:
        if self.kind in ("conv", "convT"):
            return 2 * self.macs
        per = self.k ** 2 if self.kind == "pool" else 1
        return per * self.c_out * self.out_hw[0] * self.out_hw[1]


def _conv_out(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def generator_layers(cfg: GeneratorConfig, hw: tuple[int, int] = (480, 640)) -> list[Layer]:
    d = cfg.divisor
    h, w = (math.ceil(hw[0] / d) * d, math.ceil(hw[1] / d) * d) if cfg.pad_input else hw
    c = cfg.base_width
    layers = [Layer("ingest", "conv", cfg.input_channels, c, 7, in_hw=(h + 6, w + 6), out_hw=(h, w)),
              Layer("ingest.norm", "norm", c, c, out_hw=(h, w)), Layer("ingest.relu", "act", c, c, out_hw=(h, w))]
    for i in range(cfg.num_downsamples):
        hh, ww = _conv_out(h, 3, 2, 1), _conv_out(w, 3, 2, 1)
        layers += [Layer(f"down{i}", "conv", c, 2 * c, 3, 2, in_hw=(h, w), out_hw=(hh, ww)),
                   Layer(f"down{i}.norm", "norm", 2 * c, 2 * c, out_hw=(hh, ww)),
                   Layer(f"down{i}.relu", "act", 2 * c, 2 * c, out_hw=(hh, ww))]
        h, w, c = hh, ww, 2 * c
    for i in range(cfg.num_residual_blocks):
        hw_ = (h, w)
        layers += [Layer(f"res{i}.conv1", "conv", c, c, 3, in_hw=(h + 2, w + 2), out_hw=hw_),
                   Layer(f"res{i}.norm1", "norm", c, c, out_hw=hw_),
                   Layer(f"res{i}.relu", "act", c, c, out_hw=hw_),
                   Layer(f"res{i}.conv2", "conv", c, c, 3, in_hw=(h + 2, w + 2), out_hw=hw_),
                   Layer(f"res{i}.norm2", "norm", c, c, out_hw=hw_),
                   Layer(f"res{i}.add", "add", c, c, out_hw=hw_)]
    for i in range(cfg.num_downsamples):
        hh, ww = 2 * h, 2 * w
        layers += [Layer(f"up{i}", "convT", c, c // 2, 3, 2, in_hw=(h, w), out_hw=(hh, ww)),
                   Layer(f"up{i}.norm", "norm", c // 2, c // 2, out_hw=(hh, ww)),
                   Layer(f"up{i}.relu", "act", c // 2, c // 2, out_hw=(hh, ww))]
        h, w, c = hh, ww, c // 2
    layers.append(Layer("head", "conv", c, cfg.input_channels, 7, in_hw=(h + 6, w + 6), out_hw=(h, w)))
    return layers


def critic_layers(cfg: CriticConfig, hw: tuple[int, int] = (480, 640)) -> list[Layer]:
    layers = []
    h, w = hw
    for s in range(cfg.num_scales):
        if s:
            hh, ww = _conv_out(h, 3, 2, 1), _conv_out(w, 3, 2, 1)
            layers.append(Layer(f"s{s}.pool", "pool", cfg.input_channels, cfg.input_channels, 3, 2,
                                in_hw=(h, w), out_hw=(hh, ww)))
            h, w = hh, ww
        ch, cw, c_in = h, w, cfg.input_channels
        for i in range(cfg.layers_per_scale):
            c_out = min(cfg.base_width * 2 ** i, cfg.max_width)
            oh, ow = _conv_out(ch, 4, 2, 1), _conv_out(cw, 4, 2, 1)
            layers.append(Layer(f"s{s}.conv{i}", "conv", c_in, c_out, 4, 2, in_hw=(ch, cw), out_hw=(oh, ow)))
            if i > 0:
                layers.append(Layer(f"s{s}.norm{i}", "norm", c_out, c_out, affine=True, out_hw=(oh, ow)))
            layers.append(Layer(f"s{s}.lrelu{i}", "act", c_out, c_out, out_hw=(oh, ow)))
            ch, cw, c_in = oh, ow, c_out
        layers.append(Layer(f"s{s}.score", "conv", c_in, 1, 3, in_hw=(ch, cw), out_hw=(ch, cw)))
    return layers


def vgg_layers(arch: str, last_conv: str, hw: tuple[int, int] = (480, 640)) -> list[Layer]:
    """VGG feature layers up to and including the conv named ``last_conv`` (e.g. ``conv2_2``)."""
    layers = []
    h, w = hw
    c_in, stage, idx = 3, 1, 0
    for v in VGG_CFG[arch]:
        if v == "M":
            layers.append(Layer(f"pool{stage}", "pool", c_in, c_in, 2, 2, in_hw=(h, w), out_hw=(h // 2, w // 2)))
            h, w, stage, idx = h // 2, w // 2, stage + 1, 0
            continue
        idx += 1
        name = f"conv{stage}_{idx}"
        layers += [Layer(name, "conv", c_in, v, 3, in_hw=(h + 2, w + 2), out_hw=(h, w)),
                   Layer(f"relu{stage}_{idx}", "act", v, v, out_hw=(h, w))]
        c_in = v
        if name == last_conv:
            return layers[:-1]
    raise ValueError(f"{arch} has no layer {last_conv}")


def count_parameters(obj) -> int:
    """Exact parameter count of a config (via its layer table) or an instantiated module."""
    if isinstance(obj, nn.Module):
        return sum(p.numel() for p in obj.parameters())
    if isinstance(obj, GeneratorConfig):
        return sum(l.params for l in generator_layers(obj))
    if isinstance(obj, CriticConfig):
        return sum(l.params for l in critic_layers(obj))
    if isinstance(obj, (list, tuple)):
        return sum(l.params for l in obj)
    raise TypeError(f"cannot count parameters of {type(obj).__name__}")


def estimate_gflops(obj, hw: tuple[int, int] = (480, 640)) -> float:
    """Forward-pass GFLOPS for one image of size ``hw`` (height, width)."""
    if isinstance(obj, GeneratorConfig):
        layers = generator_layers(obj, hw)
    elif isinstance(obj, CriticConfig):
        layers = critic_layers(obj, hw)
    else:
        layers = list(obj)
    return sum(l.flops for l in layers) / 1e9


@dataclass
class ProfileReport:
    resolution: tuple[int, int]
    generator_params: int
    critic_params: int
    total_params: int
    forward_gflops_g: float
    forward_gflops_d: float
    train_step_gflops: float
    backbone_gflops_per_g_step: float
    train_step_gflops_with_backbones: float
    d_steps_per_g: int
    backward_factor: float = BACKWARD_FACTOR
    convention: str = ("train_step = (1 + backward_factor) * (forward_G + d_steps_per_g * forward_D) per image; "
                       "backbones run 2x VGG-19 and 4x VGG-16 forwards per generator step, backward through "
                       "the two output images of each")

    def to_dict(self) -> dict:
        return asdict(self)


def profile(gen_cfg: GeneratorConfig | None = None, critic_cfg: CriticConfig | None = None,
            hw: tuple[int, int] = (480, 640), d_steps_per_g: int = 5,
            perceptual_last: str = "conv5_2", invariant_last: str = "conv2_2") -> ProfileReport:
    gen_cfg = gen_cfg or GeneratorConfig()
    critic_cfg = critic_cfg or CriticConfig()
    g_params, d_params = count_parameters(gen_cfg), count_parameters(critic_cfg)
    fg, fd = estimate_gflops(gen_cfg, hw), estimate_gflops(critic_cfg, hw)
    train = (1 + BACKWARD_FACTOR) * (fg + d_steps_per_g * fd)
    v19 = estimate_gflops(vgg_layers("vgg19", perceptual_last, hw))
    v16 = estimate_gflops(vgg_layers("vgg16", invariant_last, hw))
    backbone = v19 * (2 + 2 * BACKWARD_FACTOR) + v16 * (4 + 2 * BACKWARD_FACTOR)
    return ProfileReport(hw, g_params, d_params, g_params + d_params, fg, fd, train, backbone,
                         train + backbone, d_steps_per_g)


def read_comparison(path: str | Path) -> list[dict]:
    """CSV with columns ``name,total_params,train_gflops`` and optionally ``rmse_all``."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    required = {"name", "total_params", "train_gflops"}
    if rows and not required <= set(rows[0]):
        raise ValueError(f"comparison file needs columns {sorted(required)}")
    return rows


def comparison_table(report: ProfileReport, others: list[dict], name: str = "this model") -> str:
    rows = [(name, report.total_params, report.train_step_gflops, "")]
    rows += [(r["name"], int(float(r["total_params"])), float(r["train_gflops"]), r.get("rmse_all", ""))
             for r in others]
    lines = [f"{'model':<24}{'params (M)':>12}{'train GFLOPS':>14}{'RMSE(A)':>10}"]
    for n, p, g, e in sorted(rows, key=lambda r: r[2]):
        lines.append(f"{n:<24}{p / 1e6:>12.2f}{g:>14.1f}{e:>10}")
    return "\n".join(lines)
