"""Generator, multi-scale Wasserstein critic and frozen VGG feature backbones."""
from __future__ import annotations

import hashlib
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
import torchvision

log = logging.getLogger(__name__)

WEIGHTS_DIR_ENV = "UNISHADOW_WEIGHTS_DIR"
COMPOSE_ACTIVATIONS = ("clamp", "bounded-smooth")


class BackboneError(Exception):
    """Backbone weights are missing, corrupt or do not match the pinned checksum."""


@dataclass
class GeneratorConfig:
    input_channels: int = 3
    base_width: int = 64
    num_downsamples: int = 3
    num_residual_blocks: int = 9
    pad_input: bool = True
    compose_activation: str = "clamp"

    @property
    def divisor(self) -> int:
        return 2 ** self.num_downsamples


@dataclass
class CriticConfig:
    input_channels: int = 3
    base_width: int = 64
    max_width: int = 512
    num_scales: int = 2
    layers_per_scale: int = 4


class ResidualBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1), nn.Conv2d(width, width, 3), nn.InstanceNorm2d(width), nn.ReLU(True),
            nn.ReflectionPad2d(1), nn.Conv2d(width, width, 3), nn.InstanceNorm2d(width),
        )

    def forward(self, x):
        return x + self.body(x)


class Generator(nn.Module):
    """Global encoder-decoder emitting an unbounded shadow-correction residual.

    The output head starts at zero, so an untrained generator is the identity
    once the residual is composed with its input.
    """

    def __init__(self, config: GeneratorConfig | None = None):
        super().__init__()
        self.config = cfg = config or GeneratorConfig()
        w = cfg.base_width
        layers: list[nn.Module] = [
            nn.ReflectionPad2d(3), nn.Conv2d(cfg.input_channels, w, 7), nn.InstanceNorm2d(w), nn.ReLU(True),
        ]
        for i in range(cfg.num_downsamples):
            c = w * 2 ** i
            layers += [nn.Conv2d(c, 2 * c, 3, stride=2, padding=1), nn.InstanceNorm2d(2 * c), nn.ReLU(True)]
        bottleneck = w * 2 ** cfg.num_downsamples
        layers += [ResidualBlock(bottleneck) for _ in range(cfg.num_residual_blocks)]
        for i in range(cfg.num_downsamples, 0, -1):
            c = w * 2 ** i
            layers += [
                nn.ConvTranspose2d(c, c // 2, 3, stride=2, padding=1, output_padding=1),
                nn.InstanceNorm2d(c // 2), nn.ReLU(True),
            ]
        self.head = nn.Conv2d(w, cfg.input_channels, 7)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        layers += [nn.ReflectionPad2d(3), self.head]
        self.model = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return generator_forward(self, x)


def generator_forward(gen: Generator, image: torch.Tensor) -> torch.Tensor:
    """Residual for ``image``; pads (reflect) to the downsampling divisor and crops back."""
    squeeze = image.ndim == 3
    x = image.unsqueeze(0) if squeeze else image
    h, w = x.shape[-2:]
    d = gen.config.divisor
    ph, pw = (-h) % d, (-w) % d
    if ph or pw:
        if not gen.config.pad_input:
            raise ValueError(f"spatial size {h}x{w} is not divisible by {d} and padding is disabled")
        mode = "reflect" if ph < h and pw < w else "replicate"
        x = F.pad(x, (0, pw, 0, ph), mode=mode)
    r = gen.model(x)[..., :h, :w]
    return r.squeeze(0) if squeeze else r


def compose_output(image: torch.Tensor, residual: torch.Tensor, activation: str = "clamp") -> torch.Tensor:
    """De-shadowed image: input plus residual, passed through the bounded final activation."""
    if image.shape != residual.shape:
        raise ValueError(f"shape mismatch: {tuple(image.shape)} vs {tuple(residual.shape)}")
    if activation == "clamp":
        return torch.clamp(image + residual, -1.0, 1.0)
    if activation == "bounded-smooth":
        return torch.tanh(image + residual)
    raise ValueError(f"unknown compose activation {activation!r}")


def deshadow(gen: Generator, image: torch.Tensor) -> torch.Tensor:
    return compose_output(image, generator_forward(gen, image), gen.config.compose_activation)


class Critic(nn.Module):
    """Multi-scale fully-convolutional critic returning one unbounded score map per scale."""

    def __init__(self, config: CriticConfig | None = None):
        super().__init__()
        self.config = cfg = config or CriticConfig()
        self.scales = nn.ModuleList(self._scale(cfg) for _ in range(cfg.num_scales))
        self.downsample = nn.AvgPool2d(3, stride=2, padding=1, count_include_pad=False)

    @staticmethod
    def _scale(cfg: CriticConfig) -> nn.Sequential:
        layers: list[nn.Module] = []
        c_in = cfg.input_channels
        for i in range(cfg.layers_per_scale):
            c_out = min(cfg.base_width * 2 ** i, cfg.max_width)
            layers.append(nn.Conv2d(c_in, c_out, 4, stride=2, padding=1))
            if i > 0:
                layers.append(nn.InstanceNorm2d(c_out, affine=True))
            layers.append(nn.LeakyReLU(0.2, True))
            c_in = c_out
        layers.append(nn.Conv2d(c_in, 1, 3, padding=1))
        return nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        maps = []
        for i, scale in enumerate(self.scales):
            if i:
                x = self.downsample(x)
            maps.append(scale(x))
        return maps


def critic_scores(maps: Sequence[torch.Tensor]) -> torch.Tensor:
    """Per-sample scalar score: the mean over every element of every map."""
    flat = torch.cat([m.reshape(m.shape[0], -1) for m in maps], dim=1)
    return flat.mean(dim=1)


def critic_forward(critic, image: torch.Tensor) -> list[torch.Tensor]:
    maps = critic(image)
    if isinstance(maps, torch.Tensor):
        maps = [maps]
    return list(maps)


# --- frozen feature backbones -------------------------------------------------

VGG19_PERCEPTUAL_TAPS = ("conv1_2", "conv2_2", "conv3_2", "conv4_2", "conv5_2")
VGG16_INVARIANT_TAPS = ("conv2_2",)
_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)
_VGG_CFG_KEY = {"vgg16": "D", "vgg19": "E"}


def vgg_layer_names(features: nn.Sequential) -> list[str]:
    names, stage, conv = [], 1, 0
    for m in features:
        if isinstance(m, nn.Conv2d):
            conv += 1
            names.append(f"conv{stage}_{conv}")
        elif isinstance(m, nn.ReLU):
            names.append(f"relu{stage}_{conv}")
        elif isinstance(m, nn.MaxPool2d):
            names.append(f"pool{stage}")
            stage, conv = stage + 1, 0
        else:
            names.append(type(m).__name__.lower())
    return names


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def resolve_weights(arch: str, weights: str | None) -> str | None:
    """Map a ``backbone_weights`` setting to a file path, or None for seeded random init.

    ``"auto"`` looks for ``<arch>_features.npz`` in ``$UNISHADOW_WEIGHTS_DIR``.
    """
    if weights is None or weights == "random":
        return None
    if weights == "auto":
        folder = os.environ.get(WEIGHTS_DIR_ENV)
        cand = Path(folder) / f"{arch}_features.npz" if folder else None
        if cand is None or not cand.exists():
            raise BackboneError(
                f"no pretrained {arch} weights found (set {WEIGHTS_DIR_ENV} to a directory holding "
                f"{arch}_features.npz, pass an explicit path, or use 'random' for smoke runs)")
        return str(cand)
    return weights


def _vgg_features(arch: str, seed: int) -> nn.Sequential:
    """torchvision's VGG feature stack (same layer indices), without the classifier."""
    vgg = torchvision.models.vgg
    features = vgg.make_layers(vgg.cfgs[_VGG_CFG_KEY[arch]], batch_norm=False)
    g = torch.Generator().manual_seed(seed)
    for m in features:
        if isinstance(m, nn.Conv2d):
            fan_out = m.out_channels * m.kernel_size[0] * m.kernel_size[1]
            with torch.no_grad():
                m.weight.normal_(0, (2.0 / fan_out) ** 0.5, generator=g)
                m.bias.zero_()
    return features


class FeatureBackbone(nn.Module):
    """Frozen VGG feature extractor tapping named conv outputs.

    Weights come from an ``.npz`` archive of the torchvision ``features`` state
    dict; without one the network is randomly initialised from a fixed seed.
    """

    def __init__(self, arch: str, taps: Sequence[str], weights_path: str | Path | None = None,
                 checksum: str | None = None, init_seed: int = 0):
        super().__init__()
        if arch not in _VGG_CFG_KEY:
            raise ValueError(f"unknown backbone {arch!r}")
        features = _vgg_features(arch, init_seed)
        names = vgg_layer_names(features)
        unknown = [t for t in taps if t not in names]
        if unknown:
            raise ValueError(f"unknown tap(s) for {arch}: {unknown}")
        last = max(names.index(t) for t in taps)
        self.arch = arch
        self.taps = tuple(taps)
        self.pretrained = weights_path is not None
        self.features = features[: last + 1]
        self._names = names[: last + 1]
        self._tap_idx = {names.index(t): t for t in taps}
        self._min_side = 2 ** sum(1 for n in self._names if n.startswith("pool"))
        if weights_path is not None:
            self._load(Path(weights_path), checksum)
        elif checksum:
            raise BackboneError("a checksum was pinned but no weights file was given")
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        self.register_buffer("mean", torch.tensor(_IMAGENET_MEAN).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("std", torch.tensor(_IMAGENET_STD).view(1, 3, 1, 1), persistent=False)

    def _load(self, path: Path, checksum: str | None) -> None:
        if not path.exists():
            raise BackboneError(f"backbone weights {path} not found")
        digest = file_sha256(path)
        if checksum and digest != checksum:
            raise BackboneError(f"checksum mismatch for {path}: expected {checksum}, got {digest}")
        try:
            with np.load(path) as archive:
                state = {k: torch.from_numpy(archive[k]) for k in archive.files}
        except Exception as exc:  # noqa: BLE001 - any decode failure means a corrupt file
            raise BackboneError(f"cannot read {path} (sha256 {digest}): {exc}") from exc
        own = self.features.state_dict()
        missing = [k for k in own if k not in state]
        if missing:
            raise BackboneError(f"{path} (sha256 {digest}) lacks parameters {missing[:5]}")
        self.features.load_state_dict({k: state[k] for k in own})
        log.info("loaded %s weights from %s (sha256 %s)", self.arch, path, digest)

    def train(self, mode: bool = True):
        return super().train(False)

    def forward(self, image: torch.Tensor) -> list[torch.Tensor]:
        if min(image.shape[-2:]) < self._min_side:
            raise ValueError(f"{self.arch} taps {self.taps} need sides >= {self._min_side}, "
                             f"got {tuple(image.shape[-2:])}")
        x = ((image + 1) / 2 - self.mean.to(image.dtype)) / self.std.to(image.dtype)
        out = []
        for i, layer in enumerate(self.features):
            x = layer(x)
            if i in self._tap_idx:
                out.append(x)
        return out


def backbone_features(backbone: FeatureBackbone, image: torch.Tensor) -> list[torch.Tensor]:
    return backbone(image)


def export_backbone_weights(state_dict: dict, out_path: str | Path) -> str:
    """Write VGG feature weights to a portable ``.npz``.

    Accepts a full torchvision VGG state dict (``features.*`` keys) or the state
    dict of its ``features`` module (``0.weight``, ...).  Returns the file's
    sha256 for pinning in the config.
    """
    arrays = {}
    for k, v in state_dict.items():
        if k.startswith("features."):
            arrays[k[len("features."):]] = v.detach().cpu().numpy()
    if not arrays and state_dict and all(k.split(".", 1)[0].isdigit() for k in state_dict):
        arrays = {k: v.detach().cpu().numpy() for k, v in state_dict.items()}
    if not arrays:
        raise BackboneError("state dict has neither features.* nor bare layer-index entries")
    with open(out_path, "wb") as fh:
        np.savez(fh, **arrays)
    return file_sha256(out_path)


def param_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in module.state_dict().items():
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@dataclass
class Backbones:
    perceptual: FeatureBackbone | None = None
    invariant: FeatureBackbone | None = None
    meta: dict = field(default_factory=dict)


def build_backbones(weights_vgg19: str | None = "auto", weights_vgg16: str | None = "auto",
                    checksum_vgg19: str | None = None, checksum_vgg16: str | None = None,
                    perceptual_taps: Sequence[str] = VGG19_PERCEPTUAL_TAPS,
                    need_perceptual: bool = True, need_invariant: bool = True) -> Backbones:
    out = Backbones()
    if need_perceptual:
        path = resolve_weights("vgg19", weights_vgg19)
        out.perceptual = FeatureBackbone("vgg19", perceptual_taps, path, checksum_vgg19)
    if need_invariant:
        path = resolve_weights("vgg16", weights_vgg16)
        out.invariant = FeatureBackbone("vgg16", VGG16_INVARIANT_TAPS, path, checksum_vgg16)
    for bb in (out.perceptual, out.invariant):
        if bb is not None and not bb.pretrained:
            log.warning("%s backbone is randomly initialised; feature losses are not perceptual", bb.arch)
    return out
