"""Training configuration and its flat ``key = value`` file format.

Lines are ``key = value``; ``#`` starts a comment.  Every :class:`TrainConfig`
field is addressable.  Booleans accept true/false/yes/no/1/0.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .losses import LossWeights
from .networks import COMPOSE_ACTIVATIONS, CriticConfig, GeneratorConfig


class ConfigError(Exception):
    pass


@dataclass
class TrainConfig:
    # data
    data_root: str = ""
    layout: str = "istd"
    image_width: int = 0  # 0 keeps native resolution
    image_height: int = 0
    val_fraction: float = 0.1
    reference_dir: str = ""  # empty: use the training split's shadow-free images
    # optimisation
    epochs: int = 30
    lr: float = 5e-4
    lr_step: int = 10
    lr_gamma: float = 0.1
    adam_beta1: float = 0.0
    adam_beta2: float = 0.9
    d_steps_per_g: int = 5
    batch_size: int = 1
    seed: int = 0
    deterministic: bool = True
    max_steps: int = 0  # cap on generator steps, 0 = no cap
    steps_per_epoch: int = 0  # 0 = one pass over all pairs
    checkpoint_every: int = 0  # extra checkpoints every N generator steps
    select_best: bool = True
    # loss weights and ablation toggles
    lambda_os: float = 1.0
    lambda_perc: float = 2.0
    lambda_sfr: float = 5.0
    lambda_feat: float = 2.0
    lambda_id: float = 1.0
    lambda_gp: float = 10.0
    use_os: bool = True
    use_perc: bool = True
    use_sfr: bool = True
    use_feat: bool = True
    use_id: bool = True
    # architecture
    gen_base_width: int = 64
    gen_downsamples: int = 3
    gen_res_blocks: int = 9
    compose_activation: str = "clamp"
    critic_base_width: int = 64
    critic_scales: int = 2
    critic_layers: int = 4
    # backbones: "auto", "random" or a path to an .npz archive
    backbone_vgg19: str = "auto"
    backbone_vgg16: str = "auto"
    checksum_vgg19: str = ""
    checksum_vgg16: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.d_steps_per_g < 1:
            raise ConfigError("d_steps_per_g must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 1 or self.lr_step < 1:
            raise ConfigError("batch_size, epochs and lr_step must be >= 1")
        if self.compose_activation not in COMPOSE_ACTIVATIONS:
            raise ConfigError(f"compose_activation must be one of {COMPOSE_ACTIVATIONS}")
        if (self.image_width > 0) != (self.image_height > 0):
            raise ConfigError("set both image_width and image_height, or neither")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in [0, 1)")
        self.loss_weights  # raises on negative weights

    @property
    def loss_weights(self) -> LossWeights:
        try:
            return LossWeights(
                os=self.lambda_os if self.use_os else 0.0,
                perc=self.lambda_perc if self.use_perc else 0.0,
                sfr=self.lambda_sfr if self.use_sfr else 0.0,
                feat=self.lambda_feat if self.use_feat else 0.0,
                id=self.lambda_id if self.use_id else 0.0,
                gp=self.lambda_gp,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def image_size(self) -> tuple[int, int] | None:
        return (self.image_width, self.image_height) if self.image_width > 0 else None

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(base_width=self.gen_base_width, num_downsamples=self.gen_downsamples,
                               num_residual_blocks=self.gen_res_blocks,
                               compose_activation=self.compose_activation)

    def critic_config(self) -> CriticConfig:
        return CriticConfig(base_width=self.critic_base_width, num_scales=self.critic_scales,
                            layers_per_scale=self.critic_layers)

    def lr_at_epoch(self, epoch: int) -> float:
        return self.lr * self.lr_gamma ** (epoch // self.lr_step)

    # --- serialisation ---------------------------------------------------------

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        return cls(**values)

    def dumps(self) -> str:
        lines = [f"{k} = {_format(v)}" for k, v in self.to_dict().items()]
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    def with_overrides(self, overrides: dict[str, str]) -> "TrainConfig":
        values = self.to_dict()
        values.update(coerce_values(overrides))
        return TrainConfig.from_dict(values)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


_TYPES = {f.name: f.type for f in fields(TrainConfig)}
_TRUE = {"true", "yes", "1", "on"}
_FALSE = {"false", "no", "0", "off"}


def coerce(key: str, raw: str):
    if key not in _TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _TYPES[key]
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r} (expected {kind})") from None
    return raw


def coerce_values(values: dict[str, str]) -> dict:
    return {k: coerce(k, v) for k, v in values.items()}


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def load_config(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> TrainConfig:
    """Resolve defaults < config file < overrides."""
    values: dict[str, str] = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        values.update(parse_config_text(text))
    values.update(overrides or {})
    return TrainConfig.from_dict(coerce_values(values))
