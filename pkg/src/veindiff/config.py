"""Training configuration and its flat ``key = value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

from .errors import ConfigError


@dataclass
class TrainConfig:
    root: str = "data"
    num_classes: int = 12
    samples_per_session: int = 6
    image_h: int = 128
    image_w: int = 256
    batch_size: int = 4
    lr_seg: float = 1e-4
    lr_denoise: float = 1e-3
    weight_decay: float = 1e-2
    pretrain_epochs: int = 50
    epochs: int = 500
    T: int = 100
    beta1: float = 1e-4
    betaT: float = 0.02
    lam: float = 0.5
    alpha: float = 0.8
    circle_gamma: float = 128.0
    circle_delta_p: float = 0.95
    circle_delta_n: float = 0.05
    auth_ce_weight: float = 1.0
    w_seg: float = 1.0
    w_auth: float = 1.0
    w_diff: float = 1.0
    latent_dim: int = 784
    tokens: int = 16
    heads: int = 7
    blocks: int = 3
    diffusion_draws: int = 4
    use_diffusion: bool = True
    eta: float = 0.0
    augment: bool = True
    deterministic: bool = True
    seed: int = 0

    @property
    def joint_epochs(self) -> int:
        return self.epochs - self.pretrain_epochs

    @property
    def loss_weights(self) -> tuple[float, float, float]:
        return (self.w_seg, self.w_auth, self.w_diff)

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Desk-scale preset: 30 pretrain epochs followed by 200 joint epochs.

        Batches hold six same-class pairs instead of two, which the circle loss
        needs to shape the verification embedding in so few epochs.
        """
        base = dict(pretrain_epochs=30, epochs=230, batch_size=12)
        base.update(overrides)
        return cls(**base).validated()

    def validated(self) -> "TrainConfig":
        positive = ("num_classes", "samples_per_session", "batch_size", "lr_seg", "lr_denoise", "T",
                    "latent_dim", "tokens", "heads", "blocks", "circle_gamma", "diffusion_draws")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        nonneg = ("weight_decay", "pretrain_epochs", "lam", "alpha", "auth_ce_weight",
                  "w_seg", "w_auth", "w_diff", "eta")
        for name in nonneg:
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.epochs < self.pretrain_epochs:
            raise ConfigError("epochs counts pretraining too and must be >= pretrain_epochs")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 for pair losses and batch norm")
        return self

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes).validated()

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))


def _coerce(kind, raw: str, key: str):
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


FIELD_TYPES = {f.name: {"int": int, "float": float, "bool": bool, "str": str}[f.type] for f in fields(TrainConfig)}


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        if key not in FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(FIELD_TYPES[key], raw.strip(), key)
    return values


def load_config(path: str | None = None, overrides: dict | None = None) -> TrainConfig:
    values = {}
    if path is not None:
        try:
            with open(path) as fh:
                values.update(parse_config_text(fh.read()))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    for key, raw in (overrides or {}).items():
        if key not in FIELD_TYPES:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = raw if not isinstance(raw, str) else _coerce(FIELD_TYPES[key], raw, key)
    return TrainConfig(**values).validated()
