"""Dataclass configs for the backbone, token modulation, optimiser and runs.

Every config round-trips through ``to_dict``/``from_dict`` so a persisted
``config.json`` reproduces a run exactly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from fractions import Fraction

from .errors import ConfigError

VARIANTS = ("none", "full", "push_tail_only", "weighted_avg", "loss_constraint")
METRICS = ("cosine", "euclidean")


def floor_ratio(n: int, ratio: float) -> int:
    """``floor(n * ratio)`` evaluated on the decimal value of ``ratio``.

    Plain float multiplication gives e.g. 100 * 0.29 = 28.999...; going through
    the shortest decimal repr avoids that.
    """
    return int(Fraction(repr(float(ratio))) * n)


def ratios_fit(rho: float, gamma: float) -> bool:
    """True when head and tail ratios can never overlap (rho + gamma <= 1)."""
    return Fraction(repr(float(rho))) + Fraction(repr(float(gamma))) <= 1


@dataclass(frozen=True)
class VitConfig:
    image_size: int = 32
    patch_size: int = 8
    depth: int = 6
    width: int = 64
    heads: int = 4
    text_dim: int = 48
    n_classes_max: int = 12
    mlp_ratio: int = 2
    ln_eps: float = 1e-5
    tau: float = 0.01

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.patch_size < 1 or self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.n_patches < 4:
            raise ConfigError(f"need at least 4 patches, got {self.n_patches}")
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} not divisible by heads {self.heads}")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def seq_len(self) -> int:
        return self.n_patches + 1


def default_alpha_init(depth: int, value: float = 0.8) -> list[float]:
    """Pull strength ``value`` at block round(8 * depth / 12), zero elsewhere.

    Maps the 12-block position 8 onto a shallower stack.
    """
    out = [0.0] * depth
    out[min(depth - 1, round(8 * depth / 12))] = value
    return out


@dataclass(frozen=True)
class AthaConfig:
    variant: str = "full"
    metric: str = "cosine"
    rho: float = 0.1
    gamma: float = 0.1
    learnable: bool = True
    # None -> default schedule for the backbone depth
    alpha_init: tuple | None = None
    beta_init: float | tuple = 0.01
    lambda_pull: float = 0.1
    lambda_push: float = 0.1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.metric not in METRICS:
            raise ConfigError(f"unknown metric {self.metric!r}; expected one of {METRICS}")
        if not (0.0 <= self.rho < 1.0 and 0.0 <= self.gamma < 1.0):
            raise ConfigError(f"rho/gamma must lie in [0, 1): rho={self.rho}, gamma={self.gamma}")
        if not ratios_fit(self.rho, self.gamma):
            raise ConfigError(f"rho + gamma must be <= 1, got {self.rho} + {self.gamma}")
        if self.alpha_init is not None:
            object.__setattr__(self, "alpha_init", tuple(float(a) for a in self.alpha_init))
        if isinstance(self.beta_init, list):
            object.__setattr__(self, "beta_init", tuple(float(b) for b in self.beta_init))

    def alphas(self, depth: int) -> list[float]:
        if self.alpha_init is None:
            return default_alpha_init(depth)
        if len(self.alpha_init) != depth:
            raise ConfigError(f"alpha_init has {len(self.alpha_init)} entries for depth {depth}")
        return list(self.alpha_init)

    def betas(self, depth: int) -> list[float]:
        if isinstance(self.beta_init, tuple):
            if len(self.beta_init) != depth:
                raise ConfigError(f"beta_init has {len(self.beta_init)} entries for depth {depth}")
            return list(self.beta_init)
        return [float(self.beta_init)] * depth

    @property
    def modulates(self) -> bool:
        return self.variant in ("full", "push_tail_only", "weighted_avg")


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 2e-3
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 100
    lora_rank: int = 4
    lora_scale: float = 1.0
    augment: bool = True
    crop_padding: int = 4


@dataclass(frozen=True)
class EpisodeConfig:
    n_way: int = 5
    k_shot: int = 5
    m_query: int = 15
    episodes: int = 400
    # episodes fine-tuned together in one batched computation
    group_size: int = 10

    def __post_init__(self):
        if min(self.n_way, self.k_shot, self.m_query, self.group_size) < 1 or self.episodes < 0:
            raise ConfigError(f"invalid episode protocol {self}")


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 2e-3
    weight_decay: float = 1e-2
    val_fraction: float = 0.2
    target_accuracy: float = 0.95
    # weight of the per-patch-token classification term (0 disables)
    token_align: float = 0.0


@dataclass
class RunConfig:
    vit: VitConfig = field(default_factory=VitConfig)
    atha: AthaConfig = field(default_factory=AthaConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    episode: EpisodeConfig = field(default_factory=EpisodeConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    seed: int = 0
    run_tag: str = "run"
    ckpt: str | None = None
    target: str | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        kinds = {"vit": VitConfig, "atha": AthaConfig, "optim": OptimConfig,
                 "episode": EpisodeConfig, "pretrain": PretrainConfig}
        kwargs = {}
        for key, kind in kinds.items():
            if key in d:
                kwargs[key] = _build(kind, d.pop(key))
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        return cls(**kwargs, **d)


def _build(kind, values: dict):
    names = {f.name for f in dataclasses.fields(kind)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown {kind.__name__} keys: {sorted(unknown)}")
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    return kind(**values)


def replace(cfg, **changes):
    return dataclasses.replace(cfg, **changes)
