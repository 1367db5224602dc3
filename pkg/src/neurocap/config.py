"""Run configuration: model dimensions, per-stage hyperparameters, freeze
policies, and a JSON round trip stable enough to echo byte-exactly into
checkpoints."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace

from .align import LossWeights
from .nn import BlockConfig
from .tensor import ParameterError

STAGES = ("pretrain", "align", "finetune_qa")
MODES = ("tri-modal", "fmri-text-only")
FREEZE_KINDS = ("none", "frozen_whole", "frozen_partly")


@dataclass(frozen=True)
class FreezePolicy:
    """What the fMRI encoder does during alignment: train fully, stay frozen,
    or train only its last k blocks."""

    kind: str = "none"
    k_trainable: int = 0

    def __post_init__(self):
        if self.kind not in FREEZE_KINDS:
            raise ParameterError(f"freeze kind must be one of {FREEZE_KINDS}, "
                                 f"got {self.kind!r}")
        if self.kind == "frozen_partly" and self.k_trainable < 1:
            raise ParameterError("frozen_partly needs k_trainable >= 1")
        if self.kind != "frozen_partly" and self.k_trainable != 0:
            raise ParameterError(f"k_trainable only applies to frozen_partly")


def default_tail_blocks(layers: int) -> int:
    """Partial-freeze default, scaled down from training the last 10 of 24
    blocks at full size: ceil(layers * 10/24)."""
    if layers < 1:
        raise ParameterError(f"layers must be >= 1, got {layers}")
    return math.ceil(layers * 10 / 24)


@dataclass(frozen=True)
class ModelConfig:
    n_voxels: int = 512
    d_img: int = 64
    patch_size: int = 16
    enc_hidden: int = 64
    enc_heads: int = 4
    enc_layers: int = 3
    mbm_hidden: int = 32
    mbm_heads: int = 4
    mbm_layers: int = 1
    dec_hidden: int = 64
    dec_heads: int = 4
    dec_layers: int = 2
    embed_width: int = 64
    max_len: int = 32
    frozen_seed: int = 7

    def __post_init__(self):
        for name in ("n_voxels", "d_img", "patch_size", "embed_width", "max_len"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be >= 1")

    def encoder_cfg(self) -> BlockConfig:
        return BlockConfig(hidden=self.enc_hidden, heads=self.enc_heads,
                           layers=self.enc_layers)

    def mbm_decoder_cfg(self) -> BlockConfig:
        return BlockConfig(hidden=self.mbm_hidden, heads=self.mbm_heads,
                           layers=self.mbm_layers)

    def decoder_cfg(self) -> BlockConfig:
        return BlockConfig(hidden=self.dec_hidden, heads=self.dec_heads,
                           layers=self.dec_layers)


@dataclass(frozen=True)
class TrainConfig:
    stage: str
    lr: float
    weight_decay: float
    betas: tuple
    steps: int
    batch_size: int
    seed: int = 0
    loss_weights: LossWeights = LossWeights()
    freeze: FreezePolicy = FreezePolicy()
    mode: str = "tri-modal"
    model: ModelConfig = ModelConfig()

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ParameterError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.mode not in MODES:
            raise ParameterError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.lr <= 0:
            raise ParameterError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.steps < 0:
            raise ParameterError(f"steps must be >= 0, got {self.steps}")
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))


def stage_defaults(stage: str, **overrides) -> TrainConfig:
    """Stage-appropriate hyperparameters; keyword overrides replace fields."""
    base = {
        "pretrain": TrainConfig("pretrain", lr=5e-5, weight_decay=0.05,
                                betas=(0.9, 0.95), steps=2000, batch_size=16),
        "align": TrainConfig("align", lr=1e-4, weight_decay=0.1,
                             betas=(0.9, 0.95), steps=1500, batch_size=32),
        "finetune_qa": TrainConfig("finetune_qa", lr=1e-6, weight_decay=0.1,
                                   betas=(0.9, 0.95), steps=300, batch_size=16),
    }
    if stage not in base:
        raise ParameterError(f"stage must be one of {STAGES}, got {stage!r}")
    cfg = base[stage]
    return replace(cfg, **overrides) if overrides else cfg


# ---------------------------------------------------------------------------
# JSON round trip
# ---------------------------------------------------------------------------


def config_to_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["betas"] = list(cfg.betas)
    return d


def config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    d["betas"] = tuple(d["betas"])
    d["loss_weights"] = LossWeights(**d["loss_weights"])
    d["freeze"] = FreezePolicy(**d["freeze"])
    d["model"] = ModelConfig(**d["model"])
    return TrainConfig(**d)


def config_to_json(cfg: TrainConfig) -> str:
    return json.dumps(config_to_dict(cfg), sort_keys=True, indent=2)


def config_from_json(text: str) -> TrainConfig:
    return config_from_dict(json.loads(text))
