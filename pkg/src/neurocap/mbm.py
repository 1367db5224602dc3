"""Masked brain modeling: zero out a random subset of voxel patches,
reconstruct them with an encoder/decoder pair, score only the masked rows.

Masked patches stay in the sequence as zero tokens, so the encoder always
sees the full-length sequence. Reconstruction targets are the raw patch
values after per-sample z-scoring, which puts the variance baseline near 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import BlockConfig, EncoderStack, Linear, Module, PatchEmbed1d
from .optim import AdamW, DivergenceError, clip_global_norm
from .tensor import NonFiniteError, ParameterError, ShapeError, Tensor


@dataclass(frozen=True)
class MaskPlan:
    num_patches: int
    masked_ids: tuple
    ratio: float

    def __post_init__(self):
        ids = tuple(sorted(set(int(i) for i in self.masked_ids)))
        if ids != tuple(self.masked_ids):
            raise ParameterError("masked_ids must be sorted and unique")
        expected = min(max(int(self.ratio * self.num_patches), 1), self.num_patches - 1)
        if len(ids) != expected:
            raise ParameterError(
                f"|masked_ids| = {len(ids)}, expected {expected} "
                f"for ratio {self.ratio} over {self.num_patches} patches"
            )
        if ids and (ids[0] < 0 or ids[-1] >= self.num_patches):
            raise ParameterError(f"masked ids out of range [0, {self.num_patches})")

    def bool_mask(self) -> np.ndarray:
        m = np.zeros(self.num_patches, dtype=bool)
        m[list(self.masked_ids)] = True
        return m


def make_mask(num_patches: int, ratio: float, seed) -> MaskPlan:
    """Uniform random patch subset without replacement, deterministic."""
    if num_patches < 2:
        raise ParameterError(f"num_patches must be >= 2, got {num_patches}")
    if not 0.0 < ratio < 1.0:
        raise ParameterError(f"ratio must be in (0, 1), got {ratio}")
    count = min(max(int(ratio * num_patches), 1), num_patches - 1)
    rng = np.random.default_rng(seed)
    ids = rng.choice(num_patches, size=count, replace=False)
    return MaskPlan(num_patches, tuple(sorted(int(i) for i in ids)), ratio)


def apply_mask(patches: np.ndarray, plan: MaskPlan) -> np.ndarray:
    """Zero the masked rows; unmasked rows pass through untouched."""
    patches = np.asarray(patches)
    if patches.shape[-2] != plan.num_patches:
        raise ShapeError(
            f"plan covers {plan.num_patches} patches, got {patches.shape[-2]}"
        )
    out = patches.copy()
    out[..., list(plan.masked_ids), :] = 0.0
    return out


class MbmModel(Module):
    """Patch embed + encoder stack, width bridge, decoder stack, linear
    reconstruction head back to patch values."""

    def __init__(self, n_voxels: int, patch_size: int,
                 encoder: BlockConfig, decoder: BlockConfig,
                 seed=0, dtype=np.float32):
        if encoder.layers <= decoder.layers:
            raise ParameterError(
                f"encoder must be deeper than decoder "
                f"({encoder.layers} vs {decoder.layers})"
            )
        rng = np.random.default_rng([seed, 0])
        self.patch = PatchEmbed1d(n_voxels, patch_size, encoder.hidden, rng, dtype)
        self.encoder = EncoderStack(encoder, rng, dtype)
        self.bridge = Linear(encoder.hidden, decoder.hidden, rng, dtype)
        self.decoder = EncoderStack(decoder, rng, dtype)
        self.head = Linear(decoder.hidden, patch_size, rng, dtype)
        self.n_voxels = n_voxels
        self.patch_size = patch_size
        self.dtype = dtype

    def encode(self, masked_patches: Tensor) -> Tensor:
        return self.encoder(self.patch.embed_patches(masked_patches))

    def reconstruct(self, masked_patches: Tensor) -> Tensor:
        return self.head(self.decoder(self.bridge(self.encode(masked_patches))))


def zscored_patches(model: MbmModel, voxels: np.ndarray) -> np.ndarray:
    """Per-sample z-score, then patch. Accepts [V] or [B, V]."""
    voxels = np.asarray(voxels, dtype=model.dtype)
    if voxels.shape[-1] != model.patch.n_voxels:
        raise ShapeError(
            f"expected {model.patch.n_voxels} voxels, got {voxels.shape[-1]}"
        )
    mu = voxels.mean(axis=-1, keepdims=True)
    sd = voxels.std(axis=-1, keepdims=True)
    return model.patch.to_patches((voxels - mu) / sd)


def mbm_forward(voxels: np.ndarray, plan: MaskPlan, model: MbmModel) -> Tensor:
    """Full-length [P, S] reconstruction of one sample."""
    patches = zscored_patches(model, voxels)
    if patches.shape[0] != plan.num_patches:
        raise ShapeError(
            f"model yields {patches.shape[0]} patches, plan has {plan.num_patches}"
        )
    return model.reconstruct(Tensor(apply_mask(patches, plan), dtype=model.dtype))


def mbm_loss(recon: Tensor, target_patches: np.ndarray, plan: MaskPlan) -> Tensor:
    target = Tensor(np.asarray(target_patches, dtype=recon.dtype.type))
    return T.mse_masked(recon, target, plan.bool_mask())


def _batch_masks(n_patches: int, ratio: float, rng) -> MaskPlan:
    return make_mask(n_patches, ratio, int(rng.integers(2 ** 63)))


def masked_mse_eval(model: MbmModel, voxels: np.ndarray, ratio: float, seed):
    """(masked MSE, variance baseline) over the given samples with
    deterministic per-sample masks. The baseline is the MSE of the best
    constant predictor over the same masked rows."""
    rng = np.random.default_rng(seed)
    targets = zscored_patches(model, voxels)
    masks = np.stack([
        _batch_masks(model.patch.n_patches, ratio, rng).bool_mask()
        for _ in range(len(targets))
    ])
    with T.no_grad():
        recon = model.reconstruct(Tensor(np.where(masks[..., None], 0.0, targets),
                                         dtype=model.dtype)).data
    sq = (recon - targets) ** 2
    mse = float(sq[masks].mean())
    masked_vals = targets[masks]
    baseline = float(((masked_vals - masked_vals.mean()) ** 2).mean())
    return mse, baseline


@dataclass
class MbmTrainConfig:
    lr: float = 5e-5
    weight_decay: float = 0.05
    betas: tuple = (0.9, 0.95)
    batch_size: int = 16
    mask_ratio: float = 0.75
    clip_norm: float = 1.0


def pretrain(voxels: np.ndarray, model: MbmModel, cfg: MbmTrainConfig,
             steps: int, seed):
    """Train in place; returns the per-step loss trace."""
    voxels = np.asarray(voxels)
    if voxels.ndim != 2 or len(voxels) == 0:
        raise ParameterError(f"need a non-empty [n, V] voxel array, got {voxels.shape}")
    if steps < 0:
        raise ParameterError(f"steps must be >= 0, got {steps}")
    n = len(voxels)
    n_patches = model.patch.n_patches
    targets_all = zscored_patches(model, voxels)
    opt = AdamW(list(model.named_parameters()), lr=cfg.lr, betas=cfg.betas,
                weight_decay=cfg.weight_decay)
    trace = []
    for step in range(steps):
        rng = np.random.default_rng([seed, 3, step])
        idx = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
        targets = targets_all[idx]
        masks = np.stack([
            _batch_masks(n_patches, cfg.mask_ratio, rng).bool_mask()
            for _ in idx
        ])
        try:
            T.reset_tape()
            masked_in = Tensor(np.where(masks[..., None], 0.0, targets),
                               dtype=model.dtype)
            recon = model.reconstruct(masked_in)
            loss = T.mse_masked(recon, Tensor(targets, dtype=model.dtype), masks)
            opt.zero_grad()
            T.backward(loss)
            clip_global_norm(opt.params, cfg.clip_norm)
            opt.step()
        except NonFiniteError as e:
            raise DivergenceError(step, str(e)) from e
        trace.append(float(loss.data))
    return trace
