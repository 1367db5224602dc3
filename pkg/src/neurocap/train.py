"""Alignment-stage training: freeze policies over the fMRI encoder, the
weighted-objective loop with per-component traces, and batch assembly from a
generated dataset."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .align import AlignModels, TriModalBatch, build_align_models, total_loss
from .config import FreezePolicy, ModelConfig, TrainConfig
from .datagen import Dataset, latent_to_caption
from .mbm import MbmModel
from .optim import AdamW, DivergenceError, clip_global_norm, set_trainable
from .tensor import NonFiniteError, ParameterError
from .textgen import Vocab, tokenize


def build_mbm_model(model_cfg: ModelConfig, seed=0) -> MbmModel:
    return MbmModel(model_cfg.n_voxels, model_cfg.patch_size,
                    model_cfg.encoder_cfg(), model_cfg.mbm_decoder_cfg(),
                    seed=seed)


def build_models(model_cfg: ModelConfig, vocab: Vocab, seed=0,
                 pretrained: MbmModel = None) -> AlignModels:
    """Stage-2 bundle from a ModelConfig; reuses the pretrained patch embed
    and encoder when given (shared tensors, training continues in place)."""
    kw = {}
    if pretrained is not None:
        kw = {"patch": pretrained.patch, "encoder": pretrained.encoder}
    return build_align_models(
        model_cfg.n_voxels, model_cfg.d_img, vocab,
        patch_size=model_cfg.patch_size,
        encoder_cfg=model_cfg.encoder_cfg(),
        decoder_cfg=model_cfg.decoder_cfg(),
        embed_width=model_cfg.embed_width,
        max_len=model_cfg.max_len,
        seed=seed, frozen_seed=model_cfg.frozen_seed, **kw)


def apply_freeze(models: AlignModels, policy: FreezePolicy):
    """Partition parameters per policy and set requires_grad to match.

    The policy governs only the fMRI encoder: "none" trains everything,
    "frozen_whole" freezes the patch embed and all encoder blocks,
    "frozen_partly" leaves exactly the last k blocks trainable. The
    projector, brain decoder, and temperature always train; the stand-in
    towers never do. Returns (trainable, frozen) name->tensor dicts.
    """
    blocks = models.encoder.blocks
    if policy.kind == "frozen_partly" and policy.k_trainable > len(blocks):
        raise ParameterError(
            f"k_trainable {policy.k_trainable} exceeds "
            f"{len(blocks)} encoder blocks")
    full = policy.kind == "none"
    set_trainable(models.patch, full)
    set_trainable(models.encoder, full)
    if policy.kind == "frozen_partly":
        for block in blocks[-policy.k_trainable:]:
            set_trainable(block, True)
    set_trainable(models.projector, True)
    set_trainable(models.decoder, True)
    models.temperature.log_temp.requires_grad = True
    set_trainable(models.image_enc, False)
    set_trainable(models.text_enc, False)
    trainable, frozen = {}, {}
    for name, p in models.named_parameters():
        (trainable if p.requires_grad else frozen)[name] = p
    return trainable, frozen


def caption_batch(dataset: Dataset, ids, vocab: Vocab, mode: str) -> TriModalBatch:
    """Assemble one aligned batch; image features are dropped entirely in
    fMRI-text-only mode."""
    ids = np.asarray(ids)
    tokens = [tokenize(latent_to_caption(dataset.latent(int(i))), vocab)
              for i in ids]
    feats = None if mode == "fmri-text-only" else dataset.image_feats[ids]
    return TriModalBatch(dataset.voxels[ids], tokens, feats)


@dataclass
class AlignResult:
    """Per-step traces; keys: total, caption, fmri_text, sigma, and
    fmri_image unless text-only. optimizer carries the end-of-run state
    for checkpointing."""

    traces: dict = field(repr=False)
    steps: int = 0
    optimizer: object = field(default=None, repr=False)


def align_train(dataset: Dataset, models: AlignModels, cfg: TrainConfig,
                start_step: int = 0, optimizer_state=None) -> AlignResult:
    """Run the weighted-objective loop over the train split. Deterministic
    given cfg.seed; raises DivergenceError naming the failing step.

    Batch draws are keyed by absolute step index, so resuming at start_step
    with the saved optimizer state replays the uninterrupted schedule.
    """
    if cfg.stage != "align":
        raise ParameterError(f"align_train got a {cfg.stage!r} config")
    if not 0 <= start_step <= cfg.steps:
        raise ParameterError(
            f"start_step {start_step} outside [0, {cfg.steps}]")
    trainable, _ = apply_freeze(models, cfg.freeze)
    opt = AdamW(list(trainable.items()), lr=cfg.lr, betas=cfg.betas,
                weight_decay=cfg.weight_decay)
    if optimizer_state is not None:
        opt.load_state_arrays(optimizer_state)
    train_ids = np.asarray(dataset.train_ids)
    keys = ["total", "caption", "fmri_text", "sigma"]
    if cfg.mode == "tri-modal":
        keys.append("fmri_image")
    traces = {k: [] for k in keys}
    for step in range(start_step, cfg.steps):
        rng = np.random.default_rng([cfg.seed, 6, step])
        ids = rng.choice(train_ids, size=min(cfg.batch_size, len(train_ids)),
                         replace=False)
        batch = caption_batch(dataset, ids, models.vocab, cfg.mode)
        try:
            T.reset_tape()
            total, comps = total_loss(batch, models, cfg.loss_weights)
            opt.zero_grad()
            T.backward(total)
            clip_global_norm(opt.params, 1.0)
            opt.step()
        except NonFiniteError as e:
            raise DivergenceError(step, str(e)) from e
        traces["total"].append(float(total.data))
        for key, value in comps.items():
            traces[key].append(value)
        traces["sigma"].append(float(np.exp(models.temperature.log_temp.data)))
    T.reset_tape()
    return AlignResult(traces=traces, steps=cfg.steps, optimizer=opt)


def embed_split(dataset: Dataset, models: AlignModels, ids) -> tuple:
    """Unit fMRI and caption embeddings for the given sample ids, computed
    without recording gradients. Returns (fmri [N, E], text [N, E])."""
    ids = np.asarray(ids)
    with T.no_grad():
        _, f_emb = models.encode_fmri(dataset.voxels[ids])
    seqs = [tokenize(latent_to_caption(dataset.latent(int(i))), models.vocab)
            for i in ids]
    t_emb = models.text_enc(seqs)
    return f_emb.data, t_emb.data
