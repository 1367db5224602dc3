"""Tri-modal alignment: pull pooled fMRI embeddings toward frozen image and
text towers with symmetric contrastive losses, while a causal decoder learns
captions from the fMRI token sequence by teacher forcing.

The frozen towers are fixed seeded-random maps standing in for large
pretrained encoders: deterministic, informative, and never updated. Every
embedding is unit-normalized before the dot products, which keeps the single
trainable temperature identifiable.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .nn import (
    AttentionalPooler,
    BlockConfig,
    DecoderStack,
    EncoderBlock,
    EncoderStack,
    Linear,
    Module,
    PatchEmbed1d,
    _param,
)
from .optim import set_trainable
from .tensor import ParameterError, ShapeError, Tensor
from .textgen import PAD_ID, TokenSequence, Vocab, teacher_forcing_batch

EMBED_WIDTH = 64
TEMP_INIT = 0.07


class Temperature(Module):
    """Log-parameterized softmax temperature; positive by construction."""

    def __init__(self, init: float = TEMP_INIT, dtype=np.float32):
        if init <= 0:
            raise ParameterError(f"temperature must be positive, got {init}")
        self.log_temp = Tensor(np.log(init), requires_grad=True, dtype=dtype)

    def value(self) -> Tensor:
        return T.exp(self.log_temp)


@dataclass(frozen=True)
class LossWeights:
    fmri_image: float = 1.0
    fmri_text: float = 1.0
    caption: float = 20.0

    def __post_init__(self):
        ws = (self.fmri_image, self.fmri_text, self.caption)
        if any(w < 0 for w in ws):
            raise ParameterError(f"loss weights must be nonnegative, got {ws}")
        if all(w == 0 for w in ws):
            raise ParameterError("at least one loss weight must be positive")


@dataclass
class TriModalBatch:
    """Index i pairs one fMRI sample with its caption and, unless running
    fMRI-text-only, its image features."""

    fmri: np.ndarray
    tokens: list
    image_feats: Optional[np.ndarray] = None

    def __post_init__(self):
        self.fmri = np.asarray(self.fmri)
        if self.fmri.ndim != 2:
            raise ShapeError(f"fmri must be [N, V], got {self.fmri.shape}")
        n = self.fmri.shape[0]
        if n == 0:
            raise ShapeError("empty batch")
        if len(self.tokens) != n:
            raise ShapeError(
                f"{len(self.tokens)} token sequences for {n} fMRI samples"
            )
        if self.image_feats is not None:
            self.image_feats = np.asarray(self.image_feats)
            if self.image_feats.ndim != 2 or self.image_feats.shape[0] != n:
                raise ShapeError(
                    f"image_feats must be [{n}, D], got {self.image_feats.shape}"
                )

    @property
    def size(self) -> int:
        return self.fmri.shape[0]


# ---------------------------------------------------------------------------
# frozen towers
# ---------------------------------------------------------------------------


def _frozen(rng: np.random.Generator, shape, dtype, std: float) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=False, dtype=dtype)


class FrozenImageEncoder(Module):
    """Fixed random linear map over image features, squashed by tanh and
    unit-normalized. Never receives gradient."""

    def __init__(self, feat_dim: int, embed_width: int = EMBED_WIDTH,
                 seed=7, dtype=np.float32):
        rng = np.random.default_rng([seed, 20])
        self.weight = _frozen(rng, (feat_dim, embed_width), dtype,
                              std=1.0 / np.sqrt(feat_dim))
        self.feat_dim = feat_dim
        self.dtype = dtype

    def __call__(self, feats: np.ndarray) -> Tensor:
        feats = np.asarray(feats, dtype=self.dtype)
        single = feats.ndim == 1
        if single:
            feats = feats[None, :]
        if feats.ndim != 2 or feats.shape[-1] != self.feat_dim:
            raise ShapeError(f"expected [N, {self.feat_dim}] features, got {feats.shape}")
        with T.no_grad():
            emb = T.l2_normalize(T.tanh(T.matmul(Tensor(feats, dtype=self.dtype),
                                                 self.weight)))
            if single:
                emb = T.reshape(emb, (emb.shape[-1],))
        return emb


class FrozenTextEncoder(Module):
    """Fixed random two-block transformer over token ids. Each sequence is
    encoded at its natural length, so the embedding never depends on how a
    batch happened to be padded."""

    def __init__(self, vocab_size: int, embed_width: int = EMBED_WIDTH,
                 heads: int = 4, max_len: int = 32, seed=7, dtype=np.float32):
        rng = np.random.default_rng([seed, 21])
        cfg = BlockConfig(hidden=embed_width, heads=heads, layers=2)
        self.tok = _frozen(rng, (vocab_size, embed_width), dtype, std=0.5)
        self.pos = _frozen(rng, (max_len, embed_width), dtype, std=0.5)
        self.blocks = [EncoderBlock(cfg, rng, dtype) for _ in range(cfg.layers)]
        self.head = Linear(embed_width, embed_width, rng, dtype)
        self.max_len = max_len
        self.dtype = dtype
        set_trainable(self, False)

    def encode(self, seq: TokenSequence) -> np.ndarray:
        ids = np.array([i for i in seq.ids if i != PAD_ID], dtype=np.int64)
        t = len(ids)
        if t > self.max_len:
            raise ShapeError(f"sequence length {t} exceeds max_len {self.max_len}")
        with T.no_grad():
            x = T.add(T.embedding(self.tok, ids),
                      T.embedding(self.pos, np.arange(t)))
            x = T.reshape(x, (1,) + x.shape)
            for block in self.blocks:
                x = block(x)
            mean_w = Tensor(np.full((1, 1, t), 1.0 / t), dtype=self.dtype)
            pooled = T.reshape(T.matmul(mean_w, x), (1, x.shape[-1]))
            emb = T.l2_normalize(self.head(pooled))
        return emb.data[0]

    def __call__(self, seqs) -> Tensor:
        if not seqs:
            raise ShapeError("empty batch")
        return Tensor(np.stack([self.encode(s) for s in seqs]), dtype=self.dtype)


# ---------------------------------------------------------------------------
# trainable path
# ---------------------------------------------------------------------------


class FmriProjector(Module):
    """One learned query pools the encoder tokens; a linear map takes the
    pooled vector to the shared width, then unit norm."""

    def __init__(self, hidden: int, embed_width: int, heads: int,
                 rng: np.random.Generator, dtype=np.float32):
        self.pool = AttentionalPooler(hidden, 1, heads, rng, dtype)
        self.proj = Linear(hidden, embed_width, rng, dtype)

    def __call__(self, tokens: Tensor) -> Tensor:
        pooled = self.pool(tokens)
        if pooled.ndim == 3:
            pooled = T.reshape(pooled, (pooled.shape[0], pooled.shape[-1]))
        return T.l2_normalize(self.proj(pooled))


class BrainDecoder(Module):
    """Causal transformer over caption tokens, cross-attending into the fMRI
    token sequence. Owns its token and position embeddings."""

    def __init__(self, vocab_size: int, cfg: BlockConfig, max_len: int,
                 rng: np.random.Generator, dtype=np.float32):
        self.tok = _param(rng, (vocab_size, cfg.hidden), dtype)
        self.pos = _param(rng, (max_len, cfg.hidden), dtype)
        self.stack = DecoderStack(cfg, rng, dtype)
        self.out = Linear(cfg.hidden, vocab_size, rng, dtype)
        self.vocab_size = vocab_size
        self.max_len = max_len

    def _check_ids(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 2:
            raise ShapeError(f"ids must be [B, T], got {ids.shape}")
        if ids.shape[1] > self.max_len:
            raise ShapeError(f"sequence length {ids.shape[1]} exceeds {self.max_len}")
        return ids

    def hidden_states(self, ids, cond: Tensor) -> Tensor:
        ids = self._check_ids(ids)
        x = T.add(T.embedding(self.tok, ids),
                  T.embedding(self.pos, np.arange(ids.shape[1])))
        return self.stack(x, cond)

    def logits(self, ids, cond: Tensor) -> Tensor:
        return self.out(self.hidden_states(ids, cond))


class AlignModels(Module):
    """Every module the alignment stage touches, plus the decoding interface
    used downstream by caption generation and question answering."""

    def __init__(self, patch: PatchEmbed1d, encoder: EncoderStack,
                 projector: FmriProjector, decoder: BrainDecoder,
                 image_enc: FrozenImageEncoder, text_enc: FrozenTextEncoder,
                 temperature: Temperature, vocab: Vocab):
        self.patch = patch
        self.encoder = encoder
        self.projector = projector
        self.decoder = decoder
        self.image_enc = image_enc
        self.text_enc = text_enc
        self.temperature = temperature
        self.vocab = vocab
        self.dtype = patch.dtype

    def condition(self, voxels: np.ndarray) -> Tensor:
        """Encode raw voxels to the [B, P, H] token sequence. Input is
        z-scored per sample exactly as during pretraining."""
        from .mbm import zscored_patches

        patches = zscored_patches(self, voxels)
        if patches.ndim == 2:
            patches = patches[None]
        return self.encoder(self.patch.embed_patches(Tensor(patches, dtype=self.dtype)))

    def decode_logits(self, ids, cond: Tensor) -> Tensor:
        return self.decoder.logits(ids, cond)

    def decode_hidden(self, ids, cond: Tensor) -> Tensor:
        return self.decoder.hidden_states(ids, cond)

    def encode_fmri(self, voxels: np.ndarray):
        """Return (token sequence, unit embedding); batched iff input is."""
        single = np.asarray(voxels).ndim == 1
        cond = self.condition(voxels)
        emb = self.projector(cond)
        if single:
            return T.reshape(cond, cond.shape[1:]), T.reshape(emb, (emb.shape[-1],))
        return cond, emb


def build_align_models(n_voxels: int, image_feat_dim: int, vocab: Vocab, *,
                       patch_size: int = 16,
                       encoder_cfg: BlockConfig = BlockConfig(hidden=64, heads=4, layers=3),
                       decoder_cfg: BlockConfig = BlockConfig(hidden=64, heads=4, layers=2),
                       embed_width: int = EMBED_WIDTH, max_len: int = 32,
                       seed=0, frozen_seed=7, dtype=np.float32,
                       patch: Optional[PatchEmbed1d] = None,
                       encoder: Optional[EncoderStack] = None) -> AlignModels:
    """Assemble the full bundle. Pass patch and encoder together to reuse
    pretrained modules (their tensors are shared, not copied); otherwise
    fresh ones are drawn from the seed."""
    if (patch is None) != (encoder is None):
        raise ParameterError("pass both patch and encoder, or neither")
    rng = np.random.default_rng([seed, 5])
    if patch is None:
        patch = PatchEmbed1d(n_voxels, patch_size, encoder_cfg.hidden, rng, dtype)
        encoder = EncoderStack(encoder_cfg, rng, dtype)
    if patch.n_voxels != n_voxels:
        raise ShapeError(f"patch embed covers {patch.n_voxels} voxels, need {n_voxels}")
    hidden = patch.proj.weight.shape[1]
    if decoder_cfg.hidden != hidden:
        raise ParameterError(
            f"decoder hidden {decoder_cfg.hidden} must match encoder width {hidden} "
            "for cross-attention"
        )
    projector = FmriProjector(hidden, embed_width, encoder_cfg.heads, rng, dtype)
    decoder = BrainDecoder(len(vocab), decoder_cfg, max_len, rng, dtype)
    image_enc = FrozenImageEncoder(image_feat_dim, embed_width, frozen_seed, dtype)
    text_enc = FrozenTextEncoder(len(vocab), embed_width, 4, 32, frozen_seed, dtype)
    temperature = Temperature(dtype=dtype)
    return AlignModels(patch, encoder, projector, decoder,
                       image_enc, text_enc, temperature, vocab)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def contrastive_loss(a: Tensor, b: Tensor, temp: Temperature) -> Tensor:
    """Symmetric pairing loss: mean row cross-entropy plus mean column
    cross-entropy of the temperature-scaled similarity matrix against the
    diagonal. Zero for a single pair."""
    if a.ndim != 2 or b.ndim != 2 or a.shape != b.shape:
        raise ShapeError(f"need matching [N, E] embeddings, got {a.shape} and {b.shape}")
    if a.shape[0] < 1:
        raise ShapeError("empty batch")
    for side in (a, b):
        norms = np.sqrt((side.data * side.data).sum(axis=-1))
        if np.abs(norms - 1.0).max() > 1e-3:
            raise ParameterError("contrastive_loss expects unit-norm embeddings")
    labels = np.arange(a.shape[0])
    logits = T.div(T.matmul(a, T.swap_last_axes(b)), temp.value())
    return T.add(T.cross_entropy(logits, labels),
                 T.cross_entropy(T.swap_last_axes(logits), labels))


def caption_loss(logits: Tensor, targets) -> Tensor:
    """Mean next-token cross-entropy over non-pad target positions. Expects
    logits produced from teacher-forced inputs one step behind targets."""
    if isinstance(targets, TokenSequence):
        targets = targets.ids
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"logits {logits.shape} do not cover targets {targets.shape}")
    if not np.any(targets != PAD_ID):
        raise ParameterError("caption targets are all pad")
    return T.cross_entropy(logits, targets, ignore_id=PAD_ID)


def total_loss(batch: TriModalBatch, models: AlignModels,
               weights: LossWeights) -> tuple:
    """Weighted stage objective.

    Returns (total, components); components holds the unweighted values keyed
    like LossWeights fields. The total is assembled in a fixed order,
    ((w_fi*L_fi + w_ft*L_ft) + w_cap*L_cap), so the parts recombine to it
    bit-exactly. With image_feats absent the image term never enters the
    graph at all.
    """
    cond = models.condition(batch.fmri)
    f_emb = models.projector(cond)
    t_emb = models.text_enc(batch.tokens)
    inputs, targets = teacher_forcing_batch(batch.tokens)
    l_ft = contrastive_loss(f_emb, t_emb, models.temperature)
    l_cap = caption_loss(models.decode_logits(inputs, cond), targets)
    dtype = l_ft.dtype

    def w(value):
        return Tensor(np.asarray(value), dtype=dtype)

    cap_term = T.mul(l_cap, w(weights.caption))
    if batch.image_feats is not None:
        v_emb = models.image_enc(batch.image_feats)
        l_fi = contrastive_loss(f_emb, v_emb, models.temperature)
        paired = T.add(T.mul(l_fi, w(weights.fmri_image)),
                       T.mul(l_ft, w(weights.fmri_text)))
        components = {"fmri_image": float(l_fi.data),
                      "fmri_text": float(l_ft.data),
                      "caption": float(l_cap.data)}
    else:
        paired = T.mul(l_ft, w(weights.fmri_text))
        components = {"fmri_text": float(l_ft.data),
                      "caption": float(l_cap.data)}
    return T.add(paired, cap_term), components
