"""Transformer building blocks: attention, pre-norm encoder/decoder blocks,
1-d voxel patch embedding, and the learned-query attentional pooler.

Sequence tensors are [T, hidden] or [B, T, hidden]; every block preserves
sequence length and width.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ParameterError, ShapeError, Tensor

MASK_NONE = "none"
MASK_CAUSAL = "causal"


@dataclass(frozen=True)
class BlockConfig:
    """Width/depth description of one transformer stack."""

    hidden: int
    heads: int
    layers: int
    ff_mult: int = 4

    def __post_init__(self):
        for field in ("hidden", "heads", "layers", "ff_mult"):
            if getattr(self, field) < 1:
                raise ParameterError(f"BlockConfig.{field} must be >= 1")
        if self.hidden % self.heads != 0:
            raise ParameterError(
                f"hidden ({self.hidden}) must be divisible by heads ({self.heads})"
            )


class Module:
    """Parameter container with recursive named traversal."""

    def named_parameters(self, prefix: str = ""):
        for name, val in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(val, Tensor):
                yield key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{key}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{key}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]


def _param(rng: np.random.Generator, shape, dtype, std: float = 0.02) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True, dtype=dtype)


class Linear(Module):
    """Affine map with 1/sqrt(d_in) weight init and zero bias."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float64):
        self.weight = _param(rng, (d_in, d_out), dtype, std=1.0 / np.sqrt(d_in))
        self.bias = Tensor(np.zeros(d_out), requires_grad=True, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.weight), self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, dtype=np.float64, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(d), requires_grad=True, dtype=dtype)
        self.beta = Tensor(np.zeros(d), requires_grad=True, dtype=dtype)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


def _batched(x: Tensor):
    """Return ([B, T, H] view, had_batch flag)."""
    if x.ndim == 2:
        return T.reshape(x, (1,) + x.shape), False
    if x.ndim == 3:
        return x, True
    raise ShapeError(f"expected [T, H] or [B, T, H], got {x.shape}")


def causal_mask(t_q: int, t_k: int) -> np.ndarray:
    return np.tril(np.ones((t_q, t_k), dtype=bool))


class MultiHeadAttention(Module):
    """Scaled dot-product attention with per-head projection.

    mode "causal" forbids attention from position t to positions > t and
    requires query/key lengths to match (self-attention only).
    """

    def __init__(self, hidden: int, heads: int, rng: np.random.Generator, dtype=np.float64):
        if hidden % heads != 0:
            raise ParameterError(f"hidden ({hidden}) not divisible by heads ({heads})")
        self.wq = Linear(hidden, hidden, rng, dtype)
        self.wk = Linear(hidden, hidden, rng, dtype)
        self.wv = Linear(hidden, hidden, rng, dtype)
        self.wo = Linear(hidden, hidden, rng, dtype)
        self.heads = heads
        self.hidden = hidden

    def __call__(self, q_in: Tensor, kv_in: Tensor, mode: str = MASK_NONE) -> Tensor:
        if mode not in (MASK_NONE, MASK_CAUSAL):
            raise ParameterError(f"unknown attention mask mode: {mode!r}")
        if q_in.shape[-1] != self.hidden or kv_in.shape[-1] != self.hidden:
            raise ShapeError(
                f"attention width mismatch: got {q_in.shape} / {kv_in.shape}, need width {self.hidden}"
            )
        q3, had_batch = _batched(q_in)
        k3, _ = _batched(kv_in)
        b, tq, _ = q3.shape
        tk = k3.shape[1]
        if mode == MASK_CAUSAL and tq != tk:
            raise ShapeError(f"causal mode needs square attention, got Tq={tq}, Tk={tk}")
        h, dh = self.heads, self.hidden // self.heads

        def split(x, t):
            return T.permute(T.reshape(x, (b, t, h, dh)), (0, 2, 1, 3))

        q = split(self.wq(q3), tq)
        k = split(self.wk(k3), tk)
        v = split(self.wv(k3), tk)
        scores = T.matmul(q, T.swap_last_axes(k)) * (1.0 / np.sqrt(dh))
        mask = causal_mask(tq, tk) if mode == MASK_CAUSAL else None
        attn = T.softmax(scores, axis=-1, mask=mask)
        ctx = T.matmul(attn, v)
        merged = T.reshape(T.permute(ctx, (0, 2, 1, 3)), (b, tq, self.hidden))
        out = self.wo(merged)
        return out if had_batch else T.reshape(out, (tq, self.hidden))


class FeedForward(Module):
    def __init__(self, hidden: int, ff_mult: int, rng: np.random.Generator, dtype=np.float64):
        self.up = Linear(hidden, hidden * ff_mult, rng, dtype)
        self.down = Linear(hidden * ff_mult, hidden, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(T.gelu(self.up(x)))


class EncoderBlock(Module):
    """Pre-norm residual block: x + MHA(LN(x)), then + FFN(LN(.))."""

    def __init__(self, cfg: BlockConfig, rng: np.random.Generator, dtype=np.float64):
        self.ln1 = LayerNorm(cfg.hidden, dtype)
        self.attn = MultiHeadAttention(cfg.hidden, cfg.heads, rng, dtype)
        self.ln2 = LayerNorm(cfg.hidden, dtype)
        self.ffn = FeedForward(cfg.hidden, cfg.ff_mult, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        normed = self.ln1(x)
        x = T.add(x, self.attn(normed, normed, MASK_NONE))
        return T.add(x, self.ffn(self.ln2(x)))


class DecoderBlock(Module):
    """Causal self-attention, cross-attention over a conditioning sequence,
    then feed-forward; all pre-norm residual."""

    def __init__(self, cfg: BlockConfig, rng: np.random.Generator, dtype=np.float64):
        self.ln1 = LayerNorm(cfg.hidden, dtype)
        self.self_attn = MultiHeadAttention(cfg.hidden, cfg.heads, rng, dtype)
        self.ln2 = LayerNorm(cfg.hidden, dtype)
        self.cross_attn = MultiHeadAttention(cfg.hidden, cfg.heads, rng, dtype)
        self.ln3 = LayerNorm(cfg.hidden, dtype)
        self.ffn = FeedForward(cfg.hidden, cfg.ff_mult, rng, dtype)

    def __call__(self, x: Tensor, cond: Tensor) -> Tensor:
        normed = self.ln1(x)
        x = T.add(x, self.self_attn(normed, normed, MASK_CAUSAL))
        x = T.add(x, self.cross_attn(self.ln2(x), cond, MASK_NONE))
        return T.add(x, self.ffn(self.ln3(x)))


class PatchEmbed1d(Module):
    """Segment a voxel vector into fixed-size patches, project each to the
    model width, and add a learned positional embedding.

    The vector is zero-padded up to a whole number of patches.
    """

    def __init__(self, n_voxels: int, patch_size: int, hidden: int,
                 rng: np.random.Generator, dtype=np.float64):
        if n_voxels < 1 or patch_size < 1:
            raise ParameterError("n_voxels and patch_size must be >= 1")
        self.n_voxels = n_voxels
        self.patch_size = patch_size
        self.n_patches = -(-n_voxels // patch_size)
        self.proj = Linear(patch_size, hidden, rng, dtype)
        self.pos = _param(rng, (self.n_patches, hidden), dtype)
        self.dtype = dtype

    def to_patches(self, voxels: np.ndarray) -> np.ndarray:
        """Zero-pad and reshape raw voxels to [..., n_patches, patch_size]."""
        voxels = np.asarray(voxels, dtype=self.dtype)
        single = voxels.ndim == 1
        if single:
            voxels = voxels[None, :]
        if voxels.shape[-1] != self.n_voxels:
            raise ShapeError(f"expected {self.n_voxels} voxels, got {voxels.shape[-1]}")
        pad = self.n_patches * self.patch_size - self.n_voxels
        if pad:
            voxels = np.concatenate(
                [voxels, np.zeros((voxels.shape[0], pad), dtype=self.dtype)], axis=-1
            )
        out = voxels.reshape(-1, self.n_patches, self.patch_size)
        return out[0] if single else out

    def embed_patches(self, patches: Tensor) -> Tensor:
        """Project [B, P, S] (or [P, S]) patch values to [B, P, hidden]."""
        p3, had_batch = _batched(patches)
        out = T.add(self.proj(p3), self.pos)
        return out if had_batch else T.reshape(out, out.shape[1:])

    def __call__(self, voxels: np.ndarray) -> Tensor:
        return self.embed_patches(Tensor(self.to_patches(voxels), dtype=self.dtype))


class AttentionalPooler(Module):
    """Learned query vectors cross-attending over a token sequence."""

    def __init__(self, hidden: int, n_queries: int, heads: int,
                 rng: np.random.Generator, dtype=np.float64):
        self.queries = _param(rng, (n_queries, hidden), dtype)
        self.attn = MultiHeadAttention(hidden, heads, rng, dtype)
        self.n_queries = n_queries

    def __call__(self, tokens: Tensor) -> Tensor:
        t3, had_batch = _batched(tokens)
        q = T.tile_batch(self.queries, t3.shape[0])
        out = self.attn(q, t3, MASK_NONE)
        return out if had_batch else T.reshape(out, (self.n_queries, out.shape[-1]))


class EncoderStack(Module):
    """Patchless stack of encoder blocks with a final layer norm."""

    def __init__(self, cfg: BlockConfig, rng: np.random.Generator, dtype=np.float64):
        self.blocks = [EncoderBlock(cfg, rng, dtype) for _ in range(cfg.layers)]
        self.ln_out = LayerNorm(cfg.hidden, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return self.ln_out(x)


class DecoderStack(Module):
    def __init__(self, cfg: BlockConfig, rng: np.random.Generator, dtype=np.float64):
        self.blocks = [DecoderBlock(cfg, rng, dtype) for _ in range(cfg.layers)]
        self.ln_out = LayerNorm(cfg.hidden, dtype)

    def __call__(self, x: Tensor, cond: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x, cond)
        return self.ln_out(x)
