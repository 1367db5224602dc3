"""Reverse-mode automatic differentiation over numpy arrays.

A global tape records every differentiable op in forward order; backward()
replays it in reverse, accumulating gradients into requires_grad leaves.
Float32 and float64 only. Every op output is checked for NaN/Inf and raises
instead of propagating garbage.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

_FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class ParameterError(ValueError):
    """An op argument is outside its valid range."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class GradientError(RuntimeError):
    """Backward-pass contract violation (non-scalar loss, double backward)."""


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by op '{op}'")


class Tensor:
    """Dense n-d float array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_from_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        _check_finite(arr, "tensor")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._from_op = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar; floats/ints are treated as constants
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self.dtype))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


class _TapeOp:
    __slots__ = ("output", "inputs", "backward_fn", "name")

    def __init__(self, output: Tensor, inputs: Sequence[Tensor], backward_fn, name: str):
        self.output = output
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn
        self.name = name


class Tape:
    """Ordered op record; backward walks it exactly once in reverse order."""

    def __init__(self):
        self.ops: list[_TapeOp] = []
        self._consumed: set[int] = set()

    @property
    def op_count(self) -> int:
        return len(self.ops)

    def clear(self) -> None:
        self.ops.clear()
        self._consumed.clear()


_TAPE = Tape()
_GRAD_ENABLED = True


def active_tape() -> Tape:
    return _TAPE


def reset_tape() -> None:
    _TAPE.clear()


@contextlib.contextmanager
def no_grad():
    """Disable op recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _make(out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn, name: str) -> Tensor:
    _check_finite(out_data, name)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out._from_op = False
    out.requires_grad = False
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._from_op = True
        _TAPE.ops.append(_TapeOp(out, inputs, backward_fn, name))
    return out


def backward(loss: Tensor) -> None:
    """Populate dLoss/dLeaf on every requires_grad leaf reachable from loss.

    Gradients accumulate across calls (sum-of-losses linearity); calling twice
    on the same loss tensor without re-running forward is an error.
    """
    if loss.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GradientError("loss does not require grad (nothing recorded)")
    if id(loss) in _TAPE._consumed:
        raise GradientError("backward already called on this loss; re-run forward first")
    _TAPE._consumed.add(id(loss))

    # id -> (tensor, accumulated grad); tape holds refs so ids are stable
    grads: dict[int, tuple[Tensor, np.ndarray]] = {
        id(loss): (loss, np.ones_like(loss.data))
    }
    for op in reversed(_TAPE.ops):
        entry = grads.pop(id(op.output), None)
        if entry is None:
            continue
        in_grads = op.backward_fn(entry[1])
        for t, g in zip(op.inputs, in_grads):
            if g is None or not t.requires_grad:
                continue
            prev = grads.get(id(t))
            grads[id(t)] = (t, g) if prev is None else (t, prev[1] + g)
    for t, g in grads.values():
        if t._from_op or not t.requires_grad:
            continue
        t.grad = g.copy() if t.grad is None else t.grad + g


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# elementwise and shape ops
# ---------------------------------------------------------------------------


def _sum_to_shape(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to a trailing-broadcast operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    g = g.sum(axis=tuple(range(extra))) if extra else g
    return g.reshape(shape)


def _binary_shapes_ok(a: Tensor, b: Tensor, op: str) -> None:
    if a.dtype != b.dtype:
        raise ParameterError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")
    if a.shape == b.shape or b.size == 1 or a.size == 1:
        return
    # trailing-axis broadcast (bias-style) only
    if len(b.shape) <= len(a.shape) and a.shape[a.ndim - b.ndim:] == b.shape:
        return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes_ok(a, b, "add")

    def bwd(g):
        return _sum_to_shape(g, a.shape), _sum_to_shape(g, b.shape)

    return _make(a.data + b.data, (a, b), bwd, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes_ok(a, b, "sub")

    def bwd(g):
        return _sum_to_shape(g, a.shape), _sum_to_shape(-g, b.shape)

    return _make(a.data - b.data, (a, b), bwd, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes_ok(a, b, "mul")
    ad, bd = a.data, b.data

    def bwd(g):
        ga = _sum_to_shape(g * bd, a.shape) if a.requires_grad else None
        gb = _sum_to_shape(g * ad, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad * bd, (a, b), bwd, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes_ok(a, b, "div")
    ad, bd = a.data, b.data

    def bwd(g):
        ga = _sum_to_shape(g / bd, a.shape) if a.requires_grad else None
        gb = _sum_to_shape(-g * ad / (bd * bd), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad / bd, (a, b), bwd, "div")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def pow_(a: Tensor, p: float) -> Tensor:
    ad = a.data

    def bwd(g):
        return (g * p * ad ** (p - 1.0),)

    return _make(ad ** p, (a,), bwd, "pow")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out_data = np.exp(a.data)

    def bwd(g):
        return (g * out_data,)

    return _make(out_data, (a,), bwd, "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data

    def bwd(g):
        return (g / ad,)

    with np.errstate(invalid="ignore", divide="ignore"):
        out_data = np.log(ad)
    return _make(out_data, (a,), bwd, "log")


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def bwd(g):
        return (g * (1.0 - out_data * out_data),)

    return _make(out_data, (a,), bwd, "tanh")


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5*x*(1 + tanh(c*(x + 0.044715*x^3)))."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out_data = 0.5 * x * (1.0 + t)

    def bwd(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
        return (g * d,)

    return _make(out_data, (a,), bwd, "gelu")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape

    def bwd(g):
        return (g.reshape(old),)

    return _make(a.data.reshape(shape), (a,), bwd, "reshape")


def swap_last_axes(a: Tensor) -> Tensor:
    if a.ndim < 2:
        raise ShapeError(f"swap_last_axes needs ndim >= 2, got {a.shape}")

    def bwd(g):
        return (np.swapaxes(g, -1, -2).copy(),)

    return _make(np.swapaxes(a.data, -1, -2).copy(), (a,), bwd, "swap_last_axes")


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"permute: axes {axes} invalid for ndim {a.ndim}")
    inv = np.argsort(axes)

    def bwd(g):
        return (np.transpose(g, inv).copy(),)

    return _make(np.transpose(a.data, axes).copy(), (a,), bwd, "permute")


def tile_batch(a: Tensor, n: int) -> Tensor:
    """Repeat a tensor along a new leading batch axis."""
    if n < 1:
        raise ParameterError(f"tile_batch: n must be >= 1, got {n}")

    def bwd(g):
        return (g.sum(axis=0),)

    return _make(np.broadcast_to(a.data, (n,) + a.shape).copy(), (a,), bwd, "tile_batch")


def sum_all(a: Tensor) -> Tensor:
    shape, dt = a.shape, a.dtype

    def bwd(g):
        return (np.full(shape, g, dtype=dt),)

    return _make(np.asarray(a.data.sum(), dtype=dt), (a,), bwd, "sum_all")


def mean_all(a: Tensor) -> Tensor:
    shape, dt, n = a.shape, a.dtype, a.size

    def bwd(g):
        return (np.full(shape, g / n, dtype=dt),)

    return _make(np.asarray(a.data.mean(), dtype=dt), (a,), bwd, "mean_all")


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along axis 0."""
    sizes = [t.shape[0] for t in tensors]
    offs = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(g[offs[i]:offs[i + 1]] for i in range(len(sizes)))

    return _make(np.concatenate([t.data for t in tensors], axis=0), tuple(tensors), bwd, "concat_rows")


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    2-d x 2-d is the plain product. An n-d left operand with a 2-d right
    operand applies the map to the last axis. Two n-d operands must have
    identical leading (batch) dims. No implicit batch broadcasting.
    """
    if a.dtype != b.dtype:
        raise ParameterError(f"matmul: dtype mismatch {a.dtype} vs {b.dtype}")
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs ndim >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims disagree, {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims disagree, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        ga = gb = None
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                k = ad.shape[-1]
                gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return ga, gb

    return _make(np.matmul(ad, bd), (a, b), bwd, "matmul")


# ---------------------------------------------------------------------------
# fused neural-net primitives
# ---------------------------------------------------------------------------


def softmax(a: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """Numerically stabilized softmax along axis.

    mask, when given, is a boolean array broadcastable to a.shape; False
    positions are treated as -inf logits and get exactly zero output.
    """
    if not -a.ndim <= axis < a.ndim:
        raise ParameterError(f"softmax: axis {axis} invalid for shape {a.shape}")
    z = a.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    m = z.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(z - m)
    s = e.sum(axis=axis, keepdims=True)
    out_data = e / s

    def bwd(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        return (out_data * (g - dot),)

    return _make(out_data, (a,), bwd, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ParameterError(f"layer_norm: eps must be > 0, got {eps}")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma/beta must have shape ({d},), got {gamma.shape}/{beta.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = ((xd - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=xd.dtype))
    xhat = (xd - mu) * inv
    gd = gamma.data

    def bwd(g):
        dxhat = g * gd
        dx = None
        if x.requires_grad:
            dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        dgamma = (g * xhat).reshape(-1, d).sum(axis=0) if gamma.requires_grad else None
        dbeta = g.reshape(-1, d).sum(axis=0) if beta.requires_grad else None
        return dx, dgamma, dbeta

    return _make(xhat * gd + beta.data, (x, gamma, beta), bwd, "layer_norm")


def cross_entropy(logits: Tensor, targets: np.ndarray, ignore_id: Optional[int] = None) -> Tensor:
    """Mean negative log-softmax of the target class over non-ignored rows.

    logits: [..., V], flattened internally to [T, V]; targets: int array [T].
    """
    v = logits.shape[-1]
    flat = logits.data.reshape(-1, v)
    tg = np.asarray(targets).reshape(-1)
    if tg.shape[0] != flat.shape[0]:
        raise ShapeError(f"cross_entropy: {flat.shape[0]} rows but {tg.shape[0]} targets")
    valid = np.ones(tg.shape, dtype=bool) if ignore_id is None else tg != ignore_id
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ParameterError("cross_entropy: all positions ignored (empty reduction)")
    checked = tg[valid]
    if checked.min() < 0 or checked.max() >= v:
        raise IndexError(f"cross_entropy: target out of range [0, {v})")

    m = flat.max(axis=-1, keepdims=True)
    e = np.exp(flat - m)
    lse = np.log(e.sum(axis=-1)) + m[:, 0]
    picked = flat[np.arange(flat.shape[0]), np.where(valid, tg, 0)]
    per_row = np.where(valid, lse - picked, 0.0)
    out_data = np.asarray(per_row.sum() / n_valid, dtype=flat.dtype)
    shape = logits.shape

    def bwd(g):
        p = e / e.sum(axis=-1, keepdims=True)
        p[np.arange(flat.shape[0]), np.where(valid, tg, 0)] -= 1.0
        p *= (valid[:, None] * (g / n_valid)).astype(flat.dtype)
        return (p.reshape(shape),)

    return _make(out_data, (logits,), bwd, "cross_entropy")


def mse_masked(pred: Tensor, target: Tensor, mask: np.ndarray) -> Tensor:
    """Mean squared error over rows selected by a leading-axes boolean mask."""
    if pred.shape != target.shape:
        raise ShapeError(f"mse_masked: shape mismatch {pred.shape} vs {target.shape}")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != pred.shape[:mask.ndim]:
        raise ShapeError(f"mse_masked: mask shape {mask.shape} does not lead {pred.shape}")
    if not mask.any():
        raise ParameterError("mse_masked: empty mask")
    m = mask.reshape(mask.shape + (1,) * (pred.ndim - mask.ndim))
    tail = int(np.prod(pred.shape[mask.ndim:], dtype=np.int64)) if pred.ndim > mask.ndim else 1
    count = int(mask.sum()) * tail
    diff = (pred.data - target.data) * m
    out_data = np.asarray((diff * diff).sum() / count, dtype=pred.dtype)

    def bwd(g):
        base = diff * (2.0 * g / count)
        gp = base if pred.requires_grad else None
        gt = -base if target.requires_grad else None
        return gp, gt

    return _make(out_data, (pred, target), bwd, "mse_masked")


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather: out[..., :] = weight[ids[...], :]."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"embedding: id out of range [0, {weight.shape[0]})")
    wd = weight.data

    def bwd(g):
        gw = np.zeros_like(wd)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, wd.shape[-1]))
        return (gw,)

    return _make(wd[ids], (weight,), bwd, "embedding")


def take_positions(x: Tensor, idx: np.ndarray) -> Tensor:
    """Per-batch-row gather: out[b, :] = x[b, idx[b], :]."""
    if x.ndim != 3:
        raise ShapeError(f"take_positions needs [B, T, H], got {x.shape}")
    idx = np.asarray(idx)
    b = x.shape[0]
    if idx.shape != (b,):
        raise ShapeError(f"take_positions: idx shape {idx.shape} != ({b},)")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[1]):
        raise IndexError(f"take_positions: index out of range [0, {x.shape[1]})")
    rows = np.arange(b)
    shape = x.shape
    dt = x.dtype

    def bwd(g):
        gx = np.zeros(shape, dtype=dt)
        gx[rows, idx] = g
        return (gx,)

    return _make(x.data[rows, idx], (x,), bwd, "take_positions")


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """Scale along axis to unit L2 norm."""
    n = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True) + 1e-24)
    out_data = x.data / n

    def bwd(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        return ((g - out_data * dot) / n,)

    return _make(out_data, (x,), bwd, "l2_normalize")


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Compare backward() gradients of scalar f against central differences.

    Returns the max elementwise relative error with denominator
    max(|analytic|, |numeric|, 1e-8).
    """
    if h <= 0:
        raise ParameterError(f"finite_diff_check: h must be > 0, got {h}")
    if not x.requires_grad:
        raise ParameterError("finite_diff_check: x must require grad")
    saved = x.grad
    x.grad = None
    out = f(x)
    if out.size != 1:
        raise ParameterError(f"finite_diff_check: f must be scalar-valued, got {out.shape}")
    backward(out)
    analytic = x.grad.copy()
    x.grad = saved

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = float(f(x).data)
            flat[i] = orig - h
            lo = float(f(x).data)
            flat[i] = orig
            nflat[i] = (hi - lo) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float((np.abs(analytic - numeric) / denom).max())
