"""AdamW with decoupled weight decay, plus global-norm gradient clipping."""

from __future__ import annotations

import numpy as np

from .tensor import NonFiniteError, ParameterError, Tensor


class DivergenceError(RuntimeError):
    """Training produced a non-finite value; carries the failing step."""

    def __init__(self, step: int, cause: str = ""):
        self.step = step
        msg = f"training diverged at step {step}"
        super().__init__(f"{msg}: {cause}" if cause else msg)


def clip_global_norm(named_params, max_norm: float = 1.0) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm.

    Returns the pre-clip norm. Parameters without a gradient are skipped.
    """
    if max_norm <= 0:
        raise ParameterError(f"max_norm must be > 0, got {max_norm}")
    grads = [p.grad for _, p in named_params if p.grad is not None]
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if total > max_norm:
        scale = max_norm / total
        for g in grads:
            g *= scale
    return total


class AdamW:
    """Adam with bias correction and weight decay applied directly to the
    parameter (not through the moment estimates).

    Parameters with requires_grad=False are never touched; parameters whose
    grad is None this step are skipped.
    """

    def __init__(self, named_params, lr: float, betas=(0.9, 0.95),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        if lr <= 0:
            raise ParameterError(f"lr must be > 0, got {lr}")
        if not (0.0 <= betas[0] < 1.0 and 0.0 <= betas[1] < 1.0):
            raise ParameterError(f"betas must be in [0, 1), got {betas}")
        if weight_decay < 0:
            raise ParameterError(f"weight_decay must be >= 0, got {weight_decay}")
        self.params = [(n, p) for n, p in named_params if p.requires_grad]
        names = [n for n, _ in self.params]
        if len(names) != len(set(names)):
            raise ParameterError("duplicate parameter names")
        self.lr = lr
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.state = {
            n: {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data)}
            for n, p in self.params
        }

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
            st = self.state[name]
            # moments keep the parameter dtype so a checkpoint round-trip
            # (32-bit blob) loses nothing and resumes bit-exact
            st["m"] = (self.beta1 * st["m"]
                       + (1.0 - self.beta1) * g).astype(st["m"].dtype, copy=False)
            st["v"] = (self.beta2 * st["v"]
                       + (1.0 - self.beta2) * (g * g)).astype(st["v"].dtype, copy=False)
            m_hat = st["m"] / bc1
            v_hat = st["v"] / bc2
            upd = m_hat / (np.sqrt(v_hat) + self.eps)
            if self.weight_decay:
                upd = upd + self.weight_decay * p.data
            p.data -= (self.lr * upd).astype(p.dtype, copy=False)

    def state_arrays(self):
        """Flat name -> array view of optimizer state, for checkpointing."""
        out = {"t": np.array([self.t], dtype=np.float32)}
        for name in self.state:
            out[f"{name}.m"] = self.state[name]["m"]
            out[f"{name}.v"] = self.state[name]["v"]
        return out

    def load_state_arrays(self, arrays):
        self.t = int(arrays["t"][0])
        for name in self.state:
            for key in ("m", "v"):
                src = arrays[f"{name}.{key}"]
                if src.shape != self.state[name][key].shape:
                    raise ParameterError(
                        f"optimizer state shape mismatch for {name}.{key}"
                    )
                self.state[name][key] = src.astype(
                    self.state[name][key].dtype, copy=True
                )


def set_trainable(module, trainable: bool):
    for _, p in module.named_parameters():
        p.requires_grad = trainable
        if not trainable:
            p.grad = None
