"""Reusable network pieces: linear maps, layer norm, attention, positions."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Rng, Tensor

# Additive mask value; exp(-1e9) underflows to exactly zero weight.
NEG_INF = -1e9


def sinusoid_positions(max_len: int, dim: int, dtype=np.float64) -> np.ndarray:
    """Fixed sin/cos position table of shape (max_len, dim)."""
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    idx = np.arange(dim, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * np.floor(idx / 2.0) / dim)
    table = np.where(idx % 2 == 0, np.sin(angle), np.cos(angle))
    return table.astype(dtype)


def padding_mask(ids: np.ndarray, pad_id: int, dtype=np.float64) -> np.ndarray:
    """Additive mask (B, 1, 1, L): 0 where attendable, NEG_INF at pads."""
    blocked = (ids == pad_id)[:, None, None, :]
    return np.where(blocked, NEG_INF, 0.0).astype(dtype)


def causal_mask(length: int, dtype=np.float64) -> np.ndarray:
    """Additive mask (1, 1, L, L) blocking attention to future positions."""
    upper = np.triu(np.ones((length, length), dtype=bool), k=1)
    return np.where(upper, NEG_INF, 0.0).astype(dtype)[None, None]


def multi_head_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    mask: np.ndarray | None = None,
    n_heads: int = 1,
    return_weights: bool = False,
):
    """Scaled dot-product attention over the last two axes.

    Inputs are (..., L, D) with `n_heads` dividing D; each head is scaled by
    1/sqrt(D/n_heads). `mask` is an additive array broadcastable to the
    (..., heads, L_q, L_k) score shape; masked slots get exactly zero weight.
    """
    d = q.shape[-1]
    if d % n_heads != 0:
        raise ShapeError(f"n_heads={n_heads} must divide model width {d}")
    if k.shape[-2] == 0:
        raise ShapeError("attention over an empty key set")
    squeeze = q.ndim == 2
    if squeeze:
        q, k, v = (T.reshape(t, (1,) + t.shape) for t in (q, k, v))
    d_head = d // n_heads

    def split(t):
        b, l, _ = t.shape
        return T.transpose(T.reshape(t, (b, l, n_heads, d_head)), (0, 2, 1, 3))

    qh, kh, vh = split(q), split(k), split(v)
    scores = T.matmul(qh, T.transpose(kh, (0, 1, 3, 2))) * (1.0 / math.sqrt(d_head))
    if mask is not None:
        m = np.asarray(mask, dtype=scores.dtype)
        while m.ndim < 4:
            m = m[None]
        scores = scores + Tensor(m)
    weights = T.softmax_temp(scores, tau=1.0, axis=-1)
    ctx = T.matmul(weights, vh)
    b, _, lq, _ = ctx.shape
    out = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, lq, d))
    if squeeze:
        out = T.reshape(out, out.shape[1:])
    if return_weights:
        return out, weights
    return out


class Linear:
    """Affine map y = x @ W + b with Xavier-uniform init."""

    def __init__(self, name: str, d_in: int, d_out: int, rng: Rng, dtype=np.float64, bias: bool = True):
        self.name = name
        limit = math.sqrt(6.0 / (d_in + d_out))
        w_init = rng.spawn(f"param:{name}.w").uniform(-limit, limit, (d_in, d_out))
        self.w = Tensor(w_init.astype(dtype), requires_grad=True)
        self.b = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.w)
        if self.b is not None:
            y = y + self.b
        return y

    def named_parameters(self):
        yield f"{self.name}.w", self.w
        if self.b is not None:
            yield f"{self.name}.b", self.b


class LayerNorm:
    def __init__(self, name: str, dim: int, dtype=np.float64):
        self.name = name
        self.gain = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)

    def named_parameters(self):
        yield f"{self.name}.gain", self.gain
        yield f"{self.name}.bias", self.bias


class FeedForward:
    """Position-wise two-layer relu network."""

    def __init__(self, name: str, dim: int, d_ff: int, rng: Rng, dtype=np.float64):
        self.name = name
        self.lin1 = Linear(f"{name}.lin1", dim, d_ff, rng, dtype)
        self.lin2 = Linear(f"{name}.lin2", d_ff, dim, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(T.relu(self.lin1(x)))

    def named_parameters(self):
        yield from self.lin1.named_parameters()
        yield from self.lin2.named_parameters()


class MultiHeadAttentionLayer:
    """Projection-wrapped attention: q/k/v/out linear maps around the core."""

    def __init__(self, name: str, dim: int, n_heads: int, rng: Rng, dtype=np.float64):
        self.name = name
        self.n_heads = n_heads
        self.wq = Linear(f"{name}.wq", dim, dim, rng, dtype)
        self.wk = Linear(f"{name}.wk", dim, dim, rng, dtype)
        self.wv = Linear(f"{name}.wv", dim, dim, rng, dtype)
        self.wo = Linear(f"{name}.wo", dim, dim, rng, dtype)
        self.last_weights: np.ndarray | None = None

    def __call__(self, q_in: Tensor, k_in: Tensor, v_in: Tensor, mask: np.ndarray | None = None) -> Tensor:
        out, weights = multi_head_attention(
            self.wq(q_in), self.wk(k_in), self.wv(v_in),
            mask=mask, n_heads=self.n_heads, return_weights=True,
        )
        self.last_weights = weights.data
        return self.wo(out)

    def named_parameters(self):
        for lin in (self.wq, self.wk, self.wv, self.wo):
            yield from lin.named_parameters()
