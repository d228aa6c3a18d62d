"""Dense tensors with reverse-mode automatic differentiation.

A small numpy-backed autograd core: each operation records its inputs and a
backward closure, `Tensor.backward()` walks the recorded graph once in
reverse topological order. Everything is float64 by default because the
gradient checker needs it; float32 is supported for faster training.

Reductions use numpy's fixed left-to-right summation so repeated runs with
the same seed produce bit-identical values.
"""

from __future__ import annotations

import itertools
import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import InvalidParameterError, NumericError, ShapeError

DEFAULT_DTYPE = np.float64

_grad_enabled = True
_creation_counter = itertools.count()


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation / decoding)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


class Rng:
    """Deterministic random stream.

    Backed by numpy's PCG64 counter-based generator; the same (seed, key)
    pair yields the same stream on every platform. Child streams are derived
    from stable name hashes via `spawn`, so adding or removing sibling
    streams never perturbs an existing one.
    """

    algorithm = "pcg64"

    def __init__(self, seed: int, _key: tuple[int, ...] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._key = tuple(_key)
        ss = np.random.SeedSequence([self.seed, *self._key])
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def spawn(self, name: str) -> "Rng":
        """Independent child stream identified by a stable name."""
        return Rng(self.seed, self._key + (_fnv1a64(name),))

    def uniform(self, low: float, high: float, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None) -> np.ndarray:
        return self._gen.normal(loc, scale, size)

    def random(self, size=None) -> np.ndarray:
        return self._gen.random(size)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size=None, p: np.ndarray | None = None) -> np.ndarray:
        return self._gen.choice(n, size=size, p=p)

    def __repr__(self):
        return f"Rng(algorithm={self.algorithm!r}, seed={self.seed}, key={self._key})"


class Tensor:
    """N-dimensional float array with an optional gradient record.

    `data` is a row-major numpy array; `grad` (same shape) is allocated
    lazily during backward. Operation provenance lives in `_parents` and the
    `_backward` closure and is dropped as soon as the Python references go,
    so each training step's graph is freed after the optimizer update.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None
        self._seq = next(_creation_counter)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.data.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Reverse-mode pass from this node; visits each node exactly once.

        Nodes run in descending creation order (a valid topological order,
        since inputs are always created before their consumers). Unlike a
        DFS order this keeps gradient-accumulation order for shared tensors
        stable when unrelated graph branches are added, which is what makes
        reduction identities hold bit-for-bit.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without explicit grad needs a scalar root")
            grad = np.ones_like(self.data)
        order = sorted(_toposort(self), key=lambda node: node._seq)
        _accumulate(self, np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is not None:
                node._backward()

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, op={self.op!r}{flag})"


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    """Wrap scalars/arrays as constant tensors, matching `like`'s dtype."""
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        # own buffer: g may alias a downstream grad or a broadcast view
        t.grad = np.array(np.broadcast_to(g, t.data.shape), dtype=t.data.dtype)
    else:
        t.grad += g


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[], None], op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting introduced."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# primitive operations


def add(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    data = a.data + b.data

    def backward():
        g = out.grad
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.data.shape))

    out = _make(data, (a, b), backward, "add")
    return out


def sub(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    data = a.data - b.data

    def backward():
        g = out.grad
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.data.shape))

    out = _make(data, (a, b), backward, "sub")
    return out


def neg(a) -> Tensor:
    a = as_tensor(a)
    data = -a.data

    def backward():
        _accumulate(a, -out.grad)

    out = _make(data, (a,), backward, "neg")
    return out


def mul(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    data = a.data * b.data

    def backward():
        g = out.grad
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    out = _make(data, (a, b), backward, "mul")
    return out


def div(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    data = a.data / b.data

    def backward():
        g = out.grad
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    out = _make(data, (a, b), backward, "div")
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward():
        g = out.grad
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape))

    out = _make(data, (a, b), backward, "matmul")
    return out


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    data = np.maximum(a.data, 0.0)

    def backward():
        _accumulate(a, out.grad * (a.data > 0))

    out = _make(data, (a,), backward, "relu")
    return out


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    data = a.data.reshape(shape)

    def backward():
        _accumulate(a, out.grad.reshape(a.data.shape))

    out = _make(data, (a,), backward, "reshape")
    return out


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    data = np.transpose(a.data, axes)
    inverse = tuple(np.argsort(axes))

    def backward():
        _accumulate(a, np.transpose(out.grad, inverse))

    out = _make(data, (a,), backward, "transpose")
    return out


def getitem(a: Tensor, key) -> Tensor:
    a = as_tensor(a)
    data = a.data[key]
    if np.isscalar(data) or data.ndim == 0:
        data = np.asarray(data, dtype=a.data.dtype)

    def backward():
        g = np.zeros_like(a.data)
        g[key] += out.grad
        _accumulate(a, g)

    out = _make(data, (a,), backward, "getitem")
    return out


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward():
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.data.shape).copy())

    out = _make(np.asarray(data, dtype=a.data.dtype), (a,), backward, "sum")
    return out


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.data.shape[ax] for ax in axis]))
    else:
        count = a.data.shape[axis]
    data = a.data.mean(axis=axis, keepdims=keepdims)

    def backward():
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.data.shape) / count)

    out = _make(np.asarray(data, dtype=a.data.dtype), (a,), backward, "mean")
    return out


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather `weight[ids]`; backward scatter-adds into the table."""
    ids = np.asarray(ids)
    data = weight.data[ids]

    def backward():
        g = np.zeros_like(weight.data)
        np.add.at(g, ids, out.grad)
        _accumulate(weight, g)

    out = _make(data, (weight,), backward, "embedding")
    return out


def softmax_temp(logits: Tensor, tau: float = 1.0, axis: int = -1) -> Tensor:
    """Temperature softmax exp(z/tau)/sum(exp(z'/tau)) along `axis`.

    Max-subtraction keeps the exponentials in range; rows sum to 1 up to
    float rounding for every finite input.
    """
    if not isinstance(tau, (int, float)) or not tau > 0:
        raise InvalidParameterError(f"softmax temperature must be > 0, got {tau}")
    logits = as_tensor(logits)
    if logits.data.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    if np.isnan(logits.data).any():
        raise NumericError("softmax_temp: NaN in input logits")
    z = logits.data / tau
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward():
        g = out.grad
        inner = (g * data).sum(axis=axis, keepdims=True)
        _accumulate(logits, (g - inner) * data / tau)

    out = _make(data, (logits,), backward, "softmax_temp")
    return out


def log_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    logits = as_tensor(logits)
    z = logits.data - logits.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    data = z - lse

    def backward():
        g = out.grad
        _accumulate(logits, g - np.exp(data) * g.sum(axis=axis, keepdims=True))

    out = _make(data, (logits,), backward, "log_softmax")
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x = as_tensor(x)
    gain = as_tensor(gain, like=x)
    bias = as_tensor(bias, like=x)
    n = x.data.shape[-1]
    if n == 0:
        raise ShapeError("layer_norm over a zero-length axis")
    if gain.data.shape[-1] != n or bias.data.shape[-1] != n:
        raise ShapeError("layer_norm gain/bias length must match the last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def backward():
        g = out.grad
        dxhat = g * gain.data
        _accumulate(gain, _unbroadcast(g * xhat, gain.data.shape))
        _accumulate(bias, _unbroadcast(g, bias.data.shape))
        term = dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        _accumulate(x, inv * term)

    out = _make(data, (x, gain, bias), backward, "layer_norm")
    return out


def cross_entropy(log_probs: Tensor, targets: np.ndarray, pad_id: int, smoothing: float = 0.0) -> Tensor:
    """Mean negative log-likelihood over non-pad positions.

    `log_probs` has vocabulary on the last axis; `targets` matches the
    leading axes. Pad positions contribute exactly zero. With smoothing s
    the per-position loss is (1-s) * nll + s * mean_v(-log p_v).
    """
    log_probs = as_tensor(log_probs)
    targets = np.asarray(targets)
    vocab = log_probs.data.shape[-1]
    flat_lp = log_probs.data.reshape(-1, vocab)
    flat_t = targets.reshape(-1)
    if flat_t.min() < 0 or flat_t.max() >= vocab:
        raise IndexError(f"target id out of range [0, {vocab})")
    mask = flat_t != pad_id
    count = int(mask.sum())
    if count == 0:
        raise InvalidParameterError("cross_entropy: no non-pad targets")
    rows = np.arange(flat_lp.shape[0])
    picked = flat_lp[rows, flat_t]
    per_pos = -(1.0 - smoothing) * picked - smoothing * flat_lp.mean(axis=1)
    data = np.asarray((per_pos * mask).sum() / count, dtype=log_probs.data.dtype)

    def backward():
        g = float(out.grad)
        glp = np.zeros_like(flat_lp)
        if smoothing != 0.0:
            glp[mask, :] = -smoothing / vocab * g / count
        glp[rows[mask], flat_t[mask]] += -(1.0 - smoothing) * g / count
        _accumulate(log_probs, glp.reshape(log_probs.data.shape))

    out = _make(data, (log_probs,), backward, "cross_entropy")
    return out


def dropout(x: Tensor, p: float, rng: Rng, training: bool) -> Tensor:
    """Inverted dropout: zero with prob p, scale survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise InvalidParameterError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.data.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return mul(x, Tensor(keep))


# ---------------------------------------------------------------------------
# gradient checking


def _find_nonfinite_op(root: Tensor) -> str:
    for node in _toposort(root):
        if not np.isfinite(node.data).all():
            return node.op
    return root.op


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[tuple[str, Tensor]],
    eps: float = 1e-5,
    max_samples: int = 20,
    rng: Rng | None = None,
    total_samples: int | None = None,
) -> float:
    """Compare analytic gradients of the scalar `f()` with central differences.

    Returns max over sampled coordinates of
    |analytic - numeric| / max(1, |analytic| + |numeric|).
    Run in float64; eps should sit in [1e-6, 1e-4]. By default up to
    `max_samples` coordinates are checked per parameter; `total_samples`
    switches to that many coordinates drawn over all parameters jointly.
    """
    if not 1e-6 <= eps <= 1e-4:
        raise InvalidParameterError(f"grad_check eps must be in [1e-6, 1e-4], got {eps}")
    params = list(params)
    rng = rng or Rng(0)
    loss = f()
    if loss.data.size != 1:
        raise ShapeError("grad_check target must be scalar")
    if not np.isfinite(loss.data).all():
        raise NumericError(f"grad_check: non-finite loss produced by op '{_find_nonfinite_op(loss)}'")
    for _, p in params:
        p.zero_grad()
    loss.backward()
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for name, p in params}

    if total_samples is not None:
        sizes = [p.data.size for _, p in params]
        offsets = np.cumsum([0] + sizes)
        picks = rng.permutation(int(offsets[-1]))[:total_samples]
        per_param = {name: [] for name, _ in params}
        for flat_idx in picks:
            which = int(np.searchsorted(offsets, flat_idx, side="right")) - 1
            per_param[params[which][0]].append(int(flat_idx - offsets[which]))
        coord_plan = [(name, p, np.asarray(per_param[name], dtype=np.int64)) for name, p in params]
    else:
        coord_plan = []
        for name, p in params:
            n = p.data.size
            coords = np.arange(n) if n <= max_samples else rng.permutation(n)[:max_samples]
            coord_plan.append((name, p, coords))

    worst = 0.0
    for name, p, coords in coord_plan:
        flat = p.data.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + eps
            with no_grad():
                up = float(f().data)
            flat[idx] = orig - eps
            with no_grad():
                down = float(f().data)
            flat[idx] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise NumericError(f"grad_check: non-finite loss while perturbing '{name}'")
            numeric = (up - down) / (2.0 * eps)
            a = float(a_flat[idx])
            rel = abs(a - numeric) / max(1.0, abs(a) + abs(numeric))
            worst = max(worst, rel)
    return worst
