"""Dense float64 tensor engine with taped reverse-mode differentiation.

Everything the encoder/decoder needs runs on one `Tensor` type backed by a
contiguous float64 numpy array. Operations executed while a `Tape` is active
append nodes (parent references plus a backward closure) to that tape;
`backward` replays the tape once, in reverse append order, accumulating
gradients into every reachable tensor that requires them.

Design constraints honored here:
  * float64 everywhere - small-model training where tight finite-difference
    checks matter more than speed;
  * masked softmax produces exactly-zero weight at blocked positions;
  * dropout and any sampling consume a caller-supplied counter-based
    generator, so a fixed seed reproduces runs bit for bit.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

ArrayLike = Union[np.ndarray, float, int, Sequence]

_GELU_C = math.sqrt(2.0 / math.pi)
_MASKED_LOGIT = -1e9


class DimensionError(ValueError):
    """Raised when operand shapes cannot be combined."""


class GraphError(RuntimeError):
    """Raised on misuse of the computation tape."""


class Diagnostics:
    """Counters for numerically degenerate events worth surfacing in tests."""

    def __init__(self):
        self.softmax_fallback_rows = 0

    def reset(self):
        self.softmax_fallback_rows = 0


DIAGNOSTICS = Diagnostics()

_TAPES = threading.local()


def _tape_stack() -> list:
    stack = getattr(_TAPES, "stack", None)
    if stack is None:
        stack = []
        _TAPES.stack = stack
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class _Node:
    __slots__ = ("out", "parents", "backward_fn")

    def __init__(self, out, parents, backward_fn):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn


class Tape:
    """Append-only record of operations; context manager activates it."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        if popped is not self:
            raise GraphError("tape stack corrupted: exited a tape that is not innermost")
        return False


class Tensor:
    """Dense float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "node", "tape")

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        data = np.asarray(data, dtype=np.float64)
        if data.ndim and not data.flags["C_CONTIGUOUS"]:
            data = np.ascontiguousarray(data)
        self.data = data
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.node: Optional[_Node] = None
        self.tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar -------------------------------------------------------
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return pow_scalar(self, exponent)

    def __getitem__(self, key):
        return getitem(self, key)


def as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _record(out: Tensor, parents: Iterable[Tensor], backward_fn: Callable) -> Tensor:
    tape = active_tape()
    parents = tuple(parents)
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        node = _Node(out, parents, backward_fn)
        out.node = node
        out.tape = tape
        tape.nodes.append(node)
    return out


def backward(loss: Tensor):
    """Populate grads of every requires_grad tensor reachable from `loss`.

    Visits tape nodes exactly once, in reverse append order. Gradients are
    accumulated additively: calling backward twice without zeroing doubles
    every leaf gradient.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    if loss.node is None or loss.tape is None:
        raise GraphError("loss is not the output of a recorded operation")
    tape = loss.tape
    flows: dict[int, list] = {id(loss): [loss, np.ones_like(loss.data)]}
    for node in reversed(tape.nodes):
        entry = flows.get(id(node.out))
        if entry is None:
            continue
        parent_grads = node.backward_fn(entry[1])
        for parent, pgrad in zip(node.parents, parent_grads):
            if pgrad is None or not parent.requires_grad:
                continue
            slot = flows.get(id(parent))
            if slot is None:
                # gradients are never mutated in place, so holding the
                # closure's array (or view) directly is safe
                flows[id(parent)] = [parent, pgrad]
            else:
                slot[1] = slot[1] + pgrad
    for tensor, grad in flows.values():
        if not tensor.requires_grad:
            continue
        tensor.grad = grad if tensor.grad is None else tensor.grad + grad


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _record(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _record(out, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data / b.data)
    ad, bd = a.data, b.data

    def bwd(g):
        return (
            _unbroadcast(g / bd, ad.shape),
            _unbroadcast(-g * ad / (bd * bd), bd.shape),
        )

    return _record(out, (a, b), bwd)


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(-a.data)
    return _record(out, (a,), lambda g: (-g,))


def pow_scalar(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    c = float(exponent)
    out = Tensor(a.data ** c)
    ad = a.data

    def bwd(g):
        return (g * c * ad ** (c - 1.0),)

    return _record(out, (a,), bwd)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.exp(a.data))
    od = out.data
    return _record(out, (a,), lambda g: (g * od,))


def log(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.log(a.data))
    ad = a.data
    return _record(out, (a,), lambda g: (g / ad,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.tanh(a.data))
    od = out.data
    return _record(out, (a,), lambda g: (g * (1.0 - od * od),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a) -> Tensor:
    """log(1 + exp(x)) computed without overflow."""
    a = as_tensor(a)
    out = Tensor(np.logaddexp(0.0, a.data))
    ad = a.data
    return _record(out, (a,), lambda g: (g * _sigmoid(ad),))


def gelu(a) -> Tensor:
    """Tanh-approximation GELU."""
    a = as_tensor(a)
    x = a.data
    inner = x * x
    inner *= 0.044715 * x
    inner += x
    inner *= _GELU_C
    t = np.tanh(inner)
    half_1pt = 0.5 * (1.0 + t)
    out = Tensor(x * half_1pt)

    def bwd(g):
        d = 1.0 - t * t          # sech^2
        d *= _GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
        d *= 0.5 * x
        d += half_1pt
        d *= g
        return (d,)

    return _record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    orig = a.data.shape
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(orig),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = Tensor(np.transpose(a.data, axes))
    return _record(out, (a,), lambda g: (np.transpose(g, inverse),))


def getitem(a, key) -> Tensor:
    """Basic (slice / integer) indexing with gradient scatter-back."""
    a = as_tensor(a)
    _check_basic_key(key)
    out = Tensor(np.array(a.data[key]))
    shape = a.data.shape

    def bwd(g):
        full = np.zeros(shape, dtype=np.float64)
        full[key] = g
        return (full,)

    return _record(out, (a,), bwd)


def _check_basic_key(key):
    items = key if isinstance(key, tuple) else (key,)
    for item in items:
        if isinstance(item, (list, np.ndarray)):
            raise DimensionError("getitem supports basic indexing only; use gather_slots")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise DimensionError("concat of an empty sequence")
    out = Tensor(np.concatenate([t.data for t in ts], axis=axis))
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _record(out, ts, bwd)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise DimensionError("stack of an empty sequence")
    out = Tensor(np.stack([t.data for t in ts], axis=axis))

    def bwd(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _record(out, ts, bwd)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))
    shape = a.data.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp, shape).copy(),)

    return _record(out, (a,), bwd)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(
            f"matmul needs rank >= 2 operands, got {a.data.shape} x {b.data.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {a.data.shape} x {b.data.shape}"
        )
    ad, bd = a.data, b.data
    out = Tensor(ad @ bd)

    def bwd(g):
        ga = _unbroadcast(g @ bd.swapaxes(-1, -2), ad.shape)
        gb = _unbroadcast(ad.swapaxes(-1, -2) @ g, bd.shape)
        return ga, gb

    return _record(out, (a, b), bwd)


def linear(x, weight, bias=None) -> Tensor:
    """x @ weight (+ bias), collapsing leading axes to one 2D GEMM."""
    x = as_tensor(x)
    lead = x.data.shape[:-1]
    flat = reshape(x, (-1, x.data.shape[-1]))
    out = matmul(flat, weight)
    if bias is not None:
        out = add(out, bias)
    return reshape(out, lead + (as_tensor(weight).data.shape[-1],))


# ---------------------------------------------------------------------------
# neural-net primitives
# ---------------------------------------------------------------------------

def softmax_masked(logits, attn_mask) -> Tensor:
    """Row softmax over the last axis with hard-zero weight at blocked slots.

    `attn_mask` is a binary array broadcastable to `logits` (or None for an
    all-allowed fast path); positions with 0 are forced to the large negative
    constant before normalization and to an exact 0.0 weight afterwards.
    Rows with no allowed position fall back to a uniform distribution
    (counted in DIAGNOSTICS); such rows only arise for pure-pad queries whose
    outputs are discarded, and they propagate no gradient.
    """
    logits = as_tensor(logits)
    if attn_mask is None:
        e = np.exp(logits.data - logits.data.max(axis=-1, keepdims=True))
        e /= e.sum(axis=-1, keepdims=True)
        out = Tensor(e)

        def bwd_plain(g):
            inner = (g * e).sum(axis=-1, keepdims=True)
            return (e * (g - inner),)

        return _record(out, (logits,), bwd_plain)

    mask = attn_mask.data if isinstance(attn_mask, Tensor) else np.asarray(attn_mask)
    mask = np.broadcast_to(mask.astype(np.float64), logits.data.shape)
    masked = np.where(mask > 0, logits.data, _MASKED_LOGIT)
    mx = masked.max(axis=-1, keepdims=True)
    e = np.exp(masked - mx) * mask
    denom = e.sum(axis=-1, keepdims=True)
    dead = denom == 0.0
    if dead.any():
        DIAGNOSTICS.softmax_fallback_rows += int(dead.sum())
    width = logits.data.shape[-1]
    probs = np.where(dead, 1.0 / width, e / np.where(dead, 1.0, denom))
    out = Tensor(probs)
    live = ~dead

    def bwd(g):
        inner = (g * probs).sum(axis=-1, keepdims=True)
        dx = probs * (g - inner)
        return (np.where(live, dx, 0.0),)

    return _record(out, (logits,), bwd)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Standardize over the last axis, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    out = Tensor(y * gain.data + bias.data)
    gd = gain.data
    axes = tuple(range(xd.ndim - 1))

    def bwd(g):
        dy = g * gd
        dx = inv * (dy - dy.mean(axis=-1, keepdims=True) - y * (dy * y).mean(axis=-1, keepdims=True))
        dgain = (g * y).sum(axis=axes) if axes else g * y
        dbias = g.sum(axis=axes) if axes else g
        return dx, dgain.reshape(gd.shape), dbias.reshape(gd.shape)

    return _record(out, (x, gain, bias), bwd)


def dropout(x, p: float, rng: Optional[np.random.Generator] = None, train: bool = False) -> Tensor:
    """Inverted dropout: identity in eval mode, mean-preserving in train mode."""
    x = as_tensor(x)
    if not train or p <= 0.0:
        return x
    if rng is None:
        raise GraphError("train-mode dropout requires an explicit generator")
    keep = 1.0 - p
    mask = (rng.random(x.data.shape) >= p) / keep
    out = Tensor(x.data * mask)
    return _record(out, (x,), lambda g: (g * mask,))


def gather_slots(x, index: np.ndarray) -> Tensor:
    """Pick rows x[b, index[b, k], :]; negative indices yield zero rows."""
    x = as_tensor(x)
    idx = np.asarray(index)
    if x.data.ndim != 3 or idx.ndim != 2 or idx.shape[0] != x.data.shape[0]:
        raise DimensionError(f"gather_slots expects (B,L,D) and (B,K), got {x.data.shape}, {idx.shape}")
    batch, length, _ = x.data.shape
    valid = idx >= 0
    safe = np.clip(idx, 0, length - 1)
    picked = np.take_along_axis(x.data, safe[:, :, None], axis=1)
    picked = np.where(valid[:, :, None], picked, 0.0)
    out = Tensor(picked)
    rows = np.broadcast_to(np.arange(batch)[:, None], idx.shape)

    def bwd(g):
        dx = np.zeros(x.data.shape, dtype=np.float64)
        np.add.at(dx, (rows[valid], idx[valid]), g[valid])
        return (dx,)

    return _record(out, (x,), bwd)


def scatter_slots(src, index: np.ndarray, length: int) -> Tensor:
    """Place rows src[b, k, :] at out[b, index[b, k], :]; negatives are dropped."""
    src = as_tensor(src)
    idx = np.asarray(index)
    if src.data.ndim != 3 or idx.shape != src.data.shape[:2]:
        raise DimensionError(f"scatter_slots expects (B,K,D) and (B,K), got {src.data.shape}, {idx.shape}")
    batch, _, dim = src.data.shape
    valid = idx >= 0
    rows = np.broadcast_to(np.arange(batch)[:, None], idx.shape)
    dest = np.zeros((batch, length, dim), dtype=np.float64)
    np.add.at(dest, (rows[valid], idx[valid]), src.data[valid])
    out = Tensor(dest)

    def bwd(g):
        dsrc = np.zeros(src.data.shape, dtype=np.float64)
        dsrc[valid] = g[rows[valid], idx[valid]]
        return (dsrc,)

    return _record(out, (src,), bwd)


def zero_grads(tensors: Iterable[Tensor]):
    for t in tensors:
        t.grad = None
