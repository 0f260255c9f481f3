"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the primitives the channel SR network needs are provided. Every op
returns a new :class:`Tensor`; when any input participates in the graph the
result records its parents and a closure mapping the output gradient to one
gradient per parent.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_grad_mode = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    global _grad_mode
    prev = _grad_mode
    _grad_mode = False
    try:
        yield
    finally:
        _grad_mode = prev


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=DTYPE, copy=True)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.op = "leaf"

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        out = cls.__new__(cls)
        data = np.asarray(data, dtype=DTYPE)
        data.flags.writeable = False
        out.data = data
        out.grad = None
        out.op = op
        tracked = _grad_mode and any(p.requires_grad for p in parents)
        out.requires_grad = tracked
        out._parents = tuple(parents) if tracked else ()
        out._backward = backward if tracked else None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(mul_scalar(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else mul_scalar(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul_scalar(self, -1.0)


def _raise_not_scalar(t: Tensor):
    raise ShapeError(f"expected a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return Tensor._result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return Tensor._result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return Tensor._result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def add_scalar(a: Tensor, c: float) -> Tensor:
    return Tensor._result(a.data + c, (a,), lambda g: (g,), "add_scalar")


def mul_scalar(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor._result(a.data * c, (a,), lambda g: (g * c,), "mul_scalar")


def mul_const(a: Tensor, c: np.ndarray) -> Tensor:
    """Multiply by a constant array of the same shape (e.g. a pixel mask)."""
    c = np.asarray(c, dtype=DTYPE)
    if c.shape != a.shape:
        raise ShapeError(f"mul_const: shape mismatch {a.shape} vs {c.shape}")
    return Tensor._result(a.data * c, (a,), lambda g: (g * c,), "mul_const")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return Tensor._result(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,), "relu")


def absolute(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    return Tensor._result(np.abs(x.data), (x,), lambda g: (g * sign,), "abs")


def square(x: Tensor) -> Tensor:
    xd = x.data
    return Tensor._result(xd * xd, (x,), lambda g: (2.0 * g * xd,), "square")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)

    def backward(g):
        # subgradient 0 at the origin keeps perfect predictions finite
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(out > 0, 0.5 / out, 0.0)
        return (g * d,)

    return Tensor._result(out, (x,), backward, "sqrt")


# ----------------------------------------------------------------- reductions

def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return Tensor._result(np.sum(x.data), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean_all(x: Tensor) -> Tensor:
    return mul_scalar(sum_all(x), 1.0 / x.size)


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean: [N,C,H,W] -> [N,C]."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    inv = 1.0 / (h * w)
    out = x.data.sum(axis=(2, 3)) * inv

    def backward(g):
        return (np.broadcast_to((g * inv)[:, :, None, None], (n, c, h, w)).copy(),)

    return Tensor._result(out, (x,), backward, "global_avg_pool")


# --------------------------------------------------------------- shape plumbing

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return Tensor._result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._result(out, tuple(tensors), backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor._result(out, tuple(tensors), backward, "stack")


def take(x: Tensor, index: int, axis: int = 1) -> Tensor:
    """Select one slice along ``axis`` (the axis is dropped)."""
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        idx = [slice(None)] * len(shape)
        idx[axis] = index
        full[tuple(idx)] = g
        return (full,)

    return Tensor._result(np.take(x.data, index, axis=axis), (x,), backward, "take")


def scale_channels(x: Tensor, w: Tensor) -> Tensor:
    """x[N,C,H,W] * w[N,C] broadcast over the spatial axes."""
    if x.data.ndim != 4 or w.shape != x.shape[:2]:
        raise ShapeError(f"scale_channels: {x.shape} vs weights {w.shape}")
    xd, wd = x.data, w.data

    def backward(g):
        return g * wd[:, :, None, None], np.einsum("nchw,nchw->nc", g, xd)

    return Tensor._result(xd * wd[:, :, None, None], (x, w), backward, "scale_channels")


# ------------------------------------------------------------------ softmaxes

def branch_softmax(logits: Tensor) -> Tensor:
    """Softmax over axis 1 of [N,B,C] (the attention branch axis)."""
    if logits.data.ndim != 3:
        raise ShapeError(f"branch_softmax expects [N,B,C], got {logits.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return Tensor._result(p, (logits,), backward, "branch_softmax")


def log_softmax(x: Tensor, axis: int = 1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return Tensor._result(out, (x,), backward, "log_softmax")


# ------------------------------------------------------------ dense layers

def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map [N,Din] x [Dout,Din]^T + [Dout]."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"fully_connected: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"fully_connected: bias {bias.shape} != ({weight.shape[0]},)")
    xd, wd = x.data, weight.data

    def backward(g):
        return g @ wd, g.T @ xd, g.sum(axis=0)

    return Tensor._result(xd @ wd.T + bias.data, (x, weight, bias), backward, "fully_connected")


CONV_CHUNK = 512  # rows per BLAS call in the conv kernels


def _pad_flat(x: np.ndarray, p: int) -> tuple[np.ndarray, int, int]:
    """[N,C,H,W] -> zero-padded channels-last rows [N*Hp*Wp, C]."""
    n, c, h, w = x.shape
    hp, wp = h + 2 * p, w + 2 * p
    xp = np.zeros((n, hp, wp, c), dtype=DTYPE)
    xp[:, p:p + h, p:p + w, :] = x.transpose(0, 2, 3, 1)
    return xp.reshape(-1, c), hp, wp


def _conv_same(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Stride-1 zero-padded cross-correlation, [N,C,H,W] * [O,C,k,k] -> [N,O,H,W].

    On the flattened padded grid every kernel tap is a contiguous row window
    shifted by ``i*Wp + j``, so each tap is one BLAS product with no gather.
    Rows that straddle the padding are computed and then cropped. Rows are
    processed in cache-sized chunks (the thin products are memory-bound) and
    taps are accumulated in a fixed order.
    """
    n, _, h, wd = x.shape
    o, _, k, _ = w.shape
    p = (k - 1) // 2
    xf, hp, wp = _pad_flat(x, p)
    rows = n * hp * wp - (k - 1) * (wp + 1)
    out = np.zeros((n * hp * wp, o), dtype=DTYPE)
    wt = np.ascontiguousarray(w.transpose(2, 3, 1, 0))
    tmp = np.empty((CONV_CHUNK, o), dtype=DTYPE)
    for r0 in range(0, rows, CONV_CHUNK):
        r1 = min(rows, r0 + CONV_CHUNK)
        acc, t = out[r0:r1], tmp[:r1 - r0]
        for i in range(k):
            for j in range(k):
                off = i * wp + j
                np.matmul(xf[r0 + off:r1 + off], wt[i, j], out=t)
                acc += t
    return out.reshape(n, hp, wp, o)[:, :h, :wd, :].transpose(0, 3, 1, 2)


def _conv_weight_grad(x: np.ndarray, g: np.ndarray, k: int) -> np.ndarray:
    n, c, h, wd = x.shape
    o = g.shape[1]
    p = (k - 1) // 2
    xf, hp, wp = _pad_flat(x, p)
    rows = n * hp * wp - (k - 1) * (wp + 1)
    gw = np.zeros((n, hp, wp, o), dtype=DTYPE)
    gw[:, :h, :wd, :] = g.transpose(0, 2, 3, 1)
    gr = gw.reshape(-1, o)
    dw = np.zeros((k, k, o, c), dtype=DTYPE)
    tmp = np.empty((o, c), dtype=DTYPE)
    for r0 in range(0, rows, CONV_CHUNK):
        r1 = min(rows, r0 + CONV_CHUNK)
        gt = gr[r0:r1].T
        for i in range(k):
            for j in range(k):
                np.matmul(gt, xf[r0 + i * wp + j:r1 + i * wp + j], out=tmp)
                dw[i, j] += tmp
    return np.ascontiguousarray(dw.transpose(2, 3, 0, 1))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Same-size 2-D convolution (stride 1, zero padding (k-1)/2)."""
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d: input must be [N,C,H,W], got {x.shape}")
    if weight.data.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d: weight must be [Cout,Cin,k,k], got {weight.shape}")
    cout, cin, k, _ = weight.shape
    if k % 2 == 0:
        raise ShapeError(f"conv2d: kernel size must be odd, got {k}")
    if cin != x.shape[1]:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, weight expects {cin}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias {bias.shape} != ({cout},)")
    xd, wd = x.data, weight.data
    out = _conv_same(xd, wd) + bias.data[None, :, None, None]

    def backward(g):
        # adjoint of same-padded correlation is correlation with the flipped, transposed kernel
        gx = None
        if x.requires_grad:
            gx = _conv_same(g, np.ascontiguousarray(wd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)))
        gw = _conv_weight_grad(xd, g, k) if weight.requires_grad else None
        return gx, gw, g.sum(axis=(0, 2, 3))

    return Tensor._result(out, (x, weight, bias), backward, "conv2d")


# ----------------------------------------------------------------- resampling

def _check_factor(factor: int):
    if factor < 2 or factor & (factor - 1):
        raise ValueError(f"resampling factor must be a power of two >= 2, got {factor}")


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    _check_factor(factor)
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return Tensor._result(out, (x,), backward, "upsample_nearest")


def block_mean(x: Tensor, factor: int) -> Tensor:
    """Non-overlapping factor x factor average pooling."""
    _check_factor(factor)
    n, c, h, w = x.shape
    if h % factor or w % factor:
        raise ShapeError(f"block_mean: {h}x{w} not divisible by {factor}")
    inv = 1.0 / (factor * factor)
    out = x.data.reshape(n, c, h // factor, factor, w // factor, factor).sum(axis=(3, 5)) * inv

    def backward(g):
        return (np.repeat(np.repeat(g * inv, factor, axis=2), factor, axis=3),)

    return Tensor._result(out, (x,), backward, "block_mean")


# ------------------------------------------------------------------ backward

class Tape:
    """Topologically ordered record of the ops reachable from a root tensor."""

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes = self._toposort(root)

    @staticmethod
    def _toposort(root: Tensor) -> list[Tensor]:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._parents):
                if id(parent) not in seen:
                    stack.append((parent, False))
        return order

    def __len__(self):
        return len(self.nodes)

    def leaves(self) -> list[Tensor]:
        return [t for t in self.nodes if not t._parents and t.requires_grad]


def backward(loss: Tensor, tape: Tape | None = None) -> dict[Tensor, np.ndarray]:
    """Reverse sweep from a scalar loss.

    Returns the gradient of every reachable grad-enabled leaf, keyed by the
    leaf tensor, and stores the same array on ``leaf.grad``. Gradients are
    recomputed from scratch on each call, never accumulated across calls.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any grad-enabled tensor")
    tape = tape or Tape(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    result: dict[Tensor, np.ndarray] = {}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            node.grad = g
            result[node] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg
    return result


def gradient_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
    floor: float = 1e-6,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``f`` must rebuild its graph from the current ``params`` values on every
    call. With ``max_entries`` only that many randomly chosen coordinates per
    parameter are probed. Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    params = list(params)
    loss = f()
    grads = backward(loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        analytic = grads.get(p)
        if analytic is None:
            analytic = np.zeros(p.shape)
        flat_idx = np.arange(p.size)
        if max_entries is not None and p.size > max_entries:
            flat_idx = np.sort(rng.choice(p.size, size=max_entries, replace=False))
        base = p.data
        for fi in flat_idx:
            idx = np.unravel_index(fi, p.shape)
            work = base.copy()
            work[idx] = base[idx] + eps
            p.data = work
            plus = f().item()
            work = base.copy()
            work[idx] = base[idx] - eps
            p.data = work
            minus = f().item()
            p.data = base
            numeric = (plus - minus) / (2 * eps)
            a = analytic[idx]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    return worst


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)
