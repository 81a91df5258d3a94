"""Minimal dense-tensor engine with reverse-mode differentiation.

Only the operations the segmentation networks and losses need are provided.
Every op builds a node that records its parents and a closure that pushes the
output gradient back to them; :func:`backward` walks the graph in reverse
topological order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "BilinearSpec",
    "BatchNormState",
    "as_tensor",
    "conv2d",
    "bilinear_kernel",
    "transposed_conv2d",
    "maxpool2d",
    "batch_norm",
    "relu",
    "add",
    "scale",
    "elementwise",
    "concat_channels",
    "crop2d",
    "softmax_channels",
    "log_softmax_channels",
    "channels_last",
    "backward",
    "finite_diff_check",
]


class Tensor:
    """A numpy array plus an optional gradient slot and graph bookkeeping."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, _parents=(), _op: str = ""):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = _op
        # op-specific values kept for backward (argmax, batch statistics, ...)
        self.cache: dict = {}

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> dict["Tensor", np.ndarray]:
        return backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op or 'leaf'!r})"

    # arithmetic -------------------------------------------------------

    def __add__(self, other):
        return _binary(self, other, "add")

    __radd__ = __add__

    def __sub__(self, other):
        return _binary(self, other, "sub")

    def __rsub__(self, other):
        return _binary(as_tensor(other, like=self), self, "sub")

    def __mul__(self, other):
        return _binary(self, other, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _binary(self, other, "div")

    def __rtruediv__(self, other):
        return _binary(as_tensor(other, like=self), self, "div")

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self) -> "Tensor":
        return tsum(self) * (1.0 / self.size)

    def log(self) -> "Tensor":
        return log(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data: np.ndarray, parents: Sequence[Tensor], op: str, fn) -> Tensor:
    out = Tensor(data, _parents=parents, _op=op)
    if out.requires_grad:
        out._backward = fn
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.dtype, copy=True).reshape(t.shape)
    else:
        t.grad += g.reshape(t.shape)


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # only scalar-vs-array broadcasting is supported
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _binary(a, b, kind: str) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _check_broadcast(a.data, b.data, kind)
    x, y = a.data, b.data.astype(a.dtype, copy=False)
    if kind == "add":
        data = x + y
    elif kind == "sub":
        data = x - y
    elif kind == "mul":
        data = x * y
    else:
        data = x / y

    def fn(g):
        if kind == "add":
            ga, gb = g, g
        elif kind == "sub":
            ga, gb = g, -g
        elif kind == "mul":
            ga, gb = g * y, g * x
        else:
            ga, gb = g / y, -g * x / (y * y)
        _accumulate(a, _reduce_to(np.broadcast_to(ga, data.shape), a.shape))
        _accumulate(b, _reduce_to(np.broadcast_to(gb, data.shape), b.shape))

    return _node(data, (a, b), kind, fn)


# pointwise and structural ops ---------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def fn(g):
        _accumulate(x, g * mask)

    return _node(x.data * mask, (x,), "relu", fn)


def add(a: Tensor, b) -> Tensor:
    """Pointwise sum; ``b`` may be a same-shape tensor or a scalar."""
    b = as_tensor(b, like=a)
    if b.size != 1 and a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _binary(a, b, "add")


def scale(x: Tensor, factor: float) -> Tensor:
    f = float(factor)

    def fn(g):
        _accumulate(x, g * f)

    return _node(x.data * x.dtype.type(f), (x,), "scale", fn)


def elementwise(kind: str, a: Tensor, b=None) -> Tensor:
    if kind == "relu":
        return relu(a)
    if kind == "add":
        return add(a, b)
    if kind == "scale":
        return scale(a, b)
    raise ValueError(f"unknown elementwise op {kind!r}")


def log(x: Tensor) -> Tensor:
    def fn(g):
        _accumulate(x, g / x.data)

    return _node(np.log(x.data), (x,), "log", fn)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def fn(g):
        _accumulate(x, g * out)

    return _node(out, (x,), "exp", fn)


def square(x: Tensor) -> Tensor:
    def fn(g):
        _accumulate(x, 2.0 * g * x.data)

    return _node(x.data * x.data, (x,), "square", fn)


def tsum(x: Tensor) -> Tensor:
    def fn(g):
        _accumulate(x, np.broadcast_to(g, x.shape))

    return _node(np.asarray(x.data.sum(), dtype=x.dtype), (x,), "sum", fn)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    def fn(g):
        _accumulate(x, g.reshape(x.shape))

    return _node(x.data.reshape(shape), (x,), "reshape", fn)


def index(x: Tensor, idx) -> Tensor:
    def fn(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        _accumulate(x, full)

    return _node(np.array(x.data[idx]), (x,), "index", fn)


def pick(x: Tensor, labels: np.ndarray) -> Tensor:
    """Row-wise gather ``x[i, labels[i]]`` for a 2-D tensor."""
    labels = np.asarray(labels, dtype=np.int64)
    rows = np.arange(x.shape[0])

    def fn(g):
        full = np.zeros_like(x.data)
        full[rows, labels] = g
        _accumulate(x, full)

    return _node(x.data[rows, labels], (x,), "pick", fn)


def channel_sum(x: Tensor, channels: Sequence[int]) -> Tensor:
    """Sum selected columns of a (P, C) tensor into a length-P vector."""
    channels = list(channels)

    def fn(g):
        full = np.zeros_like(x.data)
        full[:, channels] = g[:, None]
        _accumulate(x, full)

    return _node(x.data[:, channels].sum(axis=1), (x,), "channel_sum", fn)


def channels_last(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N*H*W, C); 2-D input is returned unchanged."""
    if x.data.ndim == 2:
        return x
    n, c = x.shape[:2]
    perm = (0,) + tuple(range(2, x.data.ndim)) + (1,)
    inv = np.argsort(perm)
    moved = x.data.transpose(perm)
    moved_shape = moved.shape

    def fn(g):
        _accumulate(x, g.reshape(moved_shape).transpose(inv))

    return _node(moved.reshape(-1, c), (x,), "channels_last", fn)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"concat_channels: extent mismatch {a.shape} vs {b.shape}")
    ca = a.shape[1]

    def fn(g):
        _accumulate(a, g[:, :ca])
        _accumulate(b, g[:, ca:])

    data = np.concatenate([a.data, b.data.astype(a.dtype, copy=False)], axis=1)
    return _node(data, (a, b), "concat", fn)


def crop2d(x: Tensor, top: int, left: int, height: int, width: int) -> Tensor:
    def fn(g):
        full = np.zeros_like(x.data)
        full[:, :, top:top + height, left:left + width] = g
        _accumulate(x, full)

    data = x.data[:, :, top:top + height, left:left + width]
    if data.shape[2:] != (height, width):
        raise ValueError("crop2d: window exceeds input")
    return _node(np.ascontiguousarray(data), (x,), "crop", fn)


def softmax_channels(logits: Tensor) -> Tensor:
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def fn(g):
        _accumulate(logits, p * (g - (g * p).sum(axis=1, keepdims=True)))

    return _node(p, (logits,), "softmax", fn)


def log_softmax_channels(logits: Tensor) -> Tensor:
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def fn(g):
        _accumulate(logits, g - p * g.sum(axis=1, keepdims=True))

    return _node(out, (logits,), "log_softmax", fn)


# convolution family -------------------------------------------------------


def _out_extent(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(n, c * k * k, ho * wo)


def _col2im(cols: np.ndarray, c: int, k: int, stride: int, hp: int, wp: int, ho: int, wo: int) -> np.ndarray:
    n = cols.shape[0]
    cols = cols.reshape(n, c, k, k, ho, wo)
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    return out


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    ho, wo = _out_extent(h, k, stride, padding), _out_extent(wd, k, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    cols = _im2col(xp, k, stride, ho, wo)
    out = np.matmul(w.reshape(o, -1), cols).reshape(n, o, ho, wo)
    return out, cols


def _conv_input_grad(g: np.ndarray, w: np.ndarray, in_shape, stride: int, padding: int) -> np.ndarray:
    n, c, h, wd = in_shape
    o, _, k, _ = w.shape
    ho, wo = g.shape[2:]
    dcols = np.matmul(w.reshape(o, -1).T, g.reshape(n, o, ho * wo))
    dxp = _col2im(dcols, c, k, stride, h + 2 * padding, wd + 2 * padding, ho, wo)
    if padding:
        dxp = dxp[:, :, padding:padding + h, padding:padding + wd]
    return dxp


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0, bias: Tensor | None = None) -> Tensor:
    """Cross-correlation of an NCHW input with an (O, I, K, K) kernel."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ValueError("conv2d expects NCHW input and OIKK kernel")
    if x.shape[1] != kernel.shape[1]:
        raise ValueError(f"conv2d: input has {x.shape[1]} channels, kernel expects {kernel.shape[1]}")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be >= 1 and padding >= 0")
    k = kernel.shape[2]
    if _out_extent(x.shape[2], k, stride, padding) < 1 or _out_extent(x.shape[3], k, stride, padding) < 1:
        raise ValueError("conv2d: non-positive output extent")
    w = kernel.data.astype(x.dtype, copy=False)
    out, cols = _conv_forward(x.data, w, stride, padding)
    if bias is not None:
        out += bias.data.astype(x.dtype, copy=False).reshape(1, -1, 1, 1)
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def fn(g):
        n, o = g.shape[:2]
        if kernel.requires_grad:
            gm = g.reshape(n, o, -1)
            dw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0)
            _accumulate(kernel, dw.reshape(kernel.shape))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            _accumulate(x, _conv_input_grad(g, w, x.shape, stride, padding))

    return _node(out, parents, "conv2d", fn)


def transposed_conv2d(x: Tensor, kernel: Tensor, stride: int, bias: Tensor | None = None) -> Tensor:
    """Adjoint of :func:`conv2d` for an (I, O, K, K) kernel; output extent (H-1)*stride+K."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ValueError("transposed_conv2d expects NCHW input and IOKK kernel")
    if x.shape[1] != kernel.shape[0]:
        raise ValueError(f"transposed_conv2d: input has {x.shape[1]} channels, kernel expects {kernel.shape[0]}")
    n, c, h, wd = x.shape
    _, o, k, _ = kernel.shape
    hout, wout = (h - 1) * stride + k, (wd - 1) * stride + k
    w = kernel.data.astype(x.dtype, copy=False)
    # scatter: the input gradient of a conv whose kernel is w viewed as (I, O, K, K)
    out = _conv_input_grad(x.data, w, (n, o, hout, wout), stride, 0)
    if bias is not None:
        out += bias.data.astype(x.dtype, copy=False).reshape(1, -1, 1, 1)
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def fn(g):
        gcols = _im2col(g, k, stride, h, wd)  # (N, O*K*K, H*W)
        if kernel.requires_grad:
            xm = x.data.reshape(n, c, h * wd)
            dw = np.matmul(xm, gcols.transpose(0, 2, 1)).sum(axis=0)
            _accumulate(kernel, dw.reshape(kernel.shape))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dx = np.matmul(w.reshape(c, -1), gcols).reshape(n, c, h, wd)
            _accumulate(x, dx)

    return _node(out, parents, "transposed_conv2d", fn)


@dataclass(frozen=True)
class BilinearSpec:
    K: int
    stride: int = 1

    def __post_init__(self):
        if self.K < 1 or self.stride < 1:
            raise ValueError("BilinearSpec needs K >= 1 and stride >= 1")


def bilinear_weights_1d(K: int) -> np.ndarray:
    """1-D interpolation weights for a kernel of size K.

    For K <= 2 this is ``1 - |x - (K-1)/2|``. Larger kernels divide the offset
    by ``ceil(K/2)`` so that weights stay non-negative and a stride of K/2
    reproduces constants.
    """
    x = np.arange(K, dtype=np.float64)
    if K <= 2:
        return 1.0 - np.abs(x - (K - 1) / 2.0)
    f = math.ceil(K / 2)
    center = f - 1 if K % 2 == 1 else f - 0.5
    return 1.0 - np.abs(x - center) / f


def bilinear_kernel(spec: BilinearSpec, channels: int, dtype=np.float64) -> np.ndarray:
    """(channels, channels, K, K) kernel that interpolates each channel independently."""
    w1 = bilinear_weights_1d(spec.K)
    w2 = np.outer(w1, w1)
    kernel = np.zeros((channels, channels, spec.K, spec.K), dtype=dtype)
    for ch in range(channels):
        kernel[ch, ch] = w2
    return kernel


def maxpool2d(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    stride = window if stride is None else stride
    if window < 1 or stride < 1:
        raise ValueError("maxpool2d: window and stride must be >= 1")
    n, c, h, wd = x.shape
    if window > h or window > wd:
        raise ValueError(f"maxpool2d: window {window} larger than input {h}x{wd}")
    ho, wo = (h - window) // stride + 1, (wd - window) // stride + 1
    windows = np.empty((window * window, n, c, ho, wo), dtype=x.dtype)
    for i in range(window):
        for j in range(window):
            windows[i * window + j] = x.data[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    argmax = windows.argmax(axis=0)
    out = np.take_along_axis(windows, argmax[None], axis=0)[0]

    def fn(g):
        dx = np.zeros_like(x.data)
        for i in range(window):
            for j in range(window):
                hit = argmax == i * window + j
                dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g * hit
        _accumulate(x, dx)

    node = _node(out, (x,), "maxpool2d", fn)
    node.cache["argmax"] = argmax
    return node


@dataclass
class BatchNormState:
    """Running per-channel statistics; momentum weights the previous value."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.9

    @classmethod
    def fresh(cls, channels: int, momentum: float = 0.9) -> "BatchNormState":
        return cls(np.zeros(channels), np.ones(channels), momentum)

    def copy(self) -> "BatchNormState":
        return BatchNormState(self.mean.copy(), self.var.copy(), self.momentum)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    epsilon: float = 1e-5,
    train: bool = True,
    state: BatchNormState | None = None,
) -> Tensor:
    if epsilon <= 0:
        raise ValueError("batch_norm: epsilon must be positive")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batch_norm: gamma/beta must have shape ({c},)")
    axes = (0,) + tuple(range(2, x.data.ndim))
    bshape = (1, c) + (1,) * (x.data.ndim - 2)
    dt = x.dtype
    if train:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if state is not None:
            m = state.momentum
            state.mean = m * state.mean + (1 - m) * mean
            state.var = m * state.var + (1 - m) * var
    else:
        if state is None:
            raise ValueError("batch_norm: eval mode needs running statistics")
        mean, var = state.mean.astype(dt), state.var.astype(dt)
    inv_std = (1.0 / np.sqrt(var + epsilon)).astype(dt)
    xhat = (x.data - mean.reshape(bshape)) * inv_std.reshape(bshape)
    g_ = gamma.data.astype(dt, copy=False).reshape(bshape)
    out = xhat * g_ + beta.data.astype(dt, copy=False).reshape(bshape)
    count = x.size // c

    def fn(g):
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).sum(axis=axes))
        if beta.requires_grad:
            _accumulate(beta, g.sum(axis=axes))
        if x.requires_grad:
            dxhat = g * g_
            if train:
                dx = (
                    dxhat
                    - dxhat.mean(axis=axes, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True) / count
                ) * inv_std.reshape(bshape)
            else:
                dx = dxhat * inv_std.reshape(bshape)
            _accumulate(x, dx)

    node = _node(out, (x, gamma, beta), "batch_norm", fn)
    node.cache.update(mean=mean, var=var)
    return node


# graph traversal ------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(root)/d(leaf) into every reachable leaf that requires grad.

    Returns a mapping from each such leaf tensor to its gradient array.
    """
    if root.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    order = _topo_order(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones(root.shape, dtype=root.dtype)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
                leaves[node] = node.grad
            continue
        # route parent gradients into the local buffer instead of .grad
        saved = [(p, p.grad) for p in node._parents]
        for p in node._parents:
            p.grad = None
        node._backward(g)
        for p, old in saved:
            if p.grad is not None:
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + p.grad
                else:
                    grads[id(p)] = p.grad
            p.grad = old
    return leaves


def finite_diff_check(build: Callable[..., Tensor], inputs: Iterable[np.ndarray], h: float = 1e-6) -> float:
    """Largest relative disagreement between backward() and central differences.

    ``build`` maps leaf tensors (one per array in ``inputs``) to a scalar tensor.
    The error per coordinate is |a - n| / max(1, |a|, |n|).
    """
    if h <= 0:
        raise ValueError("finite_diff_check: h must be positive")
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*leaves)
    backward(out)
    worst = 0.0
    for idx, arr in enumerate(arrays):
        analytic = leaves[idx].grad
        if analytic is None:
            analytic = np.zeros_like(arr)
        flat = arr.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = build(*[Tensor(a) for a in arrays]).item()
            flat[j] = orig - h
            fm = build(*[Tensor(a) for a in arrays]).item()
            flat[j] = orig
            num = (fp - fm) / (2 * h)
            a = float(analytic.reshape(-1)[j])
            err = abs(a - num) / max(1.0, abs(a), abs(num))
            worst = max(worst, err)
    return worst
