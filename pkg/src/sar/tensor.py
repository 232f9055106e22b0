"""Dense tensors with reverse-mode automatic differentiation.

Every op records its parents and a closure mapping the output gradient to
parent gradients. ``Tensor.backward`` walks the graph in reverse topological
order. Data lives in numpy arrays; layouts are channels-last (``N, H, W, C``)
for images and feature maps, and batched-first elsewhere.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = ""

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op!r})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf requiring grad."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        return mul(self, 1.0 / other) if isinstance(other, (int, float)) else div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


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


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    out_data = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out_data / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out_data, (a, b), backward, "div")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def where(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Select ``a`` where mask is true, else ``b`` (mask is a constant)."""
    a = as_tensor(a)
    b = as_tensor(b, a)
    mask = np.asarray(mask, dtype=bool)

    def backward(g):
        return (_unbroadcast(np.where(mask, g, 0), a.shape),
                _unbroadcast(np.where(mask, 0, g), b.shape))

    return _make(np.where(mask, a.data, b.data), (a, b), backward, "where")


# ---------------------------------------------------------------- reductions / shape


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def amax(x: Tensor, axis: int) -> Tensor:
    """Max along one axis; the gradient goes to the first maximal element."""
    idx = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(gx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _make(out, (x,), backward, "amax")


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(Ellipsis), type(None))) for i in items)


def getitem(x: Tensor, idx) -> Tensor:
    shape = x.shape
    basic = _is_basic_index(idx)

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        if basic:
            gx[idx] = g
        else:
            np.add.at(gx, idx, g)
        return (gx,)

    return _make(x.data[idx], (x,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, backward, "stack")


def pad_right(x: Tensor, width: int, axis: int = 2) -> Tensor:
    """Zero-pad ``x`` along ``axis`` up to ``width``."""
    n = x.shape[axis]
    if n == width:
        return x
    pads = [(0, 0)] * x.ndim
    pads[axis] = (0, width - n)
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(0, n)
    sl = tuple(sl)
    return _make(np.pad(x.data, pads), (x,), lambda g: (g[sl],), "pad_right")


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            ga = _unbroadcast(ga, a.shape)
        if b.requires_grad:
            if a.ndim == 1:
                gb = np.outer(a.data, g)
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
            gb = _unbroadcast(gb, b.shape)
        return ga, gb

    if b.ndim != 2:
        raise ShapeError(f"matmul expects a 2-D right operand, got shape {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimension mismatch: {a.shape[-1]} vs {b.shape[0]}")
    return _make(a.data @ b.data, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Rows of ``weight`` selected by integer ids (one-hot times matrix)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"token id out of range [0, {weight.shape[0]})")
    shape = weight.shape

    def backward(g):
        gw = np.zeros(shape, dtype=g.dtype)
        np.add.at(gw, ids, g)
        return (gw,)

    return _make(weight.data[ids], (weight,), backward, "embedding")


# ---------------------------------------------------------------- convolution / pooling


def _as_batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ShapeError(f"expected H x W x C or N x H x W x C input, got shape {x.shape}")
    return x, False


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: tuple[int, int] = (1, 1), padding: tuple[int, int] = (0, 0)) -> Tensor:
    """2-D cross-correlation, channels-last; weight is ``kh x kw x Cin x Cout``."""
    x, squeeze = _as_batched(x)
    kh, kw, cin, cout = weight.shape
    n, h, w, c = x.shape
    sh, sw = stride
    ph, pw = padding
    if c != cin:
        raise ShapeError(f"conv2d input channels {c} do not match weight Cin {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d bias has shape {bias.shape}, expected ({cout},)")
    hp, wp = h + 2 * ph, w + 2 * pw
    if hp < kh:
        raise ShapeError(f"conv2d kernel height {kh} exceeds padded input height {hp}")
    if wp < kw:
        raise ShapeError(f"conv2d kernel width {kw} exceeds padded input width {wp}")
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1

    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0))) if (ph or pw) else x.data
    if kh == 1 and kw == 1:
        cols = xp[:, ::sh, ::sw, :][:, :ho, :wo, :].reshape(n * ho * wo, cin)
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::sh, ::sw]
        # (n, ho, wo, cin, kh, kw) -> rows ordered (kh, kw, cin) to match the weight layout
        cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, kh * kw * cin)
    wmat = weight.data.reshape(kh * kw * cin, cout)
    out = cols @ wmat
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, cout)

    def backward(g):
        g2 = g.reshape(n * ho * wo, cout)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (cols.T @ g2).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(n, ho, wo, kh, kw, cin)
            gxp = np.zeros((n, hp, wp, cin), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw, :] += gcols[:, :, :, i, j, :]
            gx = gxp[:, ph:ph + h, pw:pw + w, :]
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    res = _make(out, parents, backward, "conv2d")
    return reshape(res, res.shape[1:]) if squeeze else res


def pool_output_size(n: int, k: int, s: int, ceil_mode: bool) -> int:
    if ceil_mode:
        out = -(-(n - k) // s) + 1
        # the last window must start inside the input
        if (out - 1) * s >= n:
            out -= 1
        return out
    return (n - k) // s + 1


def maxpool2d(x: Tensor, kernel: tuple[int, int], stride: tuple[int, int] | None = None,
              ceil_mode: bool = False) -> Tensor:
    """Max pooling without padding.

    With ``ceil_mode`` a trailing partial window is kept and pooled over the
    elements it covers (no fill value enters the max). The backward pass routes
    each output gradient to the first (row-major) maximal element of its window.
    """
    x, squeeze = _as_batched(x)
    kh, kw = kernel
    sh, sw = stride if stride is not None else kernel
    n, h, w, c = x.shape
    if h < kh or w < kw:
        raise ShapeError(f"pooling window {kh}x{kw} larger than input {h}x{w}")
    ho = pool_output_size(h, kh, sh, ceil_mode)
    wo = pool_output_size(w, kw, sw, ceil_mode)
    need_h = (ho - 1) * sh + kh
    need_w = (wo - 1) * sw + kw
    xd = x.data
    if need_h > h or need_w > w:
        xd = np.pad(xd, ((0, 0), (0, need_h - h), (0, need_w - w), (0, 0)), constant_values=-np.inf)
    win = sliding_window_view(xd, (kh, kw), axis=(1, 2))[:, ::sh, ::sw][:, :ho, :wo]
    flat = win.reshape(n, ho, wo, c, kh * kw)
    arg = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gxp = np.zeros((n, need_h if need_h > h else h, need_w if need_w > w else w, c), dtype=g.dtype)
        di, dj = np.divmod(arg, kw)
        for i in range(kh):
            for j in range(kw):
                sel = (di == i) & (dj == j)
                if sel.any():
                    gxp[:, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw, :] += np.where(sel, g, 0)
        return (gxp[:, :h, :w, :],)

    res = _make(np.ascontiguousarray(out), (x,), backward, "maxpool2d")
    return reshape(res, res.shape[1:]) if squeeze else res


# ---------------------------------------------------------------- softmax family


def _masked_fill(z: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    return z if mask is None else np.where(mask, z, -np.inf)


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; positions where ``mask`` is false get exactly 0."""
    z = _masked_fill(x.data, mask)
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _make(y, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
    y = z - lse

    def backward(g):
        return (g - np.exp(y) * np.sum(g, axis=axis, keepdims=True),)

    return _make(y, (x,), backward, "log_softmax")


def softmax_cross_entropy(logits: Tensor, targets, ignore_index: int | None = None) -> Tensor:
    """Mean negative log-likelihood over rows whose target is not ``ignore_index``."""
    targets = np.asarray(targets, dtype=np.int64)
    n, k = logits.shape
    if targets.shape != (n,):
        raise ShapeError(f"targets shape {targets.shape} does not match {n} logit rows")
    keep = np.ones(n, dtype=bool) if ignore_index is None else targets != ignore_index
    bad = keep & ((targets < 0) | (targets >= k))
    if bad.any():
        raise IndexError(f"target {int(targets[bad][0])} outside [0, {k})")
    count = int(keep.sum())
    if count == 0:
        raise ValueError("every target is ignored")
    z = logits.data - np.max(logits.data, axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=1))
    rows = np.nonzero(keep)[0]
    nll = lse[rows] - z[rows, targets[rows]]
    loss = np.sum(nll) / count

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, targets[rows]] -= 1.0
        p[~keep] = 0.0
        return (p * (g / count),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")


# ---------------------------------------------------------------- recurrent cell


def lstm_step(x: Tensor, h: Tensor, c: Tensor, w_x: Tensor, w_h: Tensor, bias: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM step; gate order in the packed weights is (input, forget, cell, output).

    ``w_x`` is ``din x 4dh``, ``w_h`` is ``dh x 4dh``, ``bias`` is ``4dh``.
    Works for a single vector or a batch (leading axis).
    """
    dh = h.shape[-1]
    if w_x.shape[0] != x.shape[-1]:
        raise ShapeError(f"lstm input width {x.shape[-1]} does not match weight rows {w_x.shape[0]}")
    if w_h.shape != (dh, 4 * dh) or w_x.shape[1] != 4 * dh or bias.shape != (4 * dh,):
        raise ShapeError(f"lstm parameter shapes inconsistent with hidden size {dh}")
    if c.shape != h.shape:
        raise ShapeError(f"lstm cell state shape {c.shape} differs from hidden {h.shape}")
    z = x.data @ w_x.data + h.data @ w_h.data + bias.data
    i = _sigmoid(z[..., :dh])
    f = _sigmoid(z[..., dh:2 * dh])
    gg = np.tanh(z[..., 2 * dh:3 * dh])
    o = _sigmoid(z[..., 3 * dh:])
    c_new = f * c.data + i * gg
    tc = np.tanh(c_new)
    h_new = o * tc
    parents = (x, h, c, w_x, w_h, bias)

    # the cell's backward is split so that h' and c' can be consumed independently
    def grads_from(dh_new, dc_new):
        dc = dc_new + dh_new * o * (1.0 - tc * tc)
        do = dh_new * tc
        di = dc * gg
        dg = dc * i
        df = dc * c.data
        dz = np.concatenate([di * i * (1 - i), df * f * (1 - f), dg * (1 - gg * gg), do * o * (1 - o)], axis=-1)
        gx = dz @ w_x.data.T if x.requires_grad else None
        gh = dz @ w_h.data.T if h.requires_grad else None
        gc = dc * f if c.requires_grad else None
        gwx = _outer_sum(x.data, dz) if w_x.requires_grad else None
        gwh = _outer_sum(h.data, dz) if w_h.requires_grad else None
        gb = dz.reshape(-1, 4 * dh).sum(axis=0) if bias.requires_grad else None
        return gx, gh, gc, gwx, gwh, gb

    packed = _make(np.concatenate([h_new, c_new], axis=-1), parents,
                   lambda g: grads_from(g[..., :dh], g[..., dh:]), "lstm_step")
    return packed[..., :dh], packed[..., dh:]


def _outer_sum(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim == 1:
        return np.outer(a, b)
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
