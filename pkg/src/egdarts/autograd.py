"""Reverse-mode automatic differentiation over dense float64 arrays.

A ``Tensor`` wraps a numpy array. Every differentiable primitive records its
parents and a closure that maps the output gradient to parent gradients, so
the graph is the set of tensors reachable from the loss through ``_parents``.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        grads = _backprop(self)
        for t, g in grads.items():
            if not t._parents and t.requires_grad:
                t.grad = g if t.grad is None else t.grad + g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward, op)
    return Tensor(data, False, (), None, op)


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


def _backprop(loss: Tensor) -> dict[Tensor, np.ndarray]:
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    out: dict[Tensor, np.ndarray] = {}
    if not loss.requires_grad:
        return out
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            out[node] = g
            continue
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return out


def grad(loss: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of scalar ``loss`` w.r.t. each tensor in ``wrt``.

    Tensors without a path to the loss get an exact zero array.
    """
    grads = _backprop(loss)
    return [grads.get(t, np.zeros_like(t.data)) for t in wrt]


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# elementwise -----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad / bd, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape),
                            _unbroadcast(-g * ad / (bd * bd), bd.shape)), "div")


def add_n(tensors: Sequence[Tensor]) -> Tensor:
    if not tensors:
        raise ValueError("add_n of an empty sequence")
    if len(tensors) == 1:
        return tensors[0]
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ShapeError(f"add_n operands differ: {shape} vs {t.shape}")
    data = tensors[0].data.copy()
    for t in tensors[1:]:
        data += t.data
    n = len(tensors)
    return _make(data, tuple(tensors), lambda g: (g,) * n, "add_n")


def weighted_sum(weights: Tensor, tensors: Sequence[Tensor]) -> Tensor:
    """``sum_i weights[i] * tensors[i]`` for a 1-D weight tensor."""
    k = len(tensors)
    if k == 0:
        raise ValueError("weighted_sum of an empty sequence")
    if weights.shape != (k,):
        raise ShapeError(f"weights shape {weights.shape} does not match {k} operands")
    w = weights.data
    data = w[0] * tensors[0].data
    for i in range(1, k):
        data = data + w[i] * tensors[i].data
    ys = [t.data for t in tensors]

    def backward(g):
        gw = np.array([np.vdot(g, y) for y in ys])
        return (gw, *[w[i] * g for i in range(k)])

    return _make(data, (weights, *tensors), backward, "weighted_sum")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    e = np.exp(-np.abs(x.data))  # never overflows
    s = np.where(x.data >= 0, 1.0, e) / (1.0 + e)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    return _make(e, (x,), lambda g: (g * e,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _make(xd * xd, (x,), lambda g: (2.0 * g * xd,), "square")


# reductions and shape ----------------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return tsum(x, axis, keepdims) * (1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(x: Tensor, idx) -> Tensor:
    shape = x.shape
    basic = _is_basic_index(idx)

    def backward(g):
        full = np.zeros(shape)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(x.data[idx], (x,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if len(tensors) == 1:
        return tensors[0]
    ref = tensors[0].shape
    for t in tensors[1:]:
        for ax in range(len(ref)):
            if ax != axis % len(ref) and t.shape[ax] != ref[ax]:
                raise ShapeError(f"concat mismatch on dim {ax}: {ref[ax]} vs {t.shape[ax]}")
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                 lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim != 2 or ad.shape[1] != bd.shape[0]:
        raise ShapeError(f"matmul shapes {ad.shape} and {bd.shape} do not align")
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, (x,), backward, "softmax")


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return _make(out, (x,), lambda g: (g - s * g.sum(axis=-1, keepdims=True),), "log_softmax")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    if logits.ndim != 2:
        raise ShapeError(f"logits must be N x C, got {logits.shape}")
    n, c = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        bad = labels[(labels < 0) | (labels >= c)][0]
        raise ValueError(f"label {bad} out of range [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def backward(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (g / n),)

    return _make(np.asarray(loss), (logits,), backward, "cross_entropy")


# convolution and pooling -------------------------------------------------------

def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def same_padding(kernel, dilation=1) -> tuple[int, int]:
    kh, kw = _pair(kernel)
    dh, dw = _pair(dilation)
    return dh * (kh - 1) // 2, dw * (kw - 1) // 2


def conv_output_size(size: int, k: int, stride: int, pad: int, dilation: int) -> int:
    return (size + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def _pad(x: np.ndarray, ph: int, pw: int, value: float = 0.0) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=value)


def _windows(xp: np.ndarray, kh, kw, sh, sw, dh, dw, ho, wo) -> np.ndarray:
    """Strided view of shape (N, C, Ho, Wo, kh, kw)."""
    ekh, ekw = dh * (kh - 1) + 1, dw * (kw - 1) + 1
    v = sliding_window_view(xp, (ekh, ekw), axis=(2, 3))
    return v[:, :, : sh * (ho - 1) + 1 : sh, : sw * (wo - 1) + 1 : sw, ::dh, ::dw]


def _tap(i, j, sh, sw, dh, dw, ho, wo):
    return (slice(None), slice(None),
            slice(i * dh, i * dh + sh * (ho - 1) + 1, sh),
            slice(j * dw, j * dw + sw * (wo - 1) + 1, sw))


def conv2d(x: Tensor, w: Tensor, stride=1, padding=None, dilation=1, groups: int = 1) -> Tensor:
    """2-D cross-correlation over NCHW input with weight (O, C/groups, kh, kw).

    ``padding=None`` selects same padding for the given kernel and dilation.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be NCHW, got {x.shape}")
    if w.ndim != 4:
        raise ShapeError(f"conv2d weight must be 4-D, got {w.shape}")
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    if c % groups:
        raise ShapeError(f"input channels {c} not divisible by groups {groups}")
    if cg * groups != c:
        raise ShapeError(f"weight dim 1 is {cg}, expected in_channels/groups = {c // groups}")
    if o % groups:
        raise ShapeError(f"weight dim 0 ({o}) not divisible by groups {groups}")
    sh, sw = _pair(stride)
    dh, dw = _pair(dilation)
    ph, pw = same_padding((kh, kw), (dh, dw)) if padding is None else _pair(padding)
    ho = conv_output_size(h, kh, sh, ph, dh)
    wo = conv_output_size(wd, kw, sw, pw, dw)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output would be empty for input {h}x{wd}")
    xp = _pad(x.data, ph, pw)
    wdat = w.data
    og = o // groups
    depthwise = groups == c and o == c

    if depthwise:
        out = np.zeros((n, c, ho, wo))
        for i in range(kh):
            for j in range(kw):
                out += xp[_tap(i, j, sh, sw, dh, dw, ho, wo)] * wdat[:, 0, i, j][None, :, None, None]
    elif kh == 1 and kw == 1 and groups == 1:
        xs = np.ascontiguousarray(xp[:, :, : sh * (ho - 1) + 1 : sh, : sw * (wo - 1) + 1 : sw]).reshape(n, c, -1)
        out = np.matmul(wdat[:, :, 0, 0], xs).reshape(n, o, ho, wo)
    else:
        outs = []
        for gi in range(groups):
            v = _windows(xp[:, gi * cg:(gi + 1) * cg], kh, kw, sh, sw, dh, dw, ho, wo)
            r = np.tensordot(v, wdat[gi * og:(gi + 1) * og], axes=([1, 4, 5], [1, 2, 3]))
            outs.append(r.transpose(0, 3, 1, 2))
        out = np.ascontiguousarray(outs[0] if groups == 1 else np.concatenate(outs, axis=1))

    def backward(g):
        gxp = np.zeros_like(xp) if x.requires_grad else None
        gw = np.zeros_like(wdat) if w.requires_grad else None
        if depthwise:
            for i in range(kh):
                for j in range(kw):
                    t = _tap(i, j, sh, sw, dh, dw, ho, wo)
                    if gxp is not None:
                        gxp[t] += g * wdat[:, 0, i, j][None, :, None, None]
                    if gw is not None:
                        gw[:, 0, i, j] = np.einsum("nchw,nchw->c", g, xp[t])
        elif kh == 1 and kw == 1 and groups == 1:
            t = _tap(0, 0, sh, sw, 1, 1, ho, wo)
            g2 = g.reshape(n, o, -1)
            if gxp is not None:
                gxp[t] += np.matmul(wdat[:, :, 0, 0].T, g2).reshape(n, c, ho, wo)
            if gw is not None:
                gw[:, :, 0, 0] = np.matmul(g2, xs.transpose(0, 2, 1)).sum(axis=0)
        else:
            for gi in range(groups):
                cs = slice(gi * cg, (gi + 1) * cg)
                os_ = slice(gi * og, (gi + 1) * og)
                gg = g[:, os_]
                if gw is not None:
                    v = _windows(xp[:, cs], kh, kw, sh, sw, dh, dw, ho, wo)
                    gw[os_] = np.tensordot(gg, v, axes=([0, 2, 3], [0, 2, 3]))
                if gxp is not None:
                    cols = np.tensordot(gg, wdat[os_], axes=([1], [0]))  # N,Ho,Wo,C,kh,kw
                    for i in range(kh):
                        for j in range(kw):
                            t = _tap(i, j, sh, sw, dh, dw, ho, wo)
                            gxp[:, cs][(slice(None), slice(None)) + t[2:]] += cols[..., i, j].transpose(0, 3, 1, 2)
        gx = None
        if gxp is not None:
            gx = gxp[:, :, ph:ph + h, pw:pw + wd] if (ph or pw) else gxp
        return gx, gw

    return _make(out, (x, w), backward, "conv2d")


def max_pool2d(x: Tensor, kernel: int = 3, stride: int = 1, padding: int = 1) -> Tensor:
    n, c, h, wd = x.shape
    k = kernel
    ho = conv_output_size(h, k, stride, padding, 1)
    wo = conv_output_size(wd, k, stride, padding, 1)
    xp = _pad(x.data, padding, padding, -np.inf)
    v = _windows(xp, k, k, stride, stride, 1, 1, ho, wo)
    flat = v.reshape(n, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gxp = np.zeros(xp.shape)
        for i in range(k):
            for j in range(k):
                gxp[_tap(i, j, stride, stride, 1, 1, ho, wo)] += g * (arg == i * k + j)
        return (gxp[:, :, padding:padding + h, padding:padding + wd],)

    return _make(out, (x,), backward, "max_pool2d")


def avg_pool2d(x: Tensor, kernel: int = 3, stride: int = 1, padding: int = 1) -> Tensor:
    """Average pooling that excludes padded cells from the divisor."""
    n, c, h, wd = x.shape
    k = kernel
    ho = conv_output_size(h, k, stride, padding, 1)
    wo = conv_output_size(wd, k, stride, padding, 1)
    xp = _pad(x.data, padding, padding)
    ones = _pad(np.ones((1, 1, h, wd)), padding, padding)
    total = np.zeros((n, c, ho, wo))
    count = np.zeros((1, 1, ho, wo))
    for i in range(k):
        for j in range(k):
            t = _tap(i, j, stride, stride, 1, 1, ho, wo)
            total += xp[t]
            count += ones[t]
    out = total / count

    def backward(g):
        gxp = np.zeros(xp.shape)
        gs = g / count
        for i in range(k):
            for j in range(k):
                gxp[_tap(i, j, stride, stride, 1, 1, ho, wo)] += gs
        return (gxp[:, :, padding:padding + h, padding:padding + wd],)

    return _make(out, (x,), backward, "avg_pool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """NCHW -> NC mean over spatial dims."""
    n, c, h, w = x.shape
    return _make(x.data.mean(axis=(2, 3)), (x,),
                 lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),), "gap")


def batch_norm(x: Tensor, eps: float = 1e-5, mean_=None, var_=None):
    """Affine-free normalisation per channel of an NCHW tensor.

    With ``mean_``/``var_`` given the statistics are treated as constants;
    otherwise batch statistics are used and differentiated through.
    Returns ``(out, batch_mean, batch_var)``.
    """
    xd = x.data
    axes = (0, 2, 3)
    if mean_ is not None:
        inv = 1.0 / np.sqrt(var_ + eps)
        out = (xd - mean_[None, :, None, None]) * inv[None, :, None, None]
        return _make(out, (x,), lambda g: (g * inv[None, :, None, None],), "batch_norm_eval"), mean_, var_
    mu = xd.mean(axis=axes)
    var = xd.var(axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu[None, :, None, None]) * inv[None, :, None, None]
    m = xd.size // xd.shape[1]

    def backward(g):
        gs = g.sum(axis=axes)
        gxh = (g * xhat).sum(axis=axes)
        gx = (g - (gs / m)[None, :, None, None] - xhat * (gxh / m)[None, :, None, None]) * inv[None, :, None, None]
        return (gx,)

    return _make(xhat, (x,), backward, "batch_norm"), mu, var
