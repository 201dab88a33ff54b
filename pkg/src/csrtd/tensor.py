"""Dense numpy-backed tensors with a dynamic reverse-mode tape.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the upstream gradient to one gradient per parent.  Calling
:func:`backward` on a scalar walks that tape once in reverse topological
order and frees it.

Arrays are float32 by default.  Inside :func:`check_mode` new tensors are
float64, which is what the finite-difference harness runs under.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

_DTYPE = np.float32
_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class ConfigError(ValueError):
    """Raised for invalid op configuration (kernel size, output size, ...)."""


class GraphError(RuntimeError):
    """Raised for misuse of the autodiff tape."""


def default_dtype():
    return _DTYPE


@contextlib.contextmanager
def check_mode():
    """Create new tensors in float64 for the duration of the block."""
    global _DTYPE
    prev = _DTYPE
    _DTYPE = np.float64
    try:
        yield
    finally:
        _DTYPE = prev


@contextlib.contextmanager
def no_grad():
    """Run ops without recording the tape."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_freed")

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.ascontiguousarray(data, dtype=dtype or _DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._freed = False

    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._freed = False
        needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, params: Optional[Iterable["Tensor"]] = None) -> None:
        backward(self, params)

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=dtype)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ----------------------------------------------------------------------
# reverse pass
# ----------------------------------------------------------------------
def _topo_order(root: Tensor) -> list:
    """Post-order DFS: every node appears after all of its parents."""
    order, done = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in done:
            continue
        done.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in done:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Optional[Iterable[Tensor]] = None) -> None:
    """Populate ``.grad`` on every leaf reachable from ``loss``.

    When ``params`` is given, any of them not reached by the graph receives a
    zero gradient.  A leaf whose gradient was not reset since the previous
    backward raises :class:`GraphError`, as does a second backward through an
    already freed tape.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._freed:
        raise GraphError("graph already freed by a previous backward; run a new forward pass")
    params = list(params) if params is not None else []
    for p in params:
        if p.grad is not None:
            raise GraphError("parameter gradient not reset since the last backward; call zero_grad()")

    if loss.requires_grad:
        order = _topo_order(loss)
        leaves = [n for n in order if n._backward is None]
        for leaf in leaves:
            if leaf.grad is not None:
                raise GraphError("leaf gradient not reset since the last backward; call zero_grad()")
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if node._backward is None:
                node.grad = g if g is not None else np.zeros_like(node.data)
                continue
            if g is not None:
                for parent, pg in zip(node._parents, node._backward(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
            node._parents = ()
            node._backward = None
            node._freed = True
        loss._freed = True
    else:
        loss._freed = True
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)


# ----------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------
def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    b = _as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor._make(a.data + b.data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return Tensor._make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        c = float(b)
        return Tensor._make(a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,))
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)

    return Tensor._make(ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a = _as_tensor(a, b.dtype if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        ga = _unbroadcast(g / bd, sa) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, sb) if b.requires_grad else None
        return ga, gb

    return Tensor._make(out, (a, b), bw)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._make(np.log(ad), (a,), lambda g: (g / ad,))


def gelu(a: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    out = (x * cdf).astype(x.dtype, copy=False)

    def bw(g):
        pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
        return ((g * (cdf + x * pdf)).astype(x.dtype, copy=False),)

    return Tensor._make(out, (a,), bw)


# ----------------------------------------------------------------------
# reductions and shape ops
# ----------------------------------------------------------------------
def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._make(np.asarray(out), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    out = a.data.reshape(shape)
    if out.size != a.data.size:
        raise ShapeError(f"cannot reshape {src} into {shape}")
    return Tensor._make(out, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return Tensor._make(out, (a,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def getitem(a: Tensor, idx) -> Tensor:
    shape = a.shape
    out = np.ascontiguousarray(a.data[idx])

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return Tensor._make(out, (a,), bw)


def broadcast_to(a: Tensor, shape) -> Tensor:
    src = a.shape
    out = np.ascontiguousarray(np.broadcast_to(a.data, shape))
    return Tensor._make(out, (a,), lambda g: (_unbroadcast(g, src),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of an empty list")
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(
                f"concat along axis {axis}: incompatible shapes {[t.shape for t in tensors]}"
            )
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=ax)

    def bw(g):
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl = [slice(None)] * nd
            sl[ax] = slice(lo, hi)
            parts.append(np.ascontiguousarray(g[tuple(sl)]))
        return parts

    return Tensor._make(out, tensors, bw)


# ----------------------------------------------------------------------
# linear algebra
# ----------------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for ``a[..., m, k]`` and ``b[k, n]`` or ``b[..., k, n]``."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError(f"matmul batch mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return ga, gb

    return Tensor._make(out, (a, b), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._make(y, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (x,), bw)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis, then scale by ``gamma`` and shift by ``beta``."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gamma.data
    out = xhat * gd + beta.data
    n = xd.shape[-1]
    lead = tuple(range(xd.ndim - 1))

    def bw(g):
        gg = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gb = g.sum(axis=lead) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gd
            gx = rstd * (
                dxhat
                - dxhat.sum(axis=-1, keepdims=True) / n
                - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True) / n
            )
        return gx, gg, gb

    return Tensor._make(out.astype(xd.dtype, copy=False), (x, gamma, beta), bw)


# ----------------------------------------------------------------------
# spatial ops; accept C×H×W or N×C×H×W
# ----------------------------------------------------------------------
def _batched(x: Tensor):
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ShapeError(f"expected C×H×W or N×C×H×W, got {x.shape}")
    return x, False


def _unbatch(out: Tensor, squeezed: bool) -> Tensor:
    return reshape(out, out.shape[1:]) if squeezed else out


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` with ``kernel[C_out, C_in, k, k]``."""
    x, squeezed = _batched(x)
    n, c, h, w = x.shape
    co, ci, kh, kw = kernel.shape
    if ci != c:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, kernel {kernel.shape}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ConfigError(
            f"conv2d output size {ho}×{wo} is not positive (input {h}×{w}, k={kh}, s={stride}, p={padding})"
        )
    xd, kd = x.data, kernel.data

    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        wm = kd.reshape(co, ci)
        flat = xd.reshape(n, c, h * w)
        out = np.matmul(wm, flat)
        if bias is not None:
            out += bias.data[:, None]
        out = out.reshape(n, co, h, w)

        def bw(g):
            gf = g.reshape(n, co, h * w)
            gx = np.matmul(wm.T, gf).reshape(n, c, h, w) if x.requires_grad else None
            gk = None
            if kernel.requires_grad:
                gk = np.einsum("nop,ncp->oc", gf, flat).reshape(co, ci, 1, 1)
            gb = gf.sum(axis=(0, 2)) if bias is not None and bias.requires_grad else None
            return gx, gk, gb

    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
        wm = kd.reshape(co, -1)
        out = cols @ wm.T
        if bias is not None:
            out += bias.data
        out = np.ascontiguousarray(out.reshape(n, ho, wo, co).transpose(0, 3, 1, 2))

        def bw(g):
            gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, co)
            gk = (gm.T @ cols).reshape(kd.shape) if kernel.requires_grad else None
            gb = gm.sum(axis=0) if bias is not None and bias.requires_grad else None
            gx = None
            if x.requires_grad:
                dcols = (gm @ wm).reshape(n, ho, wo, c, kh, kw)
                gxp = np.zeros(xp.shape, dtype=g.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                            :, :, :, :, i, j
                        ].transpose(0, 3, 1, 2)
                gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
            return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _unbatch(Tensor._make(out, parents, bw), squeezed)


def depthwise_conv2d(x: Tensor, kernel: Tensor, padding: Optional[int] = None) -> Tensor:
    """Per-channel ``k×k`` cross-correlation that preserves spatial size."""
    x, squeezed = _batched(x)
    n, c, h, w = x.shape
    kc, k, k2 = kernel.shape
    if k != k2 or k % 2 == 0:
        raise ConfigError(f"depthwise kernel must be square with odd size, got {k}×{k2}")
    if kc != c:
        raise ShapeError(f"depthwise channel mismatch: input {x.shape}, kernel {kernel.shape}")
    p = (k - 1) // 2
    if padding is not None and padding != p:
        raise ConfigError(f"depthwise padding must be (k-1)/2 = {p}, got {padding}")
    xd, kd = x.data, kernel.data
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    out = np.zeros_like(xd)
    for i in range(k):
        for j in range(k):
            out += xp[:, :, i : i + h, j : j + w] * kd[None, :, i, j, None, None]

    def bw(g):
        gk = np.empty_like(kd) if kernel.requires_grad else None
        gxp = np.zeros_like(xp) if x.requires_grad else None
        for i in range(k):
            for j in range(k):
                if gk is not None:
                    gk[:, i, j] = (g * xp[:, :, i : i + h, j : j + w]).sum(axis=(0, 2, 3))
                if gxp is not None:
                    gxp[:, :, i : i + h, j : j + w] += g * kd[None, :, i, j, None, None]
        gx = None
        if gxp is not None:
            gx = gxp[:, :, p : p + h, p : p + w] if p else gxp
        return gx, gk

    return _unbatch(Tensor._make(out, (x, kernel), bw), squeezed)


def _upsample_matrix(n: int, dtype) -> np.ndarray:
    # bilinear ×2, half-pixel centres, edge-clamped
    m = np.zeros((2 * n, n), dtype=dtype)
    for o in range(2 * n):
        src = (o + 0.5) / 2.0 - 0.5
        lo = int(np.floor(src))
        frac = src - lo
        m[o, min(max(lo, 0), n - 1)] += 1.0 - frac
        m[o, min(max(lo + 1, 0), n - 1)] += frac
    return m


def upsample2x(x: Tensor) -> Tensor:
    x, squeezed = _batched(x)
    _, _, h, w = x.shape
    uh = _upsample_matrix(h, x.dtype)
    uw = _upsample_matrix(w, x.dtype)
    out = np.matmul(np.matmul(uh, x.data), uw.T)

    def bw(g):
        return (np.matmul(np.matmul(uh.T, g), uw),)

    return _unbatch(Tensor._make(out, (x,), bw), squeezed)


def avgpool2x(x: Tensor) -> Tensor:
    x, squeezed = _batched(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avgpool2x needs even spatial dims, got {h}×{w}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def bw(g):
        gg = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25
        return (gg.astype(g.dtype, copy=False),)

    return _unbatch(Tensor._make(out, (x,), bw), squeezed)
