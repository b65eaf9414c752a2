"""Dense float64 tensors with reverse-mode automatic differentiation.

Every primitive returns a new :class:`Tensor`.  When any input requires a
gradient (and recording is enabled) the output keeps references to its
inputs plus a backward rule; :func:`backward` linearizes that graph into a
:class:`Tape` and replays it in reverse.
"""
from __future__ import annotations

import contextlib
import threading

import numpy as np

from . import kernels
from .errors import ConfigurationError, ContractError, DimensionError

# per-thread so parallel episode workers cannot switch each other's recording off
_state = threading.local()


def is_recording():
    return getattr(_state, "recording", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    prev = is_recording()
    _state.recording = False
    try:
        yield
    finally:
        _state.recording = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "_grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self._grad = None
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    @classmethod
    def _wrap(cls, data):
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = False
        t._grad = None
        t._parents = ()
        t._backward = None
        t.op = "const"
        return t

    # -- gradient bookkeeping -------------------------------------------------
    @property
    def grad(self):
        if not self.requires_grad:
            return None
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value):
        self._grad = None if value is None else np.asarray(value, dtype=np.float64)

    def zero_grad(self):
        if self.requires_grad:
            self._grad = np.zeros_like(self.data)

    def detach(self):
        return Tensor._wrap(self.data)

    def backward(self):
        backward(self)

    # -- array-like surface ---------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op})"

    def __len__(self):
        return self.data.shape[0]

    # -- operators --------------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=np.float64))


def _result(data, parents, backward_fn, op):
    out = Tensor._wrap(data)
    out.op = op
    if is_recording() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


class Tape:
    """Topologically ordered record of the graph feeding one output.

    ``nodes`` lists every tensor that requires a gradient, each after all of
    its inputs.  Leaves appear with no backward rule.
    """

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def record(cls, root):
        order, seen = [], set()
        stack = [(root, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    @property
    def ops(self):
        return [n for n in self.nodes if n._backward is not None]

    def __len__(self):
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``grad`` of every leaf that requires it."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not on the tape (no input requires grad)")
    tape = Tape.record(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad  # allocate
            node._grad += g
            continue
        for p, gp in zip(node._parents, node._backward(g)):
            if gp is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + gp
            else:
                grads[key] = gp


# -- elementwise ------------------------------------------------------------------
def _check_pair(a, b, op):
    sa, sb = a.data.shape, b.data.shape
    if sa == sb or a.data.size == 1 and a.data.ndim <= 1 or b.data.size == 1 and b.data.ndim <= 1:
        return
    if len(sa) == len(sb) and all(x == y or x == 1 or y == 1 for x, y in zip(sa, sb)):
        return
    raise DimensionError(f"{op}: shapes {sa} and {sb} are not conformable")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if len(shape) < g.ndim:
        g = g.sum(axis=tuple(range(g.ndim - len(shape))))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_pair(a, b, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_pair(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_pair(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _result(ad * bd, (a, b), bw, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_pair(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return _result(out, (a, b), bw, "div")


def neg(a):
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    # np.maximum keeps NaN visible so divergence is caught downstream
    return _result(np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,), "exp")


def log(x):
    x = as_tensor(x)
    xd = x.data
    return _result(np.log(xd), (x,), lambda g: (g / xd,), "log")


def sqrt(x):
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _result(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


# -- reductions and shape -----------------------------------------------------------
def sum_(x, axis=None, keepdims=False):
    x = as_tensor(x)
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _result(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), bw, "sum")


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return sum_(x, axis, keepdims) * (1.0 / n)


def reshape(x, shape):
    x = as_tensor(x)
    shape = tuple(int(s) for s in shape)
    if -1 not in shape and int(np.prod(shape)) != x.data.size:
        raise DimensionError(f"reshape: cannot view shape {x.shape} as {shape}")
    orig = x.shape
    return _result(x.data.reshape(shape).copy(), (x,), lambda g: (g.reshape(orig),), "reshape")


def transpose(x):
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"transpose: expected a matrix, got shape {x.shape}")
    return _result(x.data.T.copy(), (x,), lambda g: (g.T,), "transpose")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(ref, t.shape))
                                     if i != axis % len(ref)):
            raise DimensionError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                   lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not conformable")
    ad, bd = a.data, b.data

    def bw(g):
        return (g @ bd.T if a.requires_grad else None,
                ad.T @ g if b.requires_grad else None)

    return _result(ad @ bd, (a, b), bw, "matmul")


def softmax(x, axis=-1):
    x = as_tensor(x)
    z = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)
    return _result(out, (x,),
                   lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),), "softmax")


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    return _result(out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),), "log_softmax")


def l2_norm(x, axis=-1, keepdims=False):
    """Euclidean norm along ``axis``; the subgradient at the origin is taken as 0."""
    x = as_tensor(x)
    xd = x.data
    n = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        safe = np.where(n > 0, n, 1.0)
        return (g * xd / safe,)

    return _result(n if keepdims else np.squeeze(n, axis=axis), (x,), bw, "l2_norm")


def global_avg_pool(x):
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool: expected NCHW, got shape {x.shape}")
    n, c, h, w = x.shape

    def bw(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), (n, c, h, w)),)

    return _result(x.data.mean(axis=(2, 3)), (x,), bw, "global_avg_pool")


# -- convolution --------------------------------------------------------------------
def conv2d(x, w, stride=1, padding=0, groups=1):
    """2-D cross-correlation of NCHW ``x`` with kernel ``w`` of shape (O, C/groups, kh, kw)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d: input {x.shape} and kernel {w.shape} must both be 4-D")
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    if groups < 1 or c % groups or o % groups:
        raise ConfigurationError(
            f"conv2d: groups={groups} must divide in_channels={c} and out_channels={o}")
    if cg * groups != c:
        raise DimensionError(f"conv2d: input {x.shape} and kernel {w.shape} disagree on channels")
    p, s = padding, stride
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    hp, wp = h + 2 * p, wd + 2 * p
    if hp < kh or wp < kw:
        raise DimensionError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")
    ho, wo = (hp - kh) // s + 1, (wp - kw) // s + 1
    og, k = o // groups, cg * kh * kw
    if kh == 1 and kw == 1:
        cols = xp[:, :, ::s, ::s] if s > 1 else xp
        cols = np.ascontiguousarray(cols).reshape(n, groups, k, ho * wo)
    else:
        cols = kernels.im2col(np.ascontiguousarray(xp), kh, kw, s).reshape(n, groups, k, ho * wo)
    wm = w.data.reshape(groups, og, k)
    out = np.matmul(wm, cols).reshape(n, o, ho, wo)

    def bw(g):
        go = g.reshape(n, groups, og, ho * wo)
        gw = gx = None
        if w.requires_grad:
            gw = np.empty((groups, og, k))
            for gi in range(groups):
                gw[gi] = np.tensordot(go[:, gi], cols[:, gi], axes=([0, 2], [0, 2]))
            gw = gw.reshape(w.shape)
        if x.requires_grad:
            gcols = np.matmul(wm.transpose(0, 2, 1), go)
            if kh == 1 and kw == 1:
                gcols = gcols.reshape(n, c, ho, wo)
                if s > 1:
                    gxp = np.zeros((n, c, hp, wp))
                    gxp[:, :, ::s, ::s][:, :, :ho, :wo] = gcols
                else:
                    gxp = gcols
            else:
                gxp = kernels.col2im(np.ascontiguousarray(gcols.reshape(n, c, kh, kw, ho, wo)),
                                     hp, wp, s)
            gx = gxp[:, :, p:p + h, p:p + wd] if p else gxp
        return gx, gw

    return _result(out, (x, w), bw, "conv2d")


# -- normalization ------------------------------------------------------------------
def batch_norm(x, gamma=None, beta=None, eps=1e-5):
    """Normalize with the statistics of this batch over all axes but 1.

    Returns ``(y, batch_mean, batch_var)``; the statistics are plain arrays
    (the biased variance) for running-average bookkeeping.
    """
    x = as_tensor(x)
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, x.shape[1]) + (1,) * (x.ndim - 2)
    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    m = x.data.size // x.shape[1]
    parents = [x]
    out = xhat
    if gamma is not None:
        gamma, beta = as_tensor(gamma), as_tensor(beta)
        parents += [gamma, beta]
        out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def bw(g):
        dxhat = g if gamma is None else g * gamma.data.reshape(bshape)
        gx = None
        if x.requires_grad:
            gx = inv / m * (m * dxhat - dxhat.sum(axis=axes, keepdims=True)
                            - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
        if gamma is None:
            return (gx,)
        return (gx, (g * xhat).sum(axis=axes), g.sum(axis=axes))

    y = _result(out, tuple(parents), bw, "batch_norm")
    return y, mu.reshape(-1), var.reshape(-1)


def channel_affine(x, scale, shift):
    """Per-channel ``x * scale + shift`` along axis 1 (FiLM, inference-mode batchnorm)."""
    x, scale, shift = as_tensor(x), as_tensor(scale), as_tensor(shift)
    c = x.shape[1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise DimensionError(
            f"channel_affine: input {x.shape} vs scale {scale.shape} / shift {shift.shape}")
    bshape = (1, c) + (1,) * (x.ndim - 2)
    return x * reshape(scale, bshape) + reshape(shift, bshape)
