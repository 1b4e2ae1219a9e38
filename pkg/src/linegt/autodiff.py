"""Dense-tensor engine with reverse-mode automatic differentiation.

Tensors wrap contiguous numpy arrays (float32 by default, float64 for
tightened gradient checks). Every operation records a backward closure on a
per-result tape node; `backward` walks the graph in reverse topological
order and accumulates gradients additively.
"""

import math

import numpy as np

from .exceptions import NonScalarLoss, ShapeMismatch

DEFAULT_DTYPE = np.float32

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_GELU_C = math.sqrt(2.0 / math.pi)


class Tensor:
    """A dense n-d array plus optional gradient buffer and tape node."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = data
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(constant_like(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


def tensor(data, dtype=None, requires_grad=False):
    arr = np.asarray(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
    return Tensor(arr, requires_grad=requires_grad)


def constant(data, dtype=None):
    return tensor(data, dtype=dtype, requires_grad=False)


def constant_like(value, ref):
    return Tensor(np.asarray(value, dtype=ref.data.dtype))


def _as_tensor(x, ref):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=ref.data.dtype))


def _needs_grad(*tensors):
    return any(t.requires_grad for t in tensors)


def _unbroadcast(grad, shape):
    """Sum out axes that numpy broadcasting introduced or stretched."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _result(data, parents, backward):
    if _needs_grad(*parents):
        return Tensor(data, requires_grad=True, parents=parents, backward=backward)
    return Tensor(data)


# ---------------------------------------------------------------------------
# elementwise / broadcasting binary ops


def add(a, b):
    b = _as_tensor(b, a)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeMismatch("add", a.shape, b.shape)

    def bwd(g, a=a, b=b):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.shape))

    return _result(out, (a, b), bwd)


def sub(a, b):
    b = _as_tensor(b, a)
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeMismatch("sub", a.shape, b.shape)

    def bwd(g, a=a, b=b):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.shape))

    return _result(out, (a, b), bwd)


def mul(a, b):
    b = _as_tensor(b, a)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeMismatch("mul", a.shape, b.shape)

    def bwd(g, a=a, b=b):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _result(out, (a, b), bwd)


def div(a, b):
    b = _as_tensor(b, a)
    try:
        out = a.data / b.data
    except ValueError:
        raise ShapeMismatch("div", a.shape, b.shape)

    def bwd(g, a=a, b=b):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _result(out, (a, b), bwd)


def neg(a):
    def bwd(g, a=a):
        if a.requires_grad:
            _accum(a, -g)

    return _result(-a.data, (a,), bwd)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2):
        raise ShapeMismatch("matmul", a.shape, b.shape)
    if a.data.shape[-1] != b.data.shape[0]:
        raise ShapeMismatch("matmul", a.shape, b.shape)
    out = a.data @ b.data

    def bwd(g, a=a, b=b):
        ad, bd = a.data, b.data
        if a.requires_grad:
            if ad.ndim == 2 and bd.ndim == 2:
                _accum(a, g @ bd.T)
            elif ad.ndim == 1 and bd.ndim == 2:
                _accum(a, bd @ g)
            else:  # 2D @ 1D
                _accum(a, np.outer(g, bd))
        if b.requires_grad:
            if ad.ndim == 2 and bd.ndim == 2:
                _accum(b, ad.T @ g)
            elif ad.ndim == 1 and bd.ndim == 2:
                _accum(b, np.outer(ad, g))
            else:
                _accum(b, ad.T @ g)

    return _result(out, (a, b), bwd)


def dot(a, b):
    if a.data.ndim != 1 or b.data.ndim != 1 or a.data.shape != b.data.shape:
        raise ShapeMismatch("dot", a.shape, b.shape)
    out = np.asarray(a.data @ b.data)

    def bwd(g, a=a, b=b):
        if a.requires_grad:
            _accum(a, g * b.data)
        if b.requires_grad:
            _accum(b, g * a.data)

    return _result(out, (a, b), bwd)


def transpose(a):
    def bwd(g, a=a):
        if a.requires_grad:
            _accum(a, g.T)

    return _result(a.data.T, (a,), bwd)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a, shape):
    orig = a.data.shape

    def bwd(g, a=a):
        if a.requires_grad:
            _accum(a, g.reshape(orig))

    return _result(a.data.reshape(shape), (a,), bwd)


def concat(tensors, axis=0):
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def bwd(g, tensors=tensors, offsets=offsets, axis=axis):
        for k, t in enumerate(tensors):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(offsets[k], offsets[k + 1])
                _accum(t, g[tuple(sl)])

    return _result(out, tuple(tensors), bwd)


def slice_(a, key):
    """Basic (non-repeating) indexing; backward zero-pads."""
    out = a.data[key]

    def bwd(g, a=a, key=key):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            buf[key] = g
            _accum(a, buf)

    return _result(out, (a,), bwd)


def take_rows(a, indices):
    """Gather along axis 0; repeated indices accumulate in backward."""
    idx = np.asarray(indices, dtype=np.int64)
    out = a.data[idx]

    def bwd(g, a=a, idx=idx):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            np.add.at(buf, idx, g)
            _accum(a, buf)

    return _result(out, (a,), bwd)


def segment_sum(a, segment_ids, num_segments):
    """Sum rows of `a` into `num_segments` buckets given per-row bucket ids."""
    seg = np.asarray(segment_ids, dtype=np.int64)
    out_shape = (num_segments,) + a.data.shape[1:]
    out = np.zeros(out_shape, dtype=a.data.dtype)
    np.add.at(out, seg, a.data)

    def bwd(g, a=a, seg=seg):
        if a.requires_grad:
            _accum(a, g[seg])

    return _result(out, (a,), bwd)


# ---------------------------------------------------------------------------
# reductions


def sum_(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g, a=a, axis=axis, keepdims=keepdims):
        if a.requires_grad:
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=False))

    return _result(np.asarray(out), (a,), bwd)


def mean(a, axis=None, keepdims=False):
    out = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size if axis is None else a.data.shape[axis]

    def bwd(g, a=a, axis=axis, keepdims=keepdims, n=n):
        if a.requires_grad:
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accum(a, (np.broadcast_to(g, a.data.shape) / n).astype(a.data.dtype, copy=False))

    return _result(np.asarray(out), (a,), bwd)


# ---------------------------------------------------------------------------
# elementwise nonlinearities


def exp(a):
    out = np.exp(a.data)

    def bwd(g, a=a, out=out):
        if a.requires_grad:
            _accum(a, g * out)

    return _result(out, (a,), bwd)


def log(a):
    def bwd(g, a=a):
        if a.requires_grad:
            _accum(a, g / a.data)

    return _result(np.log(a.data), (a,), bwd)


def sqrt(a):
    out = np.sqrt(a.data)

    def bwd(g, a=a, out=out):
        if a.requires_grad:
            _accum(a, g * 0.5 / out)

    return _result(out, (a,), bwd)


def abs_(a):
    def bwd(g, a=a):
        if a.requires_grad:
            _accum(a, g * np.sign(a.data))

    return _result(np.abs(a.data), (a,), bwd)


def maximum_const(a, c):
    """Elementwise max with a scalar; zero gradient on the clamped side."""
    out = np.maximum(a.data, c)

    def bwd(g, a=a, c=c):
        if a.requires_grad:
            _accum(a, g * (a.data > c))

    return _result(out, (a,), bwd)


def relu(a):
    def bwd(g, a=a):
        if a.requires_grad:
            _accum(a, g * (a.data > 0))

    return _result(np.maximum(a.data, 0), (a,), bwd)


def gelu(a):
    """tanh-approximation GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bwd(g, a=a, t=t):
        x = a.data
        if a.requires_grad:
            d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
            _accum(a, g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * d_inner))

    return _result(out.astype(x.dtype, copy=False), (a,), bwd)


def softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g, a=a, out=out, axis=axis):
        if a.requires_grad:
            gy = g * out
            _accum(a, gy - out * gy.sum(axis=axis, keepdims=True))

    return _result(out, (a,), bwd)


def layer_norm(a, eps=1e-5, axis=-1):
    """Normalize to zero mean / unit variance along `axis` (no affine)."""
    x = a.data
    mu = x.mean(axis=axis, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    istd = 1.0 / np.sqrt(var + eps)
    out = xc * istd

    def bwd(g, a=a, out=out, istd=istd, axis=axis):
        if a.requires_grad:
            n = a.data.shape[axis]
            gm = g.mean(axis=axis, keepdims=True)
            gym = (g * out).mean(axis=axis, keepdims=True)
            _accum(a, istd * (g - gm - out * gym))

    return _result(out.astype(x.dtype, copy=False), (a,), bwd)


def dropout(a, rate, rng):
    """Inverted dropout; identity when rate <= 0."""
    if rate <= 0.0:
        return a
    keep = (rng.random(a.data.shape) >= rate) / (1.0 - rate)
    keep = keep.astype(a.data.dtype)

    def bwd(g, a=a, keep=keep):
        if a.requires_grad:
            _accum(a, g * keep)

    return _result(a.data * keep, (a,), bwd)


# ---------------------------------------------------------------------------
# fused losses


def cross_entropy(logits, targets):
    """Mean negative log-softmax over rows at the target class indices."""
    tgt = np.asarray(targets, dtype=np.int64)
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=1)) + zmax[:, 0]
    n = z.shape[0]
    picked = z[np.arange(n), tgt]
    out = np.asarray((lse - picked).mean(), dtype=z.dtype)

    def bwd(g, logits=logits, tgt=tgt, shifted=shifted, n=n):
        if logits.requires_grad:
            sm = np.exp(shifted)
            sm /= sm.sum(axis=1, keepdims=True)
            sm[np.arange(n), tgt] -= 1.0
            _accum(logits, g * sm / n)

    return _result(out, (logits,), bwd)


def bce_with_logits(logits, labels, mask):
    """Sigmoid binary cross-entropy averaged over mask-selected entries."""
    x = logits.data
    y = np.asarray(labels, dtype=x.dtype)
    m = np.asarray(mask, dtype=x.dtype)
    count = m.sum()
    per = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))
    out = np.asarray((per * m).sum() / count, dtype=x.dtype)

    def bwd(g, logits=logits, y=y, m=m, count=count):
        if logits.requires_grad:
            sig = 1.0 / (1.0 + np.exp(-logits.data))
            _accum(logits, g * (sig - y) * m / count)

    return _result(out, (logits,), bwd)


def _accum(t, g):
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss):
    """Populate `.grad` on every requires_grad tensor reachable from `loss`."""
    if loss.data.shape != ():
        raise NonScalarLoss(f"loss must be a scalar, got shape {loss.data.shape}")
    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))

    loss.grad = np.ones((), dtype=loss.data.dtype)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
