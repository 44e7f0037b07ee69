"""Minimal dense-tensor engine with reverse-mode differentiation.

Storage is float32, row-major. Reductions (sums, softmax denominators,
normalization statistics) accumulate in float64 and cast back, which keeps
finite-difference gradient checks tight without giving up f32 storage.

A tape is built implicitly through parent links on each result tensor;
``backward`` walks it once in reverse topological order and then frees it.
Tensors are immutable after creation except for gradient accumulation.
"""

from __future__ import annotations

import numpy as np

DTYPE = np.float32


class default_dtype:
    """Temporarily switch the engine's storage dtype (used by the
    finite-difference oracle, which needs f64 evaluations)."""

    def __init__(self, dtype):
        self._dtype = dtype

    def __enter__(self):
        global DTYPE
        self._prev = DTYPE
        DTYPE = self._dtype
        return self

    def __exit__(self, *exc):
        global DTYPE
        DTYPE = self._prev
        return False


# Checked mode: validate shapes and reject non-finite values at op
# boundaries. Costs one isfinite scan per op.
_checked = True
_grad_enabled = True


def set_checked(flag: bool) -> None:
    global _checked
    _checked = bool(flag)


def is_checked() -> bool:
    return _checked


class no_grad:
    """Context manager disabling tape construction."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class GraphStateError(RuntimeError):
    pass


def _check_finite(arr, what="tensor"):
    if _checked and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn",
                 "_consumed")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=DTYPE)
        _check_finite(arr, "tensor input")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None
        self._consumed = False

    # -- construction ------------------------------------------------------

    @staticmethod
    def _from_op(data, parents, backward_fn):
        out = Tensor.__new__(Tensor)
        arr = np.asarray(data, dtype=DTYPE)
        _check_finite(arr, "op output")
        out.data = arr
        out.grad = None
        out._consumed = False
        track = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._parents = tuple(parents)
            out._backward_fn = backward_fn
        else:
            out._parents = ()
            out._backward_fn = None
        return out

    # -- basic protocol ----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def _accum_grad(self, g):
        if not self.requires_grad:
            return
        if g.shape != self.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} != tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = g.astype(DTYPE, copy=True)
        else:
            self.grad += g.astype(DTYPE, copy=False)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operators ---------------------------------------------------------

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def backward(loss: Tensor) -> None:
    """Run reverse-mode accumulation from a scalar loss.

    The tape is freed afterwards; calling backward twice on the same graph
    raises GraphStateError.
    """
    if loss.data.size != 1:
        raise ShapeError("backward expects a scalar loss")
    if loss._consumed:
        raise GraphStateError("backward already ran on this graph")
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if _checked and not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite gradient during backward")
        if node._backward_fn is not None:
            parent_grads = node._backward_fn(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=DTYPE)
                if id(p) in grads:
                    grads[id(p)] += pg
                else:
                    grads[id(p)] = pg.copy() if pg.base is not None else pg
        elif node.requires_grad:
            node._accum_grad(g)
        node._consumed = True
        node._parents = ()
        node._backward_fn = None
    loss._consumed = True


# -- broadcasting helpers ---------------------------------------------------

def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to the original shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)), dtype=np.float64)
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True, dtype=np.float64)
    return g.astype(DTYPE).reshape(shape)


# -- elementwise ops --------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(out, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(out, (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape))

    return Tensor._from_op(out, (a, b), bw)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._from_op(out, (a, b), bw)


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * out,))


def log(x):
    x = as_tensor(x)
    return Tensor._from_op(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x):
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g / (2.0 * out),))


def square(x):
    x = as_tensor(x)
    return Tensor._from_op(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def pow_(x, p: float):
    x = as_tensor(x)
    out = np.power(x.data, p)

    def bw(g):
        return (g * p * np.power(x.data, p - 1.0),)

    return Tensor._from_op(out, (x,), bw)


def tanh(x):
    x = as_tensor(x)
    out = np.tanh(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * (1.0 - out * out),))


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return Tensor._from_op(x.data * mask, (x,), lambda g: (g * mask,))


def gelu(x):
    """tanh-approximation GELU."""
    x = as_tensor(x)
    c = np.float32(np.sqrt(2.0 / np.pi))
    xd = x.data
    inner = c * (xd + 0.044715 * xd ** 3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def bw(g):
        dinner = c * (1.0 + 3 * 0.044715 * xd * xd)
        dt = (1.0 - t * t) * dinner
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * dt),)

    return Tensor._from_op(out, (x,), bw)


def elu_plus_one(x):
    """elu(x) + 1: the positive kernel used by linear attention."""
    x = as_tensor(x)
    neg = x.data <= 0
    ex = np.exp(np.minimum(x.data, 0.0))
    out = np.where(neg, ex, x.data + 1.0)

    def bw(g):
        return (g * np.where(neg, ex, 1.0),)

    return Tensor._from_op(out, (x,), bw)


def clip(x, lo: float, hi: float):
    """Clamp values; gradient passes through inside the range only."""
    x = as_tensor(x)
    out = np.clip(x.data, lo, hi)
    mask = (x.data >= lo) & (x.data <= hi)
    return Tensor._from_op(out, (x,), lambda g: (g * mask,))


# -- reductions -------------------------------------------------------------

def sum_(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.shape),)

    return Tensor._from_op(out, (x,), bw)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    if axis is None:
        n = x.size
    elif isinstance(axis, tuple):
        n = int(np.prod([x.shape[a] for a in axis]))
    else:
        n = x.shape[axis]
    return mul(sum_(x, axis, keepdims), 1.0 / n)


# -- shape ops --------------------------------------------------------------

def reshape(x, *shape):
    x = as_tensor(x)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    old = x.shape
    out = x.data.reshape(shape)
    return Tensor._from_op(out, (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=None):
    x = as_tensor(x)
    out = np.transpose(x.data, axes)
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)
    return Tensor._from_op(out, (x,), lambda g: (np.transpose(g, inv),))


def swapaxes(x, a, b):
    x = as_tensor(x)
    out = np.swapaxes(x.data, a, b)
    return Tensor._from_op(out, (x,), lambda g: (np.swapaxes(g, a, b),))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._from_op(out, tuple(tensors), bw)


def narrow(x, axis, start, length):
    """Contiguous slice along one axis."""
    x = as_tensor(x)
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = x.data[idx]

    def bw(g):
        full = np.zeros(x.shape, dtype=DTYPE)
        full[idx] = g
        return (full,)

    return Tensor._from_op(out, (x,), bw)


def take(x, indices, axis):
    """Gather along one axis; duplicate indices accumulate gradient."""
    x = as_tensor(x)
    indices = np.asarray(indices, dtype=np.int64)
    out = np.take(x.data, indices, axis=axis)

    def bw(g):
        full = np.zeros(x.shape, dtype=DTYPE)
        # scatter-add handles repeated indices (e.g. replicate padding)
        np.add.at(full, (slice(None),) * axis + (indices,), g)
        return (full,)

    return Tensor._from_op(out, (x,), bw)


def broadcast_to(x, shape):
    x = as_tensor(x)
    out = np.broadcast_to(x.data, shape)
    return Tensor._from_op(out.copy(), (x,), lambda g: (_unbroadcast(g, x.shape),))


# -- linear algebra ---------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul requires rank >= 2 operands")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._from_op(out, (a, b), bw)


# -- normalization / softmax -------------------------------------------------

def softmax(x, axis=-1):
    """Numerically stabilized softmax; rows sum to 1 along ``axis``."""
    x = as_tensor(x)
    xd = x.data.astype(np.float64)
    xd = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(xd)
    out64 = e / e.sum(axis=axis, keepdims=True)
    out = out64.astype(DTYPE)

    def bw(g):
        g64 = g.astype(np.float64)
        dot = (g64 * out64).sum(axis=axis, keepdims=True)
        return ((out64 * (g64 - dot)).astype(DTYPE),)

    return Tensor._from_op(out, (x,), bw)


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    xd = x.data.astype(np.float64)
    xd = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(xd).sum(axis=axis, keepdims=True))
    out64 = xd - lse
    sm = np.exp(out64)

    def bw(g):
        g64 = g.astype(np.float64)
        return ((g64 - sm * g64.sum(axis=axis, keepdims=True)).astype(DTYPE),)

    return Tensor._from_op(out64.astype(DTYPE), (x,), bw)


def layer_norm(x, gamma=None, beta=None, axis=-1, eps=1e-5):
    """Standardize along ``axis`` then apply the optional affine."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = as_tensor(x)
    xd = x.data.astype(np.float64)
    mu = xd.mean(axis=axis, keepdims=True)
    var = xd.var(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat64 = (xd - mu) * inv
    xhat = Tensor._from_op(xhat64.astype(DTYPE), (x,), None)
    n = x.shape[axis]

    def bw(g):
        g64 = g.astype(np.float64)
        gm = g64.mean(axis=axis, keepdims=True)
        gxm = (g64 * xhat64).mean(axis=axis, keepdims=True)
        return ((inv * (g64 - gm - xhat64 * gxm)).astype(DTYPE),)

    xhat._backward_fn = bw if xhat.requires_grad else None
    _ = n  # shape bookkeeping only
    if gamma is not None:
        xhat = mul(xhat, gamma)
    if beta is not None:
        xhat = add(xhat, beta)
    return xhat


# -- convolution -------------------------------------------------------------

def _im2col(x, kh, kw, stride, padding):
    b, c, h, w = x.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError("kernel larger than padded input")
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    s = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, (b, c, kh, kw, oh, ow),
        (s[0], s[1], s[2], s[3], s[2] * stride, s[3] * stride))
    return view.reshape(b, c * kh * kw, oh * ow).copy(), oh, ow


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation; weight is [Cout, Cin, kh, kw]."""
    x = as_tensor(x)
    weight = as_tensor(weight)
    b, c, h, w = x.shape
    co, ci, kh, kw = weight.shape
    if ci != c:
        raise ShapeError(f"conv2d channels: input {c} vs weight {ci}")
    cols, oh, ow = _im2col(x.data, kh, kw, stride, padding)
    wmat = weight.data.reshape(co, ci * kh * kw)
    out = (wmat @ cols).reshape(b, co, oh, ow)

    def bw(g):
        gmat = g.reshape(b, co, oh * ow)
        # f64 accumulation keeps finite-difference checks tight
        gw = np.einsum("bop,bkp->ok", gmat, cols,
                       dtype=np.float64).astype(DTYPE).reshape(weight.shape)
        gcols = np.einsum("ok,bop->bkp", wmat, gmat).astype(DTYPE)
        gx = _col2im(gcols, x.shape, kh, kw, stride, padding)
        return gx, gw

    out_t = Tensor._from_op(out, (x, weight), bw)
    if bias is not None:
        out_t = add(out_t, reshape(as_tensor(bias), (1, co, 1, 1)))
    return out_t


def _col2im(cols, xshape, kh, kw, stride, padding):
    b, c, h, w = xshape
    hp, wp = h + 2 * padding, w + 2 * padding
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    xp = np.zeros((b, c, hp, wp), dtype=DTYPE)
    cols = cols.reshape(b, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                cols[:, :, i, j]
    if padding:
        return xp[:, :, padding:hp - padding, padding:wp - padding]
    return xp


# -- bilinear resize ----------------------------------------------------------

def _resize_weights(in_size, out_size):
    # align_corners=False convention
    scale = in_size / out_size
    coords = (np.arange(out_size) + 0.5) * scale - 0.5
    coords = np.clip(coords, 0, in_size - 1)
    lo = np.floor(coords).astype(np.int64)
    hi = np.minimum(lo + 1, in_size - 1)
    frac = (coords - lo).astype(DTYPE)
    return lo, hi, frac


def bilinear_resize(x, out_h, out_w):
    """Resize [B,C,H,W] spatially; exact identity when sizes match."""
    x = as_tensor(x)
    b, c, h, w = x.shape
    if out_h < 1 or out_w < 1:
        raise ShapeError("output dims must be >= 1")
    if out_h == h and out_w == w:
        return Tensor._from_op(x.data.copy(), (x,), lambda g: (g,))
    ylo, yhi, fy = _resize_weights(h, out_h)
    xlo, xhi, fx = _resize_weights(w, out_w)
    fy = fy.reshape(-1, 1)
    fx = fx.reshape(1, -1)
    d = x.data
    top = d[:, :, ylo][:, :, :, xlo] * (1 - fx) + d[:, :, ylo][:, :, :, xhi] * fx
    bot = d[:, :, yhi][:, :, :, xlo] * (1 - fx) + d[:, :, yhi][:, :, :, xhi] * fx
    out = top * (1 - fy) + bot * fy

    def bw(g):
        gx = np.zeros_like(d)
        gt = g * (1 - fy)
        gb = g * fy
        # scatter the four corners
        np.add.at(gx, (slice(None), slice(None), ylo[:, None], xlo[None, :]),
                  gt * (1 - fx))
        np.add.at(gx, (slice(None), slice(None), ylo[:, None], xhi[None, :]),
                  gt * fx)
        np.add.at(gx, (slice(None), slice(None), yhi[:, None], xlo[None, :]),
                  gb * (1 - fx))
        np.add.at(gx, (slice(None), slice(None), yhi[:, None], xhi[None, :]),
                  gb * fx)
        return (gx,)

    return Tensor._from_op(out, (x,), bw)


# -- attention ----------------------------------------------------------------

def attention(q, k, v, scale=None):
    """softmax(q @ k^T * scale) @ v over the last two axes."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError("q/k feature dims differ")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError("k/v sequence lengths differ")
    if scale is None:
        scale = 1.0 / np.sqrt(q.shape[-1])
    scores = mul(matmul(q, swapaxes(k, -1, -2)), scale)
    probs = softmax(scores, axis=-1)
    return matmul(probs, v)


def linear_attention(q, k, v):
    """Kernelized attention with the elu+1 feature map, O(N d^2)."""
    q, k = elu_plus_one(q), elu_plus_one(k)
    kv = matmul(swapaxes(k, -1, -2), v)
    z = matmul(q, sum_(swapaxes(k, -1, -2), axis=-1, keepdims=True))
    return div(matmul(q, kv), add(z, 1e-6))


# -- gradient checking --------------------------------------------------------

def finite_diff_check(f, x: Tensor, h=1e-3, tol=1e-3):
    """Compare analytic gradients of scalar f(x) against central differences.

    Returns (passed, max_rel_err) with a guarded relative error
    |a - d| / max(1, |a|, |d|) so near-zero gradients are judged absolutely.
    Both sides are evaluated in f64 so the comparison measures the backward
    rules, not f32 rounding of the forward pass.
    """
    with default_dtype(np.float64):
        probe = Tensor(np.asarray(x.data, dtype=np.float64), requires_grad=True)
        out = f(probe)
        backward(out)
        analytic = (probe.grad.copy() if probe.grad is not None
                    else np.zeros_like(probe.data))

        fd = np.zeros_like(probe.data)
        flat = probe.data.reshape(-1)
        fdf = fd.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(Tensor(probe.data.copy())).data)
            flat[i] = orig - h
            fm = float(f(Tensor(probe.data.copy())).data)
            flat[i] = orig
            fdf[i] = (fp - fm) / (2.0 * h)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(fd)))
    rel = np.abs(analytic - fd) / denom
    max_rel = float(rel.max()) if rel.size else 0.0
    return max_rel < tol, max_rel
