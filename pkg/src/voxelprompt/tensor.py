"""Dense float64 tensors with reverse-mode automatic differentiation.

Small by design: only the operations the volumetric segmentation network
needs, each with a hand-written vectorized backward. Layout is row-major,
channels-first [N, C, D, H, W]. Everything runs in 64-bit on the CPU so
numerical tolerances stay tight and runs are reproducible.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "tensor",
    "parameter",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "absolute",
    "clip",
    "tsum",
    "tmean",
    "reshape",
    "transpose2d",
    "concat",
    "embed_rows",
    "scale_rows",
    "conv3d",
    "trilinear_upsample",
    "l2_normalize",
    "softmax_lastdim",
    "group_norm",
    "rotate_pairs",
    "matrix_exp",
    "backward",
]


class Tensor:
    """A dense float64 array plus an optional gradient buffer.

    Nodes created by operations keep references to their inputs; calling
    ``backward`` on a scalar result walks that graph once in reverse
    topological order. Data buffers are treated as immutable once created;
    only ``grad`` is mutated afterwards.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, _parents=(), name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = None
        self.name = name

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad}{tag})"

    def item(self):
        return float(self.data)

    # -- gradient plumbing ---------------------------------------------------

    def _ensure_grad(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data):
    return Tensor(data, requires_grad=False)


def parameter(data, name=None):
    return Tensor(data, requires_grad=True, name=name)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Execution record rooted at one output: nodes in forward order.

    ``backward`` seeds the root with ones and visits every node exactly once
    in reverse topological order, accumulating into leaf ``grad`` buffers.
    """

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes = self._toposort(root)

    @staticmethod
    def _toposort(root):
        order = []
        seen = set()
        stack = [(root, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        return order

    def backward(self):
        # op outputs get a fresh gradient each pass; only leaves accumulate
        for node in self.nodes:
            if node._backward is not None:
                node.grad = None
        self.root._ensure_grad()
        self.root.grad += np.ones_like(self.root.data)
        for node in reversed(self.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def backward(loss: Tensor):
    """Populate gradients of every requires_grad leaf reachable from ``loss``.

    Repeated calls without zeroing accumulate, matching the contract used by
    gradient accumulation in the training loop.
    """
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    Tape(loss).backward()


def _node(data, parents, bw):
    req = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req, _parents=tuple(p for p in parents if p.requires_grad) if req else ())
    if req:
        out._backward = bw
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise and reductions ---------------------------------------------


def add(a, b):
    a, b = _lift(a), _lift(b)
    out_data = a.data + b.data

    def bw(g):
        if a.requires_grad:
            a._ensure_grad()
            a.grad += _unbroadcast(g, a.data.shape)
        if b.requires_grad:
            b._ensure_grad()
            b.grad += _unbroadcast(g, b.data.shape)

    return _node(out_data, (a, b), bw)


def sub(a, b):
    a, b = _lift(a), _lift(b)
    out_data = a.data - b.data

    def bw(g):
        if a.requires_grad:
            a._ensure_grad()
            a.grad += _unbroadcast(g, a.data.shape)
        if b.requires_grad:
            b._ensure_grad()
            b.grad -= _unbroadcast(g, b.data.shape)

    return _node(out_data, (a, b), bw)


def mul(a, b):
    a, b = _lift(a), _lift(b)
    out_data = a.data * b.data

    def bw(g):
        if a.requires_grad:
            a._ensure_grad()
            a.grad += _unbroadcast(g * b.data, a.data.shape)
        if b.requires_grad:
            b._ensure_grad()
            b.grad += _unbroadcast(g * a.data, b.data.shape)

    return _node(out_data, (a, b), bw)


def div(a, b):
    a, b = _lift(a), _lift(b)
    out_data = a.data / b.data

    def bw(g):
        if a.requires_grad:
            a._ensure_grad()
            a.grad += _unbroadcast(g / b.data, a.data.shape)
        if b.requires_grad:
            b._ensure_grad()
            b.grad += _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)

    return _node(out_data, (a, b), bw)


def neg(a):
    def bw(g):
        a._ensure_grad()
        a.grad -= g

    return _node(-a.data, (a,), bw)


def relu(a):
    mask = a.data > 0
    out_data = np.where(mask, a.data, 0.0)

    def bw(g):
        a._ensure_grad()
        a.grad += g * mask

    return _node(out_data, (a,), bw)


def sigmoid(a):
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def bw(g):
        a._ensure_grad()
        a.grad += g * out_data * (1.0 - out_data)

    return _node(out_data, (a,), bw)


def exp(a):
    out_data = np.exp(a.data)

    def bw(g):
        a._ensure_grad()
        a.grad += g * out_data

    return _node(out_data, (a,), bw)


def log(a):
    out_data = np.log(a.data)

    def bw(g):
        a._ensure_grad()
        a.grad += g / a.data

    return _node(out_data, (a,), bw)


def absolute(a):
    sign = np.sign(a.data)
    out_data = np.abs(a.data)

    def bw(g):
        a._ensure_grad()
        a.grad += g * sign

    return _node(out_data, (a,), bw)


def clip(a, lo, hi):
    """Clamp values; gradient passes only through the interior."""
    inside = (a.data > lo) & (a.data < hi)
    out_data = np.clip(a.data, lo, hi)

    def bw(g):
        a._ensure_grad()
        a.grad += g * inside

    return _node(out_data, (a,), bw)


def tsum(a, axis=None, keepdims=False):
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        a._ensure_grad()
        if axis is None:
            a.grad += g
        elif keepdims:
            a.grad += np.broadcast_to(g, a.data.shape)
        else:
            a.grad += np.broadcast_to(np.expand_dims(g, axis), a.data.shape)

    return _node(out_data, (a,), bw)


def tmean(a):
    n = a.data.size
    out_data = a.data.mean()

    def bw(g):
        a._ensure_grad()
        a.grad += np.full(a.data.shape, g / n)

    return _node(out_data, (a,), bw)


# -- shape manipulation ------------------------------------------------------


def reshape(a, shape):
    out_data = a.data.reshape(shape)

    def bw(g):
        a._ensure_grad()
        a.grad += g.reshape(a.data.shape)

    return _node(out_data, (a,), bw)


def transpose2d(a):
    if a.data.ndim != 2:
        raise ValueError(f"transpose2d expects a matrix, got shape {a.data.shape}")
    out_data = a.data.T.copy()

    def bw(g):
        a._ensure_grad()
        a.grad += g.T

    return _node(out_data, (a,), bw)


def concat(parts, axis):
    parts = [_lift(p) for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p._ensure_grad()
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                p.grad += g[tuple(sl)]

    return _node(out_data, tuple(parts), bw)


def embed_rows(table, indices):
    """Gather rows of a 2-D table; backward scatter-adds into the table."""
    idx = np.asarray(indices, dtype=np.intp)
    out_data = table.data[idx]

    def bw(g):
        table._ensure_grad()
        np.add.at(table.grad, idx, g)

    return _node(out_data, (table,), bw)


def scale_rows(a, scalar):
    """Multiply every element by a scalar Tensor (broadcast of a 0-d value)."""
    scalar = _lift(scalar)
    out_data = a.data * scalar.data

    def bw(g):
        if a.requires_grad:
            a._ensure_grad()
            a.grad += g * scalar.data
        if scalar.requires_grad:
            scalar._ensure_grad()
            scalar.grad += np.sum(g * a.data)

    return _node(out_data, (a, scalar), bw)


# -- matmul -------------------------------------------------------------------


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(
            f"matmul expects matrices, got shapes {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(
            f"matmul inner dimension mismatch: {a.data.shape} @ {b.data.shape}"
        )
    out_data = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            a._ensure_grad()
            a.grad += g @ b.data.T
        if b.requires_grad:
            b._ensure_grad()
            b.grad += a.data.T @ g

    return _node(out_data, (a, b), bw)


# -- convolution ---------------------------------------------------------------


_AXIS_NAMES = ("depth", "height", "width")


def _conv3d_cols(x, ksize, stride):
    """im2col producing (N, C*kd*kh*kw, P) from an already padded input.

    Two gather strategies: a windowed-view reshape for narrow channel counts
    and an explicit per-offset slice copy for wide ones (faster when the
    column matrix would thrash the cache).
    """
    N, C, D, H, W = x.shape
    kd, kh, kw = ksize
    od = (D - kd) // stride + 1
    oh = (H - kh) // stride + 1
    ow = (W - kw) // stride + 1
    P = od * oh * ow
    if C * kd * kh * kw <= 120:
        v = np.lib.stride_tricks.sliding_window_view(x, (kd, kh, kw), axis=(2, 3, 4))
        v = v[:, :, ::stride, ::stride, ::stride]
        cols = v.transpose(0, 1, 5, 6, 7, 2, 3, 4).reshape(N, C * kd * kh * kw, P)
        return np.ascontiguousarray(cols), (od, oh, ow)
    cols = np.empty((N, C, kd * kh * kw, P))
    i = 0
    for dz in range(kd):
        for dy in range(kh):
            for dx in range(kw):
                cols[:, :, i] = x[
                    :,
                    :,
                    dz : dz + od * stride : stride,
                    dy : dy + oh * stride : stride,
                    dx : dx + ow * stride : stride,
                ].reshape(N, C, P)
                i += 1
    return cols.reshape(N, C * kd * kh * kw, P), (od, oh, ow)


def _pad_spatial(x, padding):
    if padding == 0:
        return x
    p = padding
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))


def _conv3d_forward(x, w, stride, padding):
    N, C, D, H, W = x.shape
    K = w.shape[0]
    xp = _pad_spatial(x, padding)
    cols, (od, oh, ow) = _conv3d_cols(xp, w.shape[2:], stride)
    out = w.reshape(K, -1) @ cols
    return out.reshape(N, K, od, oh, ow)


def _conv3d_grad_kernel(x, g, kshape, stride, padding):
    N = x.shape[0]
    K = kshape[0]
    xp = _pad_spatial(x, padding)
    cols, _ = _conv3d_cols(xp, kshape[2:], stride)
    gf = g.reshape(N, K, -1)
    gw = np.zeros((K, cols.shape[1]))
    for n in range(N):
        gw += gf[n] @ cols[n].T
    return gw.reshape(kshape)


def _conv3d_grad_input(w, g, xshape, stride, padding):
    # Gradient w.r.t. input equals a zero-stuffed full correlation with the
    # spatially flipped kernel, channels swapped. Residual offsets r account
    # for input rows never touched when (extent + 2p - k) % stride != 0.
    N, C, D, H, W = xshape
    K, _, kd, kh, kw = w.shape
    _, _, od, oh, ow = g.shape
    rd = (D + 2 * padding - kd) % stride
    rh = (H + 2 * padding - kh) % stride
    rw = (W + 2 * padding - kw) % stride
    sd = stride * (od - 1) + 1
    sh = stride * (oh - 1) + 1
    sw = stride * (ow - 1) + 1
    stuffed = np.zeros((N, K, sd + rd, sh + rh, sw + rw))
    stuffed[:, :, 0:sd:stride, 0:sh:stride, 0:sw:stride] = g
    pd, ph, pw = kd - 1 - padding, kh - 1 - padding, kw - 1 - padding
    if min(pd, ph, pw) < 0:
        raise ValueError("padding larger than kernel-1 is unsupported")
    sp = np.pad(stuffed, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    wt = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
    return _conv3d_forward(sp, wt, 1, 0)


def conv3d(x, w, stride=1, padding=0):
    """3-D cross-correlation over [N, C, D, H, W] with a [K, C, kd, kh, kw] kernel.

    Output extent per axis is floor((in + 2*padding - k)/stride) + 1.
    Differentiable w.r.t. both input and kernel.
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if x.data.ndim != 5:
        raise ValueError(f"conv3d input must be 5-D [N,C,D,H,W], got {x.data.shape}")
    if w.data.ndim != 5:
        raise ValueError(f"conv3d kernel must be 5-D [K,C,kd,kh,kw], got {w.data.shape}")
    if x.data.shape[1] != w.data.shape[1]:
        raise ValueError(
            f"conv3d channel mismatch: input has {x.data.shape[1]} channels, "
            f"kernel expects {w.data.shape[1]}"
        )
    for i in range(3):
        if w.data.shape[2 + i] > x.data.shape[2 + i] + 2 * padding:
            raise ValueError(
                f"conv3d kernel {_AXIS_NAMES[i]} extent {w.data.shape[2 + i]} exceeds "
                f"padded input {_AXIS_NAMES[i]} extent {x.data.shape[2 + i] + 2 * padding}"
            )
    out_data = _conv3d_forward(x.data, w.data, stride, padding)

    def bw(g):
        if w.requires_grad:
            w._ensure_grad()
            w.grad += _conv3d_grad_kernel(x.data, g, w.data.shape, stride, padding)
        if x.requires_grad:
            x._ensure_grad()
            x.grad += _conv3d_grad_input(w.data, g, x.data.shape, stride, padding)

    return _node(out_data, (x, w), bw)


# -- trilinear upsampling -------------------------------------------------------


def _up1d(x, axis):
    n = x.shape[axis]
    idx_prev = np.concatenate(([0], np.arange(n - 1)))
    idx_next = np.concatenate((np.arange(1, n), [n - 1]))
    xm = np.take(x, idx_prev, axis=axis)
    xp = np.take(x, idx_next, axis=axis)
    even = 0.25 * xm + 0.75 * x
    odd = 0.75 * x + 0.25 * xp
    shape = list(x.shape)
    shape[axis] *= 2
    out = np.empty(shape)
    sl_e = [slice(None)] * x.ndim
    sl_o = [slice(None)] * x.ndim
    sl_e[axis] = slice(0, None, 2)
    sl_o[axis] = slice(1, None, 2)
    out[tuple(sl_e)] = even
    out[tuple(sl_o)] = odd
    return out


def _up1d_grad(g, axis, n):
    sl_e = [slice(None)] * g.ndim
    sl_o = [slice(None)] * g.ndim
    sl_e[axis] = slice(0, None, 2)
    sl_o[axis] = slice(1, None, 2)
    ge = g[tuple(sl_e)]
    go = g[tuple(sl_o)]
    gx = 0.75 * (ge + go)

    def shifted(arr, offset):
        # arr shifted so that out[i] = arr[i + offset], zero outside
        res = np.zeros_like(arr)
        src = [slice(None)] * arr.ndim
        dst = [slice(None)] * arr.ndim
        if offset == 1:
            src[axis] = slice(1, None)
            dst[axis] = slice(0, -1)
        else:
            src[axis] = slice(0, -1)
            dst[axis] = slice(1, None)
        res[tuple(dst)] = arr[tuple(src)]
        return res

    gx += 0.25 * shifted(ge, 1)   # x[i] feeds even output 2(i+1)
    gx += 0.25 * shifted(go, -1)  # x[i] feeds odd output 2(i-1)+1
    # clamped borders absorb the out-of-range taps
    first = [slice(None)] * g.ndim
    first[axis] = slice(0, 1)
    last = [slice(None)] * g.ndim
    last[axis] = slice(n * 2 - 1, n * 2)
    gx[tuple(first)] += 0.25 * g[tuple(first)]
    lastg = [slice(None)] * g.ndim
    lastg[axis] = slice(-1, None)
    gxl = [slice(None)] * g.ndim
    gxl[axis] = slice(-1, None)
    gx[tuple(gxl)] += 0.25 * g[tuple(lastg)]
    return gx


def trilinear_upsample(x, factor=2):
    """Double every spatial extent of [N, C, D, H, W] (align-corners-false)."""
    if factor != 2:
        raise ValueError(f"only factor 2 is supported, got {factor}")
    if x.data.ndim != 5:
        raise ValueError(f"expected 5-D input, got {x.data.shape}")
    out_data = x.data
    for axis in (2, 3, 4):
        out_data = _up1d(out_data, axis)

    def bw(g):
        x._ensure_grad()
        gx = g
        for axis in (4, 3, 2):
            gx = _up1d_grad(gx, axis, x.data.shape[axis])
        x.grad += gx

    return _node(out_data, (x,), bw)


# -- normalization and softmax ---------------------------------------------------


def l2_normalize(x, axis=-1, eps=1e-12):
    """Scale slices along ``axis`` to unit Euclidean norm (eps-guarded)."""
    norms = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))
    denom = np.maximum(norms, eps)
    out_data = x.data / denom
    live = norms > eps

    def bw(g):
        x._ensure_grad()
        dot = np.sum(g * out_data, axis=axis, keepdims=True)
        grad_live = (g - out_data * dot) / denom
        x.grad += np.where(live, grad_live, g / eps)

    return _node(out_data, (x,), bw)


def softmax_lastdim(x, scale=1.0):
    """Numerically stable softmax over the last axis of ``scale * x``."""
    z = scale * x.data
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        x._ensure_grad()
        dot = np.sum(g * out_data, axis=-1, keepdims=True)
        x.grad += scale * out_data * (g - dot)

    return _node(out_data, (x,), bw)


def group_norm(x, gamma, beta, groups, eps=1e-5):
    """Per-group standardization over [N, C, spatial...] with affine terms."""
    N, C = x.data.shape[:2]
    if C % groups != 0:
        raise ValueError(f"channels {C} not divisible by groups {groups}")
    xg = x.data.reshape(N, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(x.data.shape)
    cshape = (1, C) + (1,) * (x.data.ndim - 2)
    out_data = gamma.data.reshape(cshape) * xhat + beta.data.reshape(cshape)
    m = xg.shape[2]

    def bw(g):
        reduce_axes = (0,) + tuple(range(2, x.data.ndim))
        if gamma.requires_grad:
            gamma._ensure_grad()
            gamma.grad += np.sum(g * xhat, axis=reduce_axes)
        if beta.requires_grad:
            beta._ensure_grad()
            beta.grad += np.sum(g, axis=reduce_axes)
        if x.requires_grad:
            x._ensure_grad()
            dxhat = (g * gamma.data.reshape(cshape)).reshape(N, groups, -1)
            xh = xhat.reshape(N, groups, -1)
            t1 = dxhat.sum(axis=2, keepdims=True)
            t2 = (dxhat * xh).sum(axis=2, keepdims=True)
            dx = inv * (dxhat - t1 / m - xh * t2 / m)
            x.grad += dx.reshape(x.data.shape)

    return _node(out_data, (x, gamma, beta), bw)


# -- planar rotations (commuting position encoding fast path) ----------------------


def rotate_pairs(x, angles):
    """Rotate consecutive coordinate pairs of each row by per-pair angles.

    ``x`` has shape (n, d) with even d; ``angles`` has shape (n, d/2). Pair j
    of row i is rotated counter-clockwise by angles[i, j], preserving norms.
    """
    if x.data.shape[1] % 2 != 0:
        raise ValueError(f"rotate_pairs needs an even row dimension, got {x.data.shape}")
    if angles.data.shape != (x.data.shape[0], x.data.shape[1] // 2):
        raise ValueError(
            f"angles shape {angles.data.shape} does not match rows {x.data.shape}"
        )
    c = np.cos(angles.data)
    s = np.sin(angles.data)
    x0 = x.data[:, 0::2]
    x1 = x.data[:, 1::2]
    out_data = np.empty_like(x.data)
    out_data[:, 0::2] = c * x0 - s * x1
    out_data[:, 1::2] = s * x0 + c * x1

    def bw(g):
        g0 = g[:, 0::2]
        g1 = g[:, 1::2]
        if x.requires_grad:
            x._ensure_grad()
            gx = np.empty_like(x.data)
            gx[:, 0::2] = c * g0 + s * g1
            gx[:, 1::2] = -s * g0 + c * g1
            x.grad += gx
        if angles.requires_grad:
            angles._ensure_grad()
            angles.grad += g0 * (-s * x0 - c * x1) + g1 * (c * x0 - s * x1)

    return _node(out_data, (x, angles), bw)


# -- matrix exponential ----------------------------------------------------------


def _expm_params(a):
    nrm = np.linalg.norm(a, 1)
    s = 0
    if nrm > 0.5:
        s = int(np.ceil(np.log2(nrm / 0.5)))
    return s


_EXPM_ORDER = 16


def expm(a, order=_EXPM_ORDER):
    """Scaling-and-squaring truncated Taylor matrix exponential (plain numpy)."""
    a = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix exponential of non-finite input")
    s = _expm_params(a)
    asc = a / (2.0 ** s)
    x = np.eye(a.shape[0])
    term = np.eye(a.shape[0])
    for k in range(1, order + 1):
        term = term @ asc / k
        x = x + term
    for _ in range(s):
        x = x @ x
    return x


def expm_frechet(a, e, order=_EXPM_ORDER):
    """Directional derivative of expm at ``a`` along ``e`` (same recurrence)."""
    a = np.asarray(a, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    s = _expm_params(a)
    asc = a / (2.0 ** s)
    esc = e / (2.0 ** s)
    x = np.eye(a.shape[0])
    dx = np.zeros_like(a)
    term = np.eye(a.shape[0])
    dterm = np.zeros_like(a)
    for k in range(1, order + 1):
        dterm = (dterm @ asc + term @ esc) / k
        term = term @ asc / k
        x = x + term
        dx = dx + dterm
    for _ in range(s):
        dx = dx @ x + x @ dx
        x = x @ x
    return x, dx


def matrix_exp(m):
    """Differentiable matrix exponential of a square matrix Tensor.

    Backward uses the identity that the adjoint of the Frechet derivative at
    M is the Frechet derivative at M^T, pushed through the same scaled Taylor
    recurrence.
    """
    if m.data.ndim != 2 or m.data.shape[0] != m.data.shape[1]:
        raise ValueError(f"matrix_exp expects a square matrix, got {m.data.shape}")
    out_data = expm(m.data)

    def bw(g):
        m._ensure_grad()
        _, dm = expm_frechet(m.data.T, g)
        m.grad += dm

    return _node(out_data, (m,), bw)
