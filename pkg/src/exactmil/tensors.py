"""Dense tensors with tape-based reverse-mode differentiation.

Every learning-side computation in the package (network, losses, training)
is written against the ops in this module.  Data lives in numpy arrays;
64-bit is used for gradient checks, 32-bit for training.

Recording only happens inside an active :class:`Tape`::

    with Tape() as tape:
        loss = tsum(mul(x, w))
    tape.backward(loss)
    x.grad
"""
from __future__ import annotations

import itertools
import math
import threading

import numpy as np

MAX_RANK = 5


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_tape")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if arr.ndim > MAX_RANK:
            raise ValueError(f"tensor rank {arr.ndim} exceeds {MAX_RANK}")
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite value in tensor {name or ''}".strip())
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)


class _Node:
    __slots__ = ("out", "parents", "backward", "op")

    def __init__(self, out, parents, backward, op):
        self.out = out
        self.parents = parents
        self.backward = backward
        self.op = op


_LOCAL = threading.local()      # each thread records onto its own tape stack


def _tapes():
    if not hasattr(_LOCAL, "stack"):
        _LOCAL.stack = []
    return _LOCAL.stack


class Tape:
    """Ordered record of primitive applications, replayed once in reverse."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False
        self.visited: list[str] = []

    def __enter__(self):
        _tapes().append(self)
        return self

    def __exit__(self, *exc):
        _tapes().remove(self)
        return False

    def record(self, out, parents, backward, op):
        if self.consumed:
            raise TapeError("tape already consumed by backward(); record a new forward pass")
        self.nodes.append(_Node(out, parents, backward, op))

    def backward(self, loss, grad=None):
        if self.consumed:
            raise TapeError("second backward pass without a new forward pass")
        if not self.nodes or not any(n.out is loss for n in self.nodes):
            raise TapeError("loss was not produced on this tape")
        self.consumed = True
        seed = np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=loss.dtype)
        # intermediate grads live in a side table; leaves accumulate into .grad
        pending = {id(loss): seed}
        for node in reversed(self.nodes):
            g = pending.pop(id(node.out), None)
            self.visited.append(node.op)
            if g is None:
                continue
            grads = node.backward(g)
            for parent, pg in zip(node.parents, grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise TapeError(f"{node.op}: grad shape {pg.shape} != {parent.shape}")
                if parent._tape is not self:
                    parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
                else:
                    key = id(parent)
                    pending[key] = pg if key not in pending else pending[key] + pg
        self.nodes = []


def current_tape():
    stack = _tapes()
    return stack[-1] if stack else None


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b):
    if not isinstance(a, Tensor) and isinstance(b, Tensor):
        return _as_tensor(a, b), b
    a = _as_tensor(a)
    return a, _as_tensor(b, a)


def _finish(data, parents, backward, op):
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced a non-finite value")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = False
    out._tape = None
    tape = current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._tape = tape
        tape.record(out, parents, backward, op)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _finish(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _finish(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b):
    a, b = _pair(a, b)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _finish(ad * bd, (a, b), backward, "mul")


def div(a, b):
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise ZeroDivisionError("division by zero in div")
    out = ad / bd

    def backward(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return _finish(out, (a, b), backward, "div")


def power(x, exponent):
    """x ** exponent for a constant real exponent; x must be >= 0 unless integral."""
    x = _as_tensor(x)
    p = float(exponent)
    xd = x.data
    if not p.is_integer() and np.any(xd < 0):
        raise ValueError("fractional power of a negative value")
    out = xd ** p

    def backward(g):
        if p == 0.0:
            return (np.zeros_like(xd),)
        return (g * p * xd ** (p - 1.0),)

    return _finish(out, (x,), backward, "power")


def log(x, eps=0.0):
    """Natural log of ``x + eps``; nonpositive arguments are an error."""
    x = _as_tensor(x)
    arg = x.data + eps if eps else x.data
    if np.any(arg <= 0):
        raise ValueError("log of a nonpositive value (add an eps guard)")
    return _finish(np.log(arg), (x,), lambda g: (g / arg,), "log")


def exp(x):
    x = _as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _finish(out, (x,), lambda g: (g * out,), "exp")


def sigmoid(x):
    x = _as_tensor(x)
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ez = np.exp(xd[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _finish(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def leaky_relu(x, slope=0.01):
    x = _as_tensor(x)
    xd = x.data
    scale = np.where(xd > 0, 1.0, slope).astype(xd.dtype)
    return _finish(xd * scale, (x,), lambda g: (g * scale,), "leaky_relu")


relu_leaky = leaky_relu


# ---------------------------------------------------------------- reductions / shape

def tsum(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    shape = x.shape
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _finish(np.asarray(out), (x,), backward, "sum")


def mean(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x, shape):
    x = _as_tensor(x)
    old = x.shape
    return _finish(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _finish(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                   backward, "concat")


def take(x, index, axis=0):
    """Select one slice (int) or several (sequence) along ``axis``."""
    x = _as_tensor(x)
    shape = x.shape
    idx = np.atleast_1d(np.asarray(index, dtype=np.intp))
    scalar = np.ndim(index) == 0
    out = np.take(x.data, idx, axis=axis)
    if scalar:
        out = np.squeeze(out, axis=axis)

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        moved = np.moveaxis(gx, axis, 0)
        if scalar:
            moved[idx[0]] = g
        else:
            np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (gx,)

    return _finish(out, (x,), backward, "take")


def detach(x):
    return Tensor(x.data)


def dropout(x, rate, rng, training=True):
    x = _as_tensor(x)
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return _finish(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def matmul(a, b):
    a, b = _pair(a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return (g @ bd.T if a.requires_grad else None,
                ad.T @ g if b.requires_grad else None)

    return _finish(ad @ bd, (a, b), backward, "matmul")


# ---------------------------------------------------------------- normalization

def instance_norm(x, eps=1e-5):
    """Per-channel standardization over the spatial axes of a [C, ...] tensor."""
    x = _as_tensor(x)
    xd = x.data
    axes = tuple(range(1, xd.ndim))
    n = int(np.prod(xd.shape[1:]))
    mu = xd.mean(axis=axes, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        gm = g.mean(axis=axes, keepdims=True)
        gxm = (g * xhat).sum(axis=axes, keepdims=True) / n
        return (inv * (g - gm - xhat * gxm),)

    return _finish(xhat, (x,), backward, "instance_norm")


# ---------------------------------------------------------------- top-k pooling

def topk_indices(values, k):
    """Indices of the k largest entries of a flat array, ties to the lowest index."""
    v = np.asarray(values).reshape(-1)
    if v.size == 0:
        raise ValueError("top-k over an empty voxel set")
    if not 1 <= k <= v.size:
        raise ValueError(f"k={k} out of range for {v.size} values")
    return np.argsort(-v, kind="stable")[:k]


def topk_mean(values, k):
    """Mean of the k largest entries; gradient 1/k routed to the selected entries only."""
    values = _as_tensor(values)
    k = int(k)
    sel = topk_indices(values.data, k)
    flat = values.data.reshape(-1)
    out = np.asarray(flat[sel].sum() / k, dtype=values.dtype)
    shape = values.shape

    def backward(g):
        gx = np.zeros(flat.shape, dtype=values.dtype)
        gx[sel] = g / k
        return (gx.reshape(shape),)

    return _finish(out, (values,), backward, "topk_mean")


# ---------------------------------------------------------------- convolution

def _triple(v):
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    v = tuple(int(i) for i in v)
    if len(v) != 3:
        raise ValueError(f"expected a triple, got {v}")
    return v


def _im2col(xp, ksize, stride, out_sp):
    """[C, Dp, Hp, Wp] padded input -> [C*kd*kh*kw, D'*H'*W'] column matrix."""
    c = xp.shape[0]
    kd, kh, kw = ksize
    sd, sh, sw = stride
    od, oh, ow = out_sp
    cols = np.empty((c, kd, kh, kw, od, oh, ow), dtype=xp.dtype)
    for a, b, e in itertools.product(range(kd), range(kh), range(kw)):
        cols[:, a, b, e] = xp[:, a:a + sd * (od - 1) + 1:sd,
                              b:b + sh * (oh - 1) + 1:sh,
                              e:e + sw * (ow - 1) + 1:sw]
    return cols.reshape(c * kd * kh * kw, od * oh * ow)


def _col2im(cols, padded_shape, ksize, stride, out_sp):
    c = padded_shape[0]
    kd, kh, kw = ksize
    sd, sh, sw = stride
    od, oh, ow = out_sp
    cols = cols.reshape(c, kd, kh, kw, od, oh, ow)
    xp = np.zeros(padded_shape, dtype=cols.dtype)
    for a, b, e in itertools.product(range(kd), range(kh), range(kw)):
        xp[:, a:a + sd * (od - 1) + 1:sd,
           b:b + sh * (oh - 1) + 1:sh,
           e:e + sw * (ow - 1) + 1:sw] += cols[:, a, b, e]
    return xp


def _conv_out_extent(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def _pad(x, padding):
    pd, ph, pw = padding
    if pd == ph == pw == 0:
        return x
    return np.pad(x, ((0, 0), (pd, pd), (ph, ph), (pw, pw)))


def _unpad(xp, padding):
    pd, ph, pw = padding
    _, d, h, w = xp.shape
    return xp[:, pd:d - pd, ph:h - ph, pw:w - pw]


def conv3d(x, kernel, bias=None, stride=1, padding=0):
    """Cross-correlation of [C_in, D, H, W] with [C_out, C_in, kd, kh, kw], zero padding."""
    x = _as_tensor(x)
    kernel = _as_tensor(kernel)
    stride, padding = _triple(stride), _triple(padding)
    if x.ndim != 4:
        raise ValueError(f"conv3d input must be [C, D, H, W], got shape {x.shape}")
    if kernel.ndim != 5:
        raise ValueError(f"conv3d kernel must be [C_out, C_in, kd, kh, kw], got {kernel.shape}")
    cin = x.shape[0]
    cout, kcin, *ksize = kernel.shape
    if kcin != cin:
        raise ValueError(f"conv3d channel mismatch: input has {cin}, kernel expects {kcin}")
    if min(stride) < 1:
        raise ValueError(f"stride components must be >= 1, got {stride}")
    for dim, n, k, p in zip("DHW", x.shape[1:], ksize, padding):
        if k > n + 2 * p:
            raise ValueError(f"kernel extent {k} exceeds padded input extent {n + 2 * p} along {dim}")
    out_sp = tuple(_conv_out_extent(n, k, s, p)
                   for n, k, s, p in zip(x.shape[1:], ksize, stride, padding))
    xp = _pad(x.data, padding)
    cols = _im2col(xp, ksize, stride, out_sp)
    wmat = kernel.data.reshape(cout, -1)
    out = (wmat @ cols).reshape((cout,) + out_sp)
    parents = (x, kernel)
    if bias is not None:
        bias = _as_tensor(bias)
        out = out + bias.data.reshape(cout, 1, 1, 1)
        parents = (x, kernel, bias)
    padded_shape = xp.shape

    def backward(g):
        g2 = g.reshape(cout, -1)
        gx = None
        if x.requires_grad:
            gx = _unpad(_col2im(wmat.T @ g2, padded_shape, ksize, stride, out_sp), padding)
        gk = (g2 @ cols.T).reshape(kernel.shape) if kernel.requires_grad else None
        if bias is None:
            return gx, gk
        return gx, gk, g2.sum(axis=1)

    return _finish(out, parents, backward, "conv3d")


def transposed_conv3d(x, kernel, bias=None, stride=1, padding=0):
    """Adjoint of conv3d; kernel layout [C_in, C_out, kd, kh, kw].

    Output extent per axis is (n - 1) * stride - 2 * padding + k.
    """
    x = _as_tensor(x)
    kernel = _as_tensor(kernel)
    stride, padding = _triple(stride), _triple(padding)
    if x.ndim != 4 or kernel.ndim != 5:
        raise ValueError(f"transposed_conv3d expects [C,D,H,W] and 5-D kernel, got {x.shape}, {kernel.shape}")
    cin, cout, *ksize = kernel.shape
    if cin != x.shape[0]:
        raise ValueError(f"transposed_conv3d channel mismatch: input has {x.shape[0]}, kernel expects {cin}")
    in_sp = x.shape[1:]
    full_sp = tuple((n - 1) * s + k for n, s, k in zip(in_sp, stride, ksize))
    out_sp = tuple(f - 2 * p for f, p in zip(full_sp, padding))
    if min(out_sp) < 1:
        raise ValueError(f"transposed_conv3d output extent {out_sp} is empty")
    wmat = kernel.data.reshape(cin, -1)  # [C_in, C_out*k^3]
    xm = x.data.reshape(cin, -1)
    cols = wmat.T @ xm
    out = _unpad(_col2im(cols, (cout,) + full_sp, ksize, stride, in_sp), padding)
    out = np.ascontiguousarray(out)
    parents = (x, kernel)
    if bias is not None:
        bias = _as_tensor(bias)
        out = out + bias.data.reshape(cout, 1, 1, 1)
        parents = (x, kernel, bias)

    def backward(g):
        gp = _pad(g, padding)
        gcols = _im2col(gp, ksize, stride, in_sp)  # [C_out*k^3, n_in]
        gx = (wmat @ gcols).reshape(x.shape) if x.requires_grad else None
        gk = (xm @ gcols.T).reshape(kernel.shape) if kernel.requires_grad else None
        if bias is None:
            return gx, gk
        return gx, gk, g.reshape(cout, -1).sum(axis=1)

    return _finish(out, parents, backward, "transposed_conv3d")


# ---------------------------------------------------------------- resizing

def linear_weights(n_in, n_out, dtype=np.float64):
    """1-D half-pixel (align-corners-false) interpolation matrix [n_out, n_in]."""
    if n_in < 1 or n_out < 1:
        raise ValueError("resize extents must be >= 1")
    m = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for j in range(n_out):
        src = max((j + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        w1 = src - i0
        m[j, i0] += 1.0 - w1
        m[j, i1] += w1
    return m


def nearest_index(n_in, n_out):
    """Source index for each output voxel: the source cell containing the output center."""
    if n_in < 1 or n_out < 1:
        raise ValueError("resize extents must be >= 1")
    j = np.arange(n_out)
    return np.minimum(((2 * j + 1) * n_in) // (2 * n_out), n_in - 1)


def _check_target(x, target):
    target = tuple(int(t) for t in target)
    if len(target) != 3:
        raise ValueError(f"target must be (D, H, W), got {target}")
    if min(target) < 1:
        raise ValueError(f"zero target extent in {target}")
    if x.ndim != 4:
        raise ValueError(f"resize expects [C, D, H, W], got {x.shape}")
    return target


def trilinear_array(arr, target):
    """Trilinear resize of a plain [C, D, H, W] array (no gradient tracking)."""
    out = arr
    for axis, n_out in zip((1, 2, 3), target):
        n_in = out.shape[axis]
        if n_in == n_out:
            continue
        m = linear_weights(n_in, n_out, dtype=arr.dtype)
        out = np.moveaxis(np.tensordot(m, out, axes=([1], [axis])), 0, axis)
    return np.ascontiguousarray(out)


def nearest_array(arr, target):
    out = arr
    for axis, n_out in zip((1, 2, 3), target):
        if out.shape[axis] != n_out:
            out = np.take(out, nearest_index(out.shape[axis], n_out), axis=axis)
    return np.ascontiguousarray(out)


def resize_trilinear(vol, target):
    vol = _as_tensor(vol)
    target = _check_target(vol, target)
    mats = [None if n_in == n_out else linear_weights(n_in, n_out, dtype=vol.dtype)
            for n_in, n_out in zip(vol.shape[1:], target)]
    out = vol.data
    for axis, m in zip((1, 2, 3), mats):
        if m is not None:
            out = np.moveaxis(np.tensordot(m, out, axes=([1], [axis])), 0, axis)

    def backward(g):
        for axis, m in zip((3, 2, 1), mats[::-1]):
            if m is not None:
                g = np.moveaxis(np.tensordot(m.T, g, axes=([1], [axis])), 0, axis)
        return (np.ascontiguousarray(g),)

    return _finish(np.ascontiguousarray(out), (vol,), backward, "resize_trilinear")


def resize_nearest(vol, target):
    vol = _as_tensor(vol)
    target = _check_target(vol, target)
    idx = [None if n_in == n_out else nearest_index(n_in, n_out)
           for n_in, n_out in zip(vol.shape[1:], target)]
    out = vol.data
    for axis, ix in zip((1, 2, 3), idx):
        if ix is not None:
            out = np.take(out, ix, axis=axis)
    shape = vol.shape

    def backward(g):
        for axis, ix in zip((3, 2, 1), idx[::-1]):
            if ix is not None:
                n_in = shape[axis]
                acc = np.zeros(g.shape[:axis] + (n_in,) + g.shape[axis + 1:], dtype=g.dtype)
                np.add.at(np.moveaxis(acc, axis, 0), ix, np.moveaxis(g, axis, 0))
                g = acc
        return (g,)

    return _finish(np.ascontiguousarray(out), (vol,), backward, "resize_nearest")


# ---------------------------------------------------------------- gradient checking

def grad_check(fn, point, eps=1e-6, coords=None):
    """Max relative error between tape gradients and central differences.

    ``fn`` maps a Tensor to a scalar Tensor.  The error per coordinate is
    |analytic - numeric| / max(1, |numeric|).  ``coords`` restricts the
    check to a subset of flat indices.
    """
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(base.copy(), requires_grad=True)
    with Tape() as tape:
        y = fn(x)
    if y.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    tape.backward(y)
    analytic = np.zeros_like(base) if x.grad is None else x.grad.reshape(base.shape)

    flat = base.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        vals = []
        for step in (eps, -eps):
            probe = flat.copy()
            probe[i] += step
            try:
                v = float(fn(Tensor(probe.reshape(base.shape))).data)
            except NonFiniteError as exc:
                raise NonFiniteError(f"non-finite evaluation at coordinate {i}") from exc
            if not math.isfinite(v):
                raise NonFiniteError(f"non-finite evaluation at coordinate {i}")
            vals.append(v)
        numeric = (vals[0] - vals[1]) / (2 * eps)
        err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst
