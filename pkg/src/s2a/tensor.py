"""Small dense tensor engine with reverse-mode differentiation.

Everything is float64. A ``Tensor`` keeps a reference to its parents and a
closure that pushes its gradient back to them. ``backward`` walks the graph
in reverse topological order; when a ``Tape`` is active the recorded creation
order is used instead, which is already topological.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float64

_active_tapes: list["Tape"] = []


@dataclass
class Tape:
    """Records every non-leaf tensor created while it is active."""

    ops: list = field(default_factory=list)

    def __enter__(self):
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc):
        _active_tapes.remove(self)
        return False

    def record(self, t):
        self.ops.append(t)


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, _parents=(), _op=""):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = None
        self._op = _op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def _accum(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad = self.grad + g

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self, tape=None):
        backward(self, tape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn, op):
    parents = tuple(parents)
    req = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req, _parents=parents if req else (), _op=op)
    if req:
        out._backward = backward_fn
        for tape in _active_tapes:
            tape.record(out)
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        a._accum(_unbroadcast(g, a.shape))
        b._accum(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        a._accum(_unbroadcast(g, a.shape))
        b._accum(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), bw, "div")


def scale(x, c):
    x = as_tensor(x)
    c = float(c)

    def bw(g):
        x._accum(g * c)

    return _make(x.data * c, (x,), bw, "scale")


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0

    def bw(g):
        x._accum(g * mask)

    # NaN passes through so the training loop's finiteness check can see it
    return _make(np.where(mask | np.isnan(x.data), x.data, 0.0), (x,), bw, "relu")


def _sigmoid(z):
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x):
    x = as_tensor(x)
    s = _sigmoid(x.data)

    def bw(g):
        x._accum(g * s * (1.0 - s))

    return _make(s, (x,), bw, "sigmoid")


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)

    def bw(g):
        x._accum(g * out)

    return _make(out, (x,), bw, "exp")


def log(x):
    x = as_tensor(x)

    def bw(g):
        x._accum(g / x.data)

    return _make(np.log(x.data), (x,), bw, "log")


def clip(x, lo, hi):
    """Clamp to [lo, hi]; gradient is zero outside the open interval."""
    x = as_tensor(x)
    inside = (x.data > lo) & (x.data < hi)

    def bw(g):
        x._accum(g * inside)

    return _make(np.clip(x.data, lo, hi), (x,), bw, "clip")


def maximum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data >= b.data

    def bw(g):
        a._accum(_unbroadcast(g * pick_a, a.shape))
        b._accum(_unbroadcast(g * ~pick_a, b.shape))

    return _make(np.maximum(a.data, b.data), (a, b), bw, "maximum")


def minimum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data

    def bw(g):
        a._accum(_unbroadcast(g * pick_a, a.shape))
        b._accum(_unbroadcast(g * ~pick_a, b.shape))

    return _make(np.minimum(a.data, b.data), (a, b), bw, "minimum")


def bce_with_logits(z, target):
    """Elementwise binary cross-entropy on logits ``z`` against constant targets."""
    z = as_tensor(z)
    t = np.asarray(target, dtype=DTYPE)
    zd = z.data
    out = np.maximum(zd, 0.0) - zd * t + np.log1p(np.exp(-np.abs(zd)))

    def bw(g):
        z._accum(g * (_sigmoid(zd) - t))

    return _make(out, (z,), bw, "bce")


# ----------------------------------------------------------------- reductions


def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accum(np.broadcast_to(g, x.shape))

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), bw, "sum")


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(tsum(x, axis, keepdims), 1.0 / count)


def tmax(x, axis, keepdims=False):
    """Max over one axis; the gradient goes to the first maximal entry."""
    x = as_tensor(x)
    idx = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis)
    if not keepdims:
        out = np.squeeze(out, axis)

    def bw(g):
        gx = np.zeros_like(x.data)
        gk = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(gx, np.expand_dims(idx, axis), gk, axis)
        x._accum(gx)

    return _make(out, (x,), bw, "max")


def softmax(x, axis=-1):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        x._accum(s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return _make(s, (x,), bw, "softmax")


# -------------------------------------------------------------------- shaping


def reshape(x, shape):
    x = as_tensor(x)

    def bw(g):
        x._accum(g.reshape(x.shape))

    return _make(x.data.reshape(shape), (x,), bw, "reshape")


def transpose(x, axes=None):
    x = as_tensor(x)
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = np.argsort(axes)

    def bw(g):
        x._accum(g.transpose(inv))

    return _make(x.data.transpose(axes), (x,), bw, "transpose")


def concat(xs, axis=0):
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        for x, gp in zip(xs, np.split(g, cuts, axis=axis)):
            x._accum(gp)

    return _make(np.concatenate([x.data for x in xs], axis=axis), xs, bw, "concat")


def split(x, sizes, axis=0):
    """Split along ``axis`` into pieces of the given sizes (inverse of concat)."""
    x = as_tensor(x)
    if sum(sizes) != x.shape[axis]:
        raise ValueError(f"split sizes {sizes} do not cover axis of length {x.shape[axis]}")
    out, start = [], 0
    for s in sizes:
        sl = [slice(None)] * x.ndim
        sl[axis] = slice(start, start + s)
        out.append(index(x, tuple(sl)))
        start += s
    return out


def index(x, idx):
    x = as_tensor(x)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        x._accum(gx)

    return _make(x.data[idx], (x,), bw, "index")


def pad2d(x, p):
    """Zero-pad the last two axes by ``p`` on every side."""
    x = as_tensor(x)
    if p == 0:
        return x
    width = [(0, 0)] * (x.ndim - 2) + [(p, p), (p, p)]

    def bw(g):
        x._accum(g[..., p:-p, p:-p])

    return _make(np.pad(x.data, width), (x,), bw, "pad")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands of rank >= 2")

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def _conv_out(size, k, stride, padding):
    o = (size + 2 * padding - k) // stride + 1
    if o <= 0:
        raise ValueError(f"convolution output size {o} is not positive")
    return o


def conv2d(x, w, b=None, stride=1, padding=0):
    """Cross-correlation of ``x`` (N,C,H,W) with ``w`` (Cout,Cin,kh,kw)."""
    x, w = as_tensor(x), as_tensor(w)
    N, C, H, W = x.shape
    Co, Ci, kh, kw = w.shape
    if Ci != C:
        raise ValueError(f"conv2d channel mismatch: input {C}, kernel {Ci}")
    Ho = _conv_out(H, kh, stride, padding)
    Wo = _conv_out(W, kw, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (Ho - 1) * stride + 1 : stride, : (Wo - 1) * stride + 1 : stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(N * Ho * Wo, C * kh * kw)
    wm = w.data.reshape(Co, -1)
    out = (cols @ wm.T).reshape(N, Ho, Wo, Co).transpose(0, 3, 1, 2)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data.reshape(1, Co, 1, 1)
        parents.append(b)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(N * Ho * Wo, Co)
        if w.requires_grad:
            w._accum((g2.T @ cols).reshape(w.shape))
        if b is not None and b.requires_grad:
            b._accum(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = (g2 @ wm).reshape(N, Ho, Wo, C, kh, kw)
            dxp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += dcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            if padding:
                dxp = dxp[:, :, padding:-padding, padding:-padding]
            x._accum(dxp)

    return _make(out, parents, bw, "conv2d")


def depthwise_conv2d(x, w, stride=1, padding=0):
    """Per-channel cross-correlation: ``x`` (N,C,H,W), ``w`` (C,kh,kw)."""
    x, w = as_tensor(x), as_tensor(w)
    N, C, H, W = x.shape
    Cw, kh, kw = w.shape
    if Cw != C:
        raise ValueError(f"depthwise kernel count {Cw} != channels {C}")
    Ho = _conv_out(H, kh, stride, padding)
    Wo = _conv_out(W, kw, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (Ho - 1) * stride + 1 : stride, : (Wo - 1) * stride + 1 : stride]
    out = np.einsum("nchwij,cij->nchw", win, w.data)

    def bw(g):
        if w.requires_grad:
            w._accum(np.einsum("nchwij,nchw->cij", win, g))
        if x.requires_grad:
            dxp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += g * w.data[:, i, j][
                        None, :, None, None
                    ]
            if padding:
                dxp = dxp[:, :, padding:-padding, padding:-padding]
            x._accum(dxp)

    return _make(out, (x, w), bw, "dwconv2d")


# ------------------------------------------------------------------- backward


def _topo(root):
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss, tape=None):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf needing it.

    Intermediate gradients are dropped afterwards; leaf gradients add up
    across calls until zeroed.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if tape is not None:
        nodes = [t for t in tape.ops]
        if not any(t is loss for t in nodes):
            raise ValueError("loss was not recorded on the given tape")
        nodes = nodes[: next(i for i, t in enumerate(nodes) if t is loss) + 1]
    else:
        nodes = [n for n in _topo(loss) if n._backward is not None]
    loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
    for node in reversed(nodes):
        g, node.grad = node.grad, None
        if g is not None:
            node._backward(g)


# --------------------------------------------------------------- grad checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    tol: float
    worst: tuple = ()

    @property
    def passed(self):
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error <= self.tol)


def relative_error(analytic, numeric, floor=1e-6):
    """Elementwise |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic)
    n = np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def grad_check(f, inputs, eps=1e-5, tol=1e-4, max_per_tensor=None, rng=None, floor=1e-6):
    """Compare analytic gradients of scalar ``f(*inputs)`` to central differences.

    ``max_per_tensor`` limits the number of coordinates probed in each input
    (chosen with ``rng``); by default every coordinate is probed.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = f(*inputs)
    backward(out)
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]
    rng = rng if rng is not None else np.random.default_rng(0)

    worst, worst_at, count = 0.0, (), 0
    for ti, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_per_tensor is not None and flat.size > max_per_tensor:
            coords = np.sort(rng.choice(flat.size, size=max_per_tensor, replace=False))
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            fp = float(f(*inputs).data)
            flat[c] = orig - eps
            fm = float(f(*inputs).data)
            flat[c] = orig
            num = (fp - fm) / (2 * eps)
            err = float(relative_error(analytic[ti].reshape(-1)[c], num, floor))
            count += 1
            if not err <= worst:
                worst, worst_at = err, (ti, int(c), float(analytic[ti].reshape(-1)[c]), num)
    for t in inputs:
        t.grad = None
    return GradCheckReport(worst, count, tol, worst_at)


# ----------------------------------------------------------------- checkpoints

_MAGIC = b"S2ACKPT1"


def save_checkpoint(path, tensors):
    """Write a name -> array mapping.

    Layout: magic, uint64 header length, UTF-8 manifest lines
    ``name<TAB>d0,d1,...<TAB>offset`` (offset counted in float64 elements),
    then every array as little-endian float64, all ordered by name.
    """
    names = sorted(tensors)
    lines, offset = [], 0
    arrays = []
    for name in names:
        arr = np.asarray(tensors[name].data if isinstance(tensors[name], Tensor) else tensors[name], dtype="<f8")
        if "\t" in name or "\n" in name:
            raise ValueError(f"bad tensor name {name!r}")
        lines.append(f"{name}\t{','.join(str(s) for s in arr.shape)}\t{offset}")
        arrays.append(arr)
        offset += arr.size
    header = ("\n".join(lines) + "\n").encode("utf-8") if lines else b""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for arr in arrays:
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    header = blob[16 : 16 + hlen].decode("utf-8")
    payload = np.frombuffer(blob[16 + hlen :], dtype="<f8")
    out = {}
    for line in header.splitlines():
        name, shape_s, off_s = line.split("\t")
        shape = tuple(int(s) for s in shape_s.split(",")) if shape_s else ()
        off = int(off_s)
        size = int(np.prod(shape)) if shape else 1
        if off + size > payload.size:
            raise ValueError(f"{path}: payload too short for {name}")
        out[name] = payload[off : off + size].reshape(shape).astype(DTYPE)
    return out
