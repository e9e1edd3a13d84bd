"""Reverse-mode automatic differentiation over numpy arrays.

A Tensor wraps an ndarray and records the operations that produced it.
Calling .backward() on a scalar result accumulates gradients into every
reachable Tensor with requires_grad set. The op set is the closure needed
by the extractors, the adaptation module and the distillation losses:
elementwise arithmetic, exp/log/sigmoid/relu, matmul, softmax families,
2D convolution / pooling / bilinear upsampling, and the gather / scatter /
segment-mean family used by the sparse voxel ops.

Graphs are pruned at constants: an op whose inputs all have
requires_grad=False produces a constant, so frozen submodels cost nothing
at backward time.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _from_op(data, parents, backward_fn):
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward_fn = backward_fn
        else:
            out._parents = ()
            out._backward_fn = None
        return out

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
        else:
            self.grad += g

    def backward(self):
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar tensor, got shape %r" % (self.shape,))
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None:
                node._backward_fn(node.grad)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    # -- conveniences --------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self):
        return "Tensor(shape=%r, dtype=%s, requires_grad=%s)" % (
            self.shape, self.data.dtype, self.requires_grad)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(as_tensor(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, key):
        return tslice(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    @property
    def T(self):
        return transpose(self, None)


class Parameter(Tensor):
    """Trainable tensor with a momentum buffer for the SGD update.

    Frozen parameters (trainable=False) still take part in forward graphs
    but the optimizer never touches them.
    """

    __slots__ = ("trainable", "momentum")

    def __init__(self, data, trainable: bool = True, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.trainable = bool(trainable)
        self.momentum = np.zeros_like(self.data)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce gradient g back to `shape` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise arithmetic ----------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return Tensor._from_op(out_data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return Tensor._from_op(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return Tensor._from_op(out_data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return Tensor._from_op(out_data, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        a._accumulate(-g)

    return Tensor._from_op(-a.data, (a,), backward)


def power(a, exponent) -> Tensor:
    a = as_tensor(a)
    e = float(exponent)
    out_data = a.data ** e

    def backward(g):
        a._accumulate(g * e * a.data ** (e - 1.0))

    return Tensor._from_op(out_data, (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        a._accumulate(g * out_data)

    return Tensor._from_op(out_data, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        a._accumulate(g / a.data)

    return Tensor._from_op(np.log(a.data), (a,), backward)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out_data = np.empty_like(x)
    pos = x >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def backward(g):
        a._accumulate(g * out_data * (1.0 - out_data))

    return Tensor._from_op(out_data, (a,), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.maximum(a.data, 0.0)

    def backward(g):
        a._accumulate(g * (a.data > 0))

    return Tensor._from_op(out_data, (a,), backward)


def clamp_min(a, minval: float) -> Tensor:
    a = as_tensor(a)
    out_data = np.maximum(a.data, minval)

    def backward(g):
        a._accumulate(g * (a.data >= minval))

    return Tensor._from_op(out_data, (a,), backward)


# -- reductions and reshaping ---------------------------------------------


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape).astype(a.dtype, copy=True))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(gg, a.shape).astype(a.dtype, copy=True))

    return Tensor._from_op(np.asarray(out_data), (a,), backward)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.shape[ax] for ax in axis]))
    else:
        count = a.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.reshape(shape)

    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return Tensor._from_op(out_data, (a,), backward)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out_data = np.transpose(a.data, axes)
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)

    def backward(g):
        a._accumulate(np.transpose(g, inv))

    return Tensor._from_op(out_data, (a,), backward)


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return Tensor._from_op(out_data, tensors, backward)


def tslice(a, key) -> Tensor:
    """Basic slicing (slices / ints); gradient is zero-padded back."""
    a = as_tensor(a)
    out_data = a.data[key]

    def backward(g):
        full = np.zeros_like(a.data)
        full[key] = g
        a._accumulate(full)

    return Tensor._from_op(out_data, (a,), backward)


# -- linear algebra --------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul expects 2-D operands, got %r and %r" % (a.shape, b.shape))
    if a.shape[1] != b.shape[0]:
        raise ShapeError("matmul inner dims differ: %r vs %r" % (a.shape, b.shape))
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return Tensor._from_op(out_data, (a, b), backward)


# -- indexed ops (substrate of the sparse voxel kernels) -------------------


def gather_rows(a, idx) -> Tensor:
    """out[i] = a[idx[i]]; gradient scatter-adds back to the source rows."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    out_data = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a._accumulate(full)

    return Tensor._from_op(out_data, (a,), backward)


def gather_cols(a, idx) -> Tensor:
    """out[:, i] = a[:, idx[i]] for a 2-D tensor."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError("gather_cols expects a 2-D tensor")
    idx = np.asarray(idx, dtype=np.int64)
    out_data = a.data[:, idx]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full.T, idx, g.T)
        a._accumulate(full)

    return Tensor._from_op(out_data, (a,), backward)


def scatter_add_rows(src, idx, num_rows: int) -> Tensor:
    """out[idx[i]] += src[i] into a fresh (num_rows, C) tensor."""
    src = as_tensor(src)
    idx = np.asarray(idx, dtype=np.int64)
    out_data = np.zeros((num_rows,) + src.shape[1:], dtype=src.dtype)
    np.add.at(out_data, idx, src.data)

    def backward(g):
        src._accumulate(g[idx])

    return Tensor._from_op(out_data, (src,), backward)


def segment_mean_rows(src, seg_ids, num_segments: int) -> Tensor:
    """Per-segment mean of rows; empty segments yield zero rows."""
    src = as_tensor(src)
    seg = np.asarray(seg_ids, dtype=np.int64)
    if seg.shape[0] != src.shape[0]:
        raise ShapeError("segment ids must align with rows")
    sums = np.zeros((num_segments,) + src.shape[1:], dtype=src.dtype)
    np.add.at(sums, seg, src.data)
    counts = np.bincount(seg, minlength=num_segments).astype(src.dtype)
    safe = np.maximum(counts, 1.0)
    out_data = sums / safe.reshape((-1,) + (1,) * (src.ndim - 1))

    def backward(g):
        src._accumulate(g[seg] / safe[seg].reshape((-1,) + (1,) * (src.ndim - 1)))

    return Tensor._from_op(out_data, (src,), backward)


def select_per_column(a, row_idx) -> Tensor:
    """out[j] = a[row_idx[j], j] for a 2-D tensor (one pick per column)."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError("select_per_column expects a 2-D tensor")
    rows = np.asarray(row_idx, dtype=np.int64)
    cols = np.arange(a.shape[1])
    out_data = a.data[rows, cols]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (rows, cols), g)
        a._accumulate(full)

    return Tensor._from_op(out_data, (a,), backward)


# -- softmax family --------------------------------------------------------


def softmax(a, axis: int) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        a._accumulate(out_data * (g - dot))

    return Tensor._from_op(out_data, (a,), backward)


def log_softmax(a, axis: int) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse

    def backward(g):
        a._accumulate(g - np.exp(out_data) * g.sum(axis=axis, keepdims=True))

    return Tensor._from_op(out_data, (a,), backward)


def l2_normalize(a, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Rows scaled to unit L2 norm (composite; differentiable throughout)."""
    sq = tsum(mul(a, a), axis=axis, keepdims=True)
    inv = power(add(sq, eps), -0.5)
    return mul(a, inv)


# -- image ops -------------------------------------------------------------


def conv2d(x, w, b=None) -> Tensor:
    """Same-padded stride-1 2D convolution.

    x: (N, C_in, H, W), w: (C_out, C_in, kh, kw) with kh == kw odd,
    b: optional (C_out,). Forward/backward via im2col.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d expects 4-D input and weight")
    n, c_in, h, wid = x.shape
    c_out, c_in_w, kh, kw = w.shape
    if c_in != c_in_w:
        raise ShapeError("conv2d channel mismatch: input %d vs weight %d" % (c_in, c_in_w))
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d kernel size must be odd")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    s = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, (n, c_in, kh, kw, h, wid), (s[0], s[1], s[2], s[3], s[2], s[3]))
    cols = view.reshape(n, c_in * kh * kw, h * wid)
    w2 = w.data.reshape(c_out, c_in * kh * kw)
    out_data = np.matmul(w2, cols).reshape(n, c_out, h, wid)
    if b is not None:
        b = as_tensor(b)
        out_data = out_data + b.data.reshape(1, c_out, 1, 1)
        parents = (x, w, b)
    else:
        parents = (x, w)

    def backward(g):
        g2 = g.reshape(n, c_out, h * wid)
        if w.requires_grad:
            dw = np.einsum("nch,nkh->ck", g2, cols, optimize=True)
            w._accumulate(dw.reshape(w.shape))
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = np.matmul(w2.T, g2).reshape(n, c_in, kh, kw, h, wid)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + h, j:j + wid] += dcols[:, :, i, j]
            x._accumulate(dxp[:, :, ph:ph + h, pw:pw + wid])

    return Tensor._from_op(out_data, parents, backward)


def avg_pool2d(x, k: int) -> Tensor:
    """Non-overlapping k x k average pooling; H and W must divide by k."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("avg_pool2d expects a 4-D tensor")
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError("avg_pool2d requires spatial dims divisible by %d" % k)
    out_data = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def backward(g):
        gg = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        x._accumulate(gg)

    return Tensor._from_op(out_data, (x,), backward)


def _bilinear_matrix(n_in: int, scale: int, dtype) -> np.ndarray:
    """(n_in*scale, n_in) interpolation matrix, half-pixel centers, edge clamp."""
    n_out = n_in * scale
    m = np.zeros((n_out, n_in), dtype=dtype)
    coords = (np.arange(n_out) + 0.5) / scale - 0.5
    i0 = np.floor(coords).astype(np.int64)
    t = coords - i0
    i1 = np.clip(i0 + 1, 0, n_in - 1)
    i0 = np.clip(i0, 0, n_in - 1)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - t)
    np.add.at(m, (rows, i1), t)
    return m


def upsample_bilinear2d(x, scale: int) -> Tensor:
    """Bilinear upsampling by an integer factor (half-pixel alignment)."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("upsample_bilinear2d expects a 4-D tensor")
    if scale == 1:
        return reshape(x, x.shape)
    n, c, h, w = x.shape
    ry = _bilinear_matrix(h, scale, x.dtype)
    rx = _bilinear_matrix(w, scale, x.dtype)
    out_data = np.einsum("ij,ncjk,lk->ncil", ry, x.data, rx, optimize=True)

    def backward(g):
        x._accumulate(np.einsum("ij,ncil,lk->ncjk", ry, g, rx, optimize=True))

    return Tensor._from_op(out_data, (x,), backward)


# -- gradient verification --------------------------------------------------


def grad_check(fn, inputs, eps: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    fn maps the list of input Tensors to a scalar Tensor; inputs must be
    float64 for the differences to resolve at the default eps.
    """
    inputs = list(inputs)
    for t in inputs:
        if t.dtype != np.float64:
            raise ValueError("grad_check requires float64 inputs")
    out = fn(inputs)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ShapeError("grad_check requires a scalar-valued function")
    for t in inputs:
        t.zero_grad()
    out = fn(inputs)
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    max_err = 0.0
    for t, ana in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        ana_flat = ana.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = fn(inputs).item()
            flat[i] = orig - eps
            f_minus = fn(inputs).item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            err = abs(ana_flat[i] - numeric) / max(1.0, abs(ana_flat[i]))
            if err > max_err:
                max_err = err
    return max_err
