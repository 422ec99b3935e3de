"""Dense tensors with reverse-mode automatic differentiation.

Everything is backed by numpy arrays. Values default to float32; wrap
float64 data (or pass ``dtype=np.float64``) to run the high-precision mode
used by gradient verification. Forward ops are pure; recording happens on
the output tensors themselves, and :class:`GradTape` walks that record in
reverse creation order, so replaying the same graph is bit-deterministic.

A recorded graph belongs to one logical thread. Values may be handed to
other threads, but never run a backward pass concurrently with forwards
that extend the same graph.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import DimensionError, UsageError, ValidationError

DEFAULT_DTYPE = np.float32
PROB_CLAMP = 1e-12  # floor applied before logarithms

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable op recording inside the block (eval-mode forwards)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class _Node:
    """One recorded operation: parent tensors plus the local backward rule."""

    __slots__ = ("inputs", "backward")

    def __init__(self, inputs, backward):
        self.inputs = inputs
        self.backward = backward


class Tensor:
    """N-dimensional real array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        was_array = isinstance(data, np.ndarray)
        arr = np.asarray(data)
        if dtype is None:
            # explicit float arrays keep their precision; everything else
            # (lists, scalars, integer arrays) lands on the default
            keep = was_array and arr.dtype in (np.float32, np.float64)
            dtype = arr.dtype if keep else DEFAULT_DTYPE
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None

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

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise UsageError(f"item() requires a scalar tensor, got shape {self.shape}")

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}{flag})"

    # operator sugar -----------------------------------------------------
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _from_op(out_data, inputs, backward):
    out = Tensor(out_data, dtype=out_data.dtype)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = _Node(inputs, backward)
    return out


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _from_op(out, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _from_op(out, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _from_op(out, (a, b), backward)


def neg(a):
    a = as_tensor(a)
    return _from_op(-a.data, (a,), lambda g: (-g,))


def reshape(a, shape):
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return _from_op(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose2d(a):
    """Differentiable 2-D transpose."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose2d expects a matrix, got shape {a.shape}")
    return _from_op(np.ascontiguousarray(a.data.T), (a,), lambda g: (g.T,))


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _from_op(out, tuple(tensors), backward)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)

    return _from_op(np.asarray(out), (a,), backward)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        count = a.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.shape[ax] for ax in axis]))
    else:
        count = a.shape[axis]
    s = tsum(a, axis=axis, keepdims=keepdims)
    return mul(s, 1.0 / count)


def reduce_max(a, axis, keepdims=False):
    """Max along a single axis; gradient flows to the first argmax."""
    a = as_tensor(a)
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)

    def backward(g):
        if keepdims:
            gexp = g
        else:
            gexp = np.expand_dims(g, axis)
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, np.expand_dims(idx, axis), gexp, axis=axis)
        return (ga,)

    out = out if keepdims else np.squeeze(out, axis=axis)
    return _from_op(out, (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b):
    """Matrix product for 1-D/2-D operands with shape checking."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise DimensionError(
            f"matmul supports 1-D/2-D operands, got shapes {a.shape} and {b.shape}"
        )
    inner_a = a.shape[-1]
    inner_b = b.shape[0]
    if inner_a != inner_b:
        raise DimensionError(
            f"matmul: inner dimensions disagree for shapes {a.shape} and {b.shape}"
        )
    out = a.data @ b.data

    def backward(g):
        ad, bd = a.data, b.data
        a2 = ad if ad.ndim == 2 else ad[None, :]
        b2 = bd if bd.ndim == 2 else bd[:, None]
        g2 = g.reshape(a2.shape[0], b2.shape[1])
        ga = (g2 @ b2.T).reshape(a.shape)
        gb = (a2.T @ g2).reshape(b.shape)
        return ga, gb

    return _from_op(np.asarray(out), (a, b), backward)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(a):
    a = as_tensor(a)
    out = np.maximum(a.data, 0)
    # subgradient at exactly 0 is 1, fixed convention
    return _from_op(out, (a,), lambda g: (g * (a.data >= 0),))


def leaky_relu(a, alpha=0.01):
    if not 0.0 < alpha < 1.0:
        raise ValidationError(f"leaky_relu slope must lie in (0,1), got {alpha}")
    a = as_tensor(a)
    pos = a.data >= 0
    out = np.where(pos, a.data, a.data * a.dtype.type(alpha))

    def backward(g):
        return (g * np.where(pos, a.dtype.type(1), a.dtype.type(alpha)),)

    return _from_op(out, (a,), backward)


def _sigmoid_stable(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    a = as_tensor(a)
    s = _sigmoid_stable(a.data)
    return _from_op(s, (a,), lambda g: (g * s * (1 - s),))


_ACTIVATIONS = {"relu", "leaky_relu", "sigmoid", "linear"}


def activation(a, kind, alpha=0.01):
    """Elementwise nonlinearity selected by name."""
    if kind == "relu":
        return relu(a)
    if kind == "leaky_relu":
        return leaky_relu(a, alpha)
    if kind == "sigmoid":
        return sigmoid(a)
    if kind == "linear":
        return as_tensor(a)
    raise ValidationError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}")


# ---------------------------------------------------------------------------
# softmax / loss
# ---------------------------------------------------------------------------

def softmax_rows(a):
    """Row-wise softmax of a 2-D tensor, computed with max subtraction."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"softmax_rows expects a 2-D tensor, got shape {a.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        inner = (g * s).sum(axis=1, keepdims=True)
        return (s * (g - inner),)

    return _from_op(s, (a,), backward)


def cross_entropy(p, y):
    """Mean negative log-probability of the true class.

    `p` holds per-row class probabilities (softmax output, two columns);
    `y` holds the 0/1 labels. Probabilities are clamped to
    [PROB_CLAMP, 1] before the log, so the loss is always finite.
    """
    p = as_tensor(p)
    y = np.asarray(y)
    if p.ndim != 2 or p.shape[1] != 2:
        raise DimensionError(f"cross_entropy expects an n,2 tensor, got shape {p.shape}")
    if y.shape != (p.shape[0],):
        raise DimensionError(
            f"cross_entropy: {p.shape[0]} rows but {y.shape} labels"
        )
    if y.size and not np.isin(y, (0, 1)).all():
        raise ValidationError("cross_entropy labels must be 0 or 1")
    y = y.astype(np.int64)
    rows = np.arange(p.shape[0])
    clamped = np.clip(p.data, PROB_CLAMP, 1.0)
    picked = clamped[rows, y]
    loss = -np.log(picked).mean()

    def backward(g):
        gp = np.zeros_like(p.data)
        inside = (p.data[rows, y] >= PROB_CLAMP) & (p.data[rows, y] <= 1.0)
        gp[rows, y] = -g * inside / (p.shape[0] * picked)
        return (gp,)

    return _from_op(np.asarray(loss, dtype=p.dtype), (p,), backward)


# ---------------------------------------------------------------------------
# convolution / pooling
# ---------------------------------------------------------------------------

def _conv_geometry(h, w, kh, kw, stride, pad):
    hp, wp = h + 2 * pad, w + 2 * pad
    if kh > hp or kw > wp:
        raise DimensionError(
            f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}"
        )
    return (hp - kh) // stride + 1, (wp - kw) // stride + 1


def _im2col(xh, kh, kw, stride, ho, wo):
    """Columns from a channels-last (B, H, W, C) array.

    Output rows follow (b, oy, ox); columns follow (i, j, c), so the reshape
    at the end is a view, not a copy.
    """
    b, _, _, c = xh.shape
    cols = np.empty((b, ho, wo, kh, kw, c), dtype=xh.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xh[:, i:i + stride * ho:stride,
                                        j:j + stride * wo:stride, :]
    return cols.reshape(b * ho * wo, kh * kw * c)


def conv2d(x, kernel, stride=1, pad=0):
    """2-D cross-correlation (no kernel flip), zero padding.

    `x` is (C,H,W) or batched (B,C,H,W); `kernel` is (C_out,C_in,kh,kw).
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if stride < 1:
        raise ValidationError(f"conv2d stride must be >= 1, got {stride}")
    single = x.ndim == 3
    if x.ndim not in (3, 4) or kernel.ndim != 4:
        raise DimensionError(
            f"conv2d expects (B,)C,H,W input and Co,Ci,kh,kw kernel, "
            f"got {x.shape} and {kernel.shape}"
        )
    xd = x.data[None] if single else x.data
    b, c, h, w = xd.shape
    co, ci, kh, kw = kernel.shape
    if ci != c:
        raise DimensionError(
            f"conv2d: input has {c} channels but kernel expects {ci} "
            f"(shapes {x.shape} and {kernel.shape})"
        )
    ho, wo = _conv_geometry(h, w, kh, kw, stride, pad)
    # pad and flip to channels-last in one pass
    xh = np.zeros((b, h + 2 * pad, w + 2 * pad, c), dtype=xd.dtype)
    xh[:, pad:pad + h, pad:pad + w, :] = xd.transpose(0, 2, 3, 1)
    kmat = kernel.data.transpose(2, 3, 1, 0).reshape(kh * kw * ci, co)
    cols = _im2col(xh, kh, kw, stride, ho, wo)
    out = (cols @ kmat).reshape(b, ho, wo, co).transpose(0, 3, 1, 2)

    def backward(g):
        if single:
            g = g[None]
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(b * ho * wo, co)
        gk = (gmat.T @ cols).reshape(co, kh, kw, ci).transpose(0, 3, 1, 2)
        if stride == 1 and pad < kh and pad < kw:
            # input gradient as a full correlation with the flipped kernel,
            # computed by a second im2col GEMM instead of 9 strided adds
            gp = np.zeros((b, h + kh - 1, w + kw - 1, co), dtype=g.dtype)
            gp[:, kh - 1 - pad:kh - 1 - pad + ho,
               kw - 1 - pad:kw - 1 - pad + wo, :] = g.transpose(0, 2, 3, 1)
            cols_g = _im2col(gp, kh, kw, 1, h, w)
            kf = np.flip(kernel.data, (2, 3)).transpose(2, 3, 0, 1).reshape(kh * kw * co, ci)
            gx = (cols_g @ kf).reshape(b, h, w, c).transpose(0, 3, 1, 2)
        else:
            dcols = (gmat @ kmat.T).reshape(b, ho, wo, kh, kw, c)
            gxh = np.zeros_like(xh)
            for i in range(kh):
                for j in range(kw):
                    gxh[:, i:i + stride * ho:stride,
                        j:j + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
            gxh = gxh[:, pad:pad + h, pad:pad + w, :] if pad else gxh
            gx = gxh.transpose(0, 3, 1, 2)
        if single:
            gx = gx[0]
        return np.ascontiguousarray(gx), np.ascontiguousarray(gk)

    out = out[0] if single else out
    return _from_op(np.ascontiguousarray(out), (x, kernel), backward)


def pool2d(x, kind, window):
    """Non-overlapping max/avg pooling; trailing remainder rows/cols dropped."""
    x = as_tensor(x)
    if kind not in ("max", "avg"):
        raise ValidationError(f"pool2d kind must be 'max' or 'avg', got {kind!r}")
    if window < 1:
        raise ValidationError(f"pool2d window must be >= 1, got {window}")
    single = x.ndim == 3
    if x.ndim not in (3, 4):
        raise DimensionError(f"pool2d expects (B,)C,H,W input, got shape {x.shape}")
    xd = x.data[None] if single else x.data
    b, c, h, w = xd.shape
    if window > h or window > w:
        raise DimensionError(
            f"pool2d window {window} exceeds spatial extent {h}x{w}; use global_pool"
        )
    ho, wo = h // window, w // window
    cropped = xd[:, :, :ho * window, :wo * window]
    tiles = cropped.reshape(b, c, ho, window, wo, window)
    tiles = tiles.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho, wo, window * window)

    if kind == "max":
        idx = np.argmax(tiles, axis=-1)
        out = np.take_along_axis(tiles, idx[..., None], axis=-1)[..., 0]
    else:
        out = tiles.mean(axis=-1)

    def backward(g):
        if single:
            g = g[None]
        gt = np.zeros((b, c, ho, wo, window * window), dtype=xd.dtype)
        if kind == "max":
            np.put_along_axis(gt, idx[..., None], g[..., None], axis=-1)
        else:
            gt[:] = (g / (window * window))[..., None]
        gt = gt.reshape(b, c, ho, wo, window, window).transpose(0, 1, 2, 4, 3, 5)
        gx = np.zeros_like(xd)
        gx[:, :, :ho * window, :wo * window] = gt.reshape(b, c, ho * window, wo * window)
        if single:
            gx = gx[0]
        return (gx,)

    out = out[0] if single else out
    return _from_op(np.ascontiguousarray(out), (x,), backward)


def global_pool(x, kind):
    """Pool over the full spatial extent: (B,)C,H,W -> (B,)C."""
    x = as_tensor(x)
    if x.ndim not in (3, 4):
        raise DimensionError(f"global_pool expects (B,)C,H,W input, got shape {x.shape}")
    lead = x.shape[:-2]
    flat = reshape(x, lead + (x.shape[-2] * x.shape[-1],))
    if kind == "avg":
        return tmean(flat, axis=len(lead))
    if kind == "max":
        return reduce_max(flat, axis=len(lead))
    raise ValidationError(f"global_pool kind must be 'max' or 'avg', got {kind!r}")


def dropout(x, rate, rng=None, train=True):
    """Inverted dropout; identity when not training or rate == 0."""
    x = as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ValidationError(f"dropout rate must lie in [0,1), got {rate}")
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise UsageError("dropout in train mode needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype)
    scale = x.dtype.type(1.0 / (1.0 - rate))
    out = x.data * keep * scale
    return _from_op(out, (x,), lambda g: (g * keep * scale,))


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

class GradTape:
    """Reverse-mode walk over the graph recorded beneath a scalar loss.

    After :meth:`backward`, ``ops`` holds the visited tensors in forward
    topological order and ``grads`` the accumulated buffers keyed by
    tensor identity. Fan-out accumulates additively; anything the loss
    never touched gets an exactly-zero gradient.
    """

    def __init__(self):
        self.ops = []
        self.grads = {}

    def backward(self, loss, params=None):
        if not isinstance(loss, Tensor) or loss.size != 1:
            raise UsageError("backward expects a scalar loss tensor")

        topo, visited = [], set()
        stack = [(loss, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                topo.append(t)
                continue
            if id(t) in visited:
                continue
            visited.add(id(t))
            stack.append((t, True))
            if t._node is not None:
                for parent in t._node.inputs:
                    stack.append((parent, False))
        self.ops = topo

        grads = {id(loss): np.ones_like(loss.data)}
        by_id = {id(loss): loss}
        for t in reversed(topo):
            g = grads.get(id(t))
            if g is None or t._node is None:
                continue
            parent_grads = t._node.backward(g)
            for parent, pg in zip(t._node.inputs, parent_grads):
                if pg is None or not (parent.requires_grad or parent._node is not None):
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg
                by_id[id(parent)] = parent

        self.grads = grads
        result = {}
        for tid, t in by_id.items():
            if t.requires_grad:
                t.grad = grads[tid]
                result[t] = grads[tid]
        if params is not None:
            for p in params:
                if p not in result:
                    z = np.zeros_like(p.data)
                    p.grad = z
                    result[p] = z
        return result


def backward(loss, params=None):
    """Fill ``.grad`` on every reachable requires_grad tensor.

    Returns the gradient map; tensors listed in `params` but unused by the
    loss get exact zeros.
    """
    return GradTape().backward(loss, params)


def finite_diff_grad(f, params, eps=1e-5):
    """Central-difference gradient oracle.

    `f` maps the (mutated in place) parameter list to a scalar; every
    coordinate of every parameter is perturbed by +/- `eps`. Use float64
    parameters for meaningful comparisons against reverse mode.
    """
    if eps <= 0:
        raise ValidationError(f"finite_diff_grad eps must be > 0, got {eps}")

    def evaluate():
        with no_grad():
            out = f(params)
        return out.item() if isinstance(out, Tensor) else float(out)

    result = {}
    for p in params:
        flat = p.data.reshape(-1)
        grad = np.zeros(flat.shape, dtype=np.float64)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + eps
            fp = evaluate()
            flat[i] = saved - eps
            fm = evaluate()
            flat[i] = saved
            grad[i] = (fp - fm) / (2.0 * eps)
        result[p] = grad.reshape(p.shape).astype(p.dtype)
    return result
