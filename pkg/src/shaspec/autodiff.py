"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation appends one node to the active :class:`Tape`.
Node parents always have smaller indices than the node itself, so a single
reverse sweep over the tape propagates gradients with each node visited
exactly once; values reused in several places accumulate the sum of all
path contributions.

Any operation whose result contains NaN/Inf raises :class:`NonFiniteError`
on the spot — silent propagation of non-finite values is never allowed.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ContractError, NonFiniteError, ShapeError, ValidationError

_TAPE_STACK: list["Tape"] = []

# Floor used when clamping probabilities before taking logs.
PROB_FLOOR = 1e-12


def active_tape():
    """The innermost open Tape, or None when recording is off."""
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tape:
    """Append-only record of executed operations.

    Used as a context manager around a forward pass; ``backward`` then walks
    the recorded nodes in reverse. Tensors created while no tape is open are
    plain values and track nothing.
    """

    def __init__(self):
        self._ops: list[str] = []
        self._parents: list[tuple[int, ...]] = []
        self._backwards: list = []
        self._tensors: list["Tensor"] = []

    def __len__(self):
        return len(self._ops)

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPE_STACK.pop()
        return False

    def _append(self, op, tensor, parent_ids, backward_fn):
        node_id = len(self._ops)
        self._ops.append(op)
        self._parents.append(parent_ids)
        self._backwards.append(backward_fn)
        self._tensors.append(tensor)
        tensor._tape = self
        tensor._node = node_id
        return node_id

    def _leaf_id(self, tensor):
        """Node id of `tensor` on this tape, registering a leaf on first use."""
        if tensor._tape is self and tensor._node >= 0:
            return tensor._node
        return self._append("leaf", tensor, (), None)


class Tensor:
    """Row-major float64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "_node")

    def __init__(self, data, requires_grad=False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor initialised with non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None
        self._node = -1

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ContractError(f"item() needs a scalar tensor, got shape {self.data.shape}")

    def numpy(self):
        """A defensive copy of the raw values."""
        return self.data.copy()

    def zero_grad(self):
        self.grad = None

    # ---- reduction / shaping sugar -------------------------------------
    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    # ---- operator sugar --------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _coerce(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _as_array(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _make(op, out_data, parents, backward_fn):
    """Wrap an op result, recording a tape node when gradients are needed."""
    out_data = np.asarray(out_data, dtype=np.float64)
    if not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"{op}: result contains a non-finite value")
    tape = active_tape()
    track = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = out_data if out_data.flags["C_CONTIGUOUS"] else np.ascontiguousarray(out_data)
    out.requires_grad = track
    out.grad = None
    out._tape = None
    out._node = -1
    if track:
        parent_ids = tuple(
            tape._leaf_id(p) if p.requires_grad else -1 for p in parents
        )
        tape._append(op, out, parent_ids, backward_fn)
    return out


def _unbroadcast(g, shape):
    """Sum `g` down to `shape`, inverting numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# --------------------------------------------------------------------------
# elementwise arithmetic
# --------------------------------------------------------------------------

def add(a, b):
    a, b = _coerce(a), _coerce(b)
    try:
        out = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: {a.shape} vs {b.shape}") from e

    def bfn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make("add", out, (a, b), bfn)


def sub(a, b):
    a, b = _coerce(a), _coerce(b)
    try:
        out = a.data - b.data
    except ValueError as e:
        raise ShapeError(f"sub: {a.shape} vs {b.shape}") from e

    def bfn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make("sub", out, (a, b), bfn)


def mul(a, b):
    a, b = _coerce(a), _coerce(b)
    try:
        out = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}") from e

    def bfn(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _make("mul", out, (a, b), bfn)


def div(a, b):
    a, b = _coerce(a), _coerce(b)
    try:
        out = a.data / b.data
    except ValueError as e:
        raise ShapeError(f"div: {a.shape} vs {b.shape}") from e

    def bfn(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return _make("div", out, (a, b), bfn)


def neg(a):
    a = _coerce(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def _dtanh(out_data, g):
    # Seam kept as a module function so verification fixtures can corrupt it.
    return g * (1.0 - out_data * out_data)


def tanh(a):
    a = _coerce(a)
    out = np.tanh(a.data)
    return _make("tanh", out, (a,), lambda g: (_dtanh(out, g),))


# --------------------------------------------------------------------------
# shaping
# --------------------------------------------------------------------------

def reshape(a, shape):
    a = _coerce(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from e
    src_shape = a.data.shape
    return _make("reshape", out, (a,), lambda g: (g.reshape(src_shape),))


def transpose(a, axes):
    a = _coerce(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.transpose(a.data, axes)
    return _make("transpose", out, (a,), lambda g: (np.transpose(g, inv),))


def concat(tensors, axis):
    tensors = [_coerce(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: empty tensor list")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError("concat: incompatible shapes") from e
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def bfn(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _make("concat", out, tuple(tensors), bfn)


def narrow(a, axis, start, length):
    """Contiguous slice of `length` entries along `axis`."""
    a = _coerce(a)
    if not (0 <= start and start + length <= a.data.shape[axis]):
        raise ShapeError(
            f"narrow: [{start}:{start + length}] out of bounds for axis {axis} "
            f"of shape {a.shape}"
        )
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = a.data[index]
    src_shape = a.data.shape

    def bfn(g):
        full = np.zeros(src_shape)
        full[index] = g
        return (full,)

    return _make("narrow", out, (a,), bfn)


# --------------------------------------------------------------------------
# reductions
# --------------------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a, axis=None):
    a = _coerce(a)
    axis = _norm_axis(axis, a.data.ndim)
    out = np.asarray(a.data.sum(axis=axis))
    src_shape = a.data.shape

    def bfn(g):
        if axis is None:
            return (np.broadcast_to(g, src_shape).copy(),)
        expanded = np.expand_dims(g, axis) if axis else g
        return (np.broadcast_to(expanded, src_shape).copy(),)

    return _make("sum", out, (a,), bfn)


def tmean(a, axis=None):
    a = _coerce(a)
    axis = _norm_axis(axis, a.data.ndim)
    out = np.asarray(a.data.mean(axis=axis))
    src_shape = a.data.shape
    count = a.data.size if axis is None else math.prod(src_shape[i] for i in axis)

    def bfn(g):
        if axis is None:
            return (np.broadcast_to(g / count, src_shape).copy(),)
        expanded = np.expand_dims(g, axis) if axis else g
        return (np.broadcast_to(expanded / count, src_shape).copy(),)

    return _make("mean", out, (a,), bfn)


# --------------------------------------------------------------------------
# linear algebra and convolution
# --------------------------------------------------------------------------

def matmul(a, b):
    a, b = _coerce(a), _coerce(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: need 2-D operands, got {a.shape} and {b.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} vs {b.shape}")
    out = a.data @ b.data

    def bfn(g):
        return g @ b.data.T, a.data.T @ g

    return _make("matmul", out, (a, b), bfn)


def conv2d(x, kernels):
    """3x3 cross-correlation, stride 1, zero padding 1.

    `x` is (c_in, h, w) or batched (b, c_in, h, w); `kernels` is
    (c_out, c_in, 3, 3). Output spatial size equals input spatial size.
    Accumulation order over (c_in, kh, kw) is fixed so the result is
    bit-identical to a plain six-nested-loop evaluation.
    """
    x, kernels = _coerce(x), _coerce(kernels)
    if kernels.data.ndim != 4 or kernels.data.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d: kernels must be (c_out, c_in, 3, 3), got {kernels.shape}")
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise ShapeError(f"conv2d: input must be 3-D or 4-D, got {x.shape}")
    b, ci, h, w = xd.shape
    co = kernels.data.shape[0]
    if kernels.data.shape[1] != ci:
        raise ShapeError(
            f"conv2d: channel mismatch, input has {ci}, kernels expect {kernels.data.shape[1]}"
        )
    kd = kernels.data
    xpad = np.zeros((b, ci, h + 2, w + 2))
    xpad[:, :, 1:-1, 1:-1] = xd
    out = np.zeros((b, co, h, w))
    for c in range(ci):
        plane = xpad[:, c]
        for kh in range(3):
            for kw in range(3):
                out += plane[:, kh:kh + h, kw:kw + w][:, None] * kd[:, c, kh, kw][None, :, None, None]

    def bfn(g):
        gb = g[None] if squeeze and g.ndim == 3 else g
        gx = np.zeros_like(xpad)
        gk = np.zeros_like(kd)
        for c in range(ci):
            plane = xpad[:, c]
            for kh in range(3):
                for kw in range(3):
                    gx[:, c, kh:kh + h, kw:kw + w] += np.tensordot(gb, kd[:, c, kh, kw], axes=([1], [0]))
                    gk[:, c, kh, kw] = np.tensordot(gb, plane[:, kh:kh + h, kw:kw + w], axes=([0, 2, 3], [0, 1, 2]))
        gxc = gx[:, :, 1:-1, 1:-1]
        return (gxc[0] if squeeze else gxc, gk)

    return _make("conv2d", out[0] if squeeze else out, (x, kernels), bfn)


def avg_pool2(x):
    """2x2 average pooling with stride 2 on (b, c, h, w)."""
    x = _coerce(x)
    if x.data.ndim != 4:
        raise ShapeError(f"avg_pool2: need (b, c, h, w), got {x.shape}")
    b, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2: spatial dims must be even, got {h}x{w}")
    out = x.data.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def bfn(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) / 4.0,)

    return _make("avg_pool2", out, (x,), bfn)


def upsample2(x):
    """Nearest-neighbour 2x upsampling on (b, c, h, w)."""
    x = _coerce(x)
    if x.data.ndim != 4:
        raise ShapeError(f"upsample2: need (b, c, h, w), got {x.shape}")
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    b, c, h, w = x.data.shape

    def bfn(g):
        return (g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _make("upsample2", out, (x,), bfn)


def dropout(x, p, rng):
    """Inverted dropout; pass-through when p == 0."""
    x = _coerce(x)
    if not 0.0 <= p < 1.0:
        raise ValidationError(f"dropout: p must be in [0, 1), got {p}")
    if p == 0.0:
        return x
    keep = (rng.random(x.data.shape) >= p).astype(np.float64) / (1.0 - p)
    out = x.data * keep
    return _make("dropout", out, (x,), lambda g: (g * keep,))


# --------------------------------------------------------------------------
# probabilistic ops
# --------------------------------------------------------------------------

def softmax(z, axis=-1):
    """Numerically stable softmax along `axis` (max-subtraction)."""
    z = _coerce(z)
    zd = z.data
    shifted = zd - zd.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bfn(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _make("softmax", out, (z,), bfn)


def _validate_target(t, n):
    if t.shape[-1] != n:
        raise ShapeError(f"target length {t.shape[-1]} != logits length {n}")
    if np.any(t < -1e-12):
        raise ValidationError("target distribution has negative entries")
    sums = t.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > 1e-8):
        raise ValidationError("target distribution does not sum to 1")


def cross_entropy_soft(logits, target):
    """-sum(target * log_softmax(logits)); row-mean when logits are batched.

    `target` is a probability vector (or per-row matrix) treated as a
    constant; gradients flow into the logits only.
    """
    logits = _coerce(logits)
    t = _as_array(target)
    zd = logits.data
    if zd.ndim not in (1, 2):
        raise ShapeError(f"cross_entropy_soft: logits must be 1-D or 2-D, got {logits.shape}")
    if t.ndim > zd.ndim:
        raise ShapeError(f"target shape {t.shape} exceeds logits shape {logits.shape}")
    _validate_target(np.atleast_2d(t), zd.shape[-1])
    if zd.ndim == 2 and t.ndim == 1:
        t = np.broadcast_to(t, zd.shape)
    m = zd.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(zd - m).sum(axis=-1, keepdims=True))
    logp = zd - lse
    rows = -(t * logp).sum(axis=-1)
    out = np.asarray(rows.mean()) if zd.ndim == 2 else np.asarray(rows)
    p = np.exp(logp)
    scale = 1.0 / zd.shape[0] if zd.ndim == 2 else 1.0

    def bfn(g):
        return ((p - t) * (g * scale),)

    return _make("cross_entropy_soft", out, (logits,), bfn)


def kl_div(p, q):
    """KL(p || q) with q clamped below by 1e-12 and 0*log(0/q) := 0.

    1-D inputs give the plain divergence; 2-D inputs are treated as rows of
    distributions and the row divergences are averaged.
    """
    p, q = _coerce(p), _coerce(q)
    if p.data.shape != q.data.shape:
        raise ShapeError(f"kl_div: shapes differ, {p.shape} vs {q.shape}")
    if p.data.ndim not in (1, 2):
        raise ShapeError(f"kl_div: need 1-D or 2-D distributions, got {p.shape}")
    pd, qd = p.data, q.data
    qc = np.maximum(qd, PROB_FLOOR)
    pc = np.maximum(pd, PROB_FLOOR)
    log_ratio = np.log(pc) - np.log(qc)
    terms = np.where(pd > 0.0, pd * log_ratio, 0.0)
    rows = terms.sum(axis=-1)
    out = np.asarray(rows.mean()) if pd.ndim == 2 else np.asarray(rows)
    scale = 1.0 / pd.shape[0] if pd.ndim == 2 else 1.0

    def bfn(g):
        gp = np.where(pd > 0.0, log_ratio + 1.0, 0.0) * (g * scale)
        gq = np.where(qd > PROB_FLOOR, -pd / qc, 0.0) * (g * scale)
        return gp, gq

    return _make("kl_div", out, (p, q), bfn)


def pnorm_distance(a, b, p, sample_axis=None):
    """Distance between same-shape tensors.

    p=1 is the mean absolute difference, p=2 the Euclidean norm of the
    difference and p="mse" the mean squared difference. With
    ``sample_axis=0`` the distance is taken per row and averaged, which
    keeps the value stable across batch sizes.
    """
    a, b = _coerce(a), _coerce(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"pnorm_distance: shapes differ, {a.shape} vs {b.shape}")
    if p not in (1, 2, "mse"):
        raise ValidationError(f"pnorm_distance: p must be 1, 2 or 'mse', got {p!r}")
    if sample_axis not in (None, 0):
        raise ValidationError("pnorm_distance: sample_axis must be None or 0")
    d = a.data - b.data
    if sample_axis is None:
        flat = d.reshape(1, -1)
        rows = 1
    else:
        flat = d.reshape(d.shape[0], -1)
        rows = d.shape[0]
    n = flat.shape[1]

    if p == 1:
        out = np.asarray(np.abs(flat).mean(axis=1).mean())

        def bfn(g):
            gd = np.sign(flat) * (g / (n * rows))
            gd = gd.reshape(d.shape)
            return gd, -gd

    elif p == 2:
        norms = np.sqrt((flat * flat).sum(axis=1))
        out = np.asarray(norms.mean())

        def bfn(g):
            safe = np.where(norms > 0.0, norms, 1.0)
            gd = flat / safe[:, None] * np.where(norms > 0.0, 1.0, 0.0)[:, None]
            gd = (gd * (g / rows)).reshape(d.shape)
            return gd, -gd

    else:  # mse
        out = np.asarray((flat * flat).mean(axis=1).mean())

        def bfn(g):
            gd = 2.0 * flat * (g / (n * rows))
            gd = gd.reshape(d.shape)
            return gd, -gd

    return _make("pnorm_distance", out, (a, b), bfn)


# --------------------------------------------------------------------------
# backward pass
# --------------------------------------------------------------------------

def backward(root):
    """Populate .grad on every requires_grad tensor feeding the scalar root.

    Repeated calls accumulate into existing gradients; call zero_grad on the
    tensors (or the model) between steps.
    """
    tape = active_tape()
    if tape is None:
        raise ContractError("backward: no active tape")
    if not isinstance(root, Tensor) or root.data.size != 1:
        raise ContractError("backward: root must be a scalar tensor")
    if root._tape is not tape or root._node < 0:
        raise ContractError("backward: root is not recorded on the current tape")
    grads = [None] * (root._node + 1)
    grads[root._node] = np.ones_like(root.data)
    for k in range(root._node, -1, -1):
        g = grads[k]
        if g is None:
            continue
        bfn = tape._backwards[k]
        if bfn is not None:
            for pid, pg in zip(tape._parents[k], bfn(g)):
                if pid < 0 or pg is None:
                    continue
                if grads[pid] is None:
                    grads[pid] = np.array(pg, dtype=np.float64)
                else:
                    grads[pid] += pg
        t = tape._tensors[k]
        if t.requires_grad:
            t.grad = g.copy() if t.grad is None else t.grad + g
        grads[k] = None
