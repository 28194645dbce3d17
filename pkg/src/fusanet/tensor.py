"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable quantity in the package (depth maps, confidence maps,
feature volumes, layer parameters) is a Tensor.  Graphs are built eagerly
during the forward pass and walked once, in exact reverse order, by
``backward``.  Gradients accumulate additively at fan-out.

Numerical guards: ln and sqrt clamp their argument below at EPS, division
clamps |denominator| at EPS, so any forward op on finite inputs stays finite.
Inside a clamped region the corresponding partial derivative is taken as 0.
"""

from dataclasses import dataclass

import numpy as np

from . import _kernels

EPS = 1e-20

_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

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
        return neg(self)

    def sum(self, axes=None, keepdims=False):
        return reduce_sum(self, axes, keepdims)

    def mean(self, axes=None, keepdims=False):
        return reduce_mean(self, axes, keepdims)

    def rms(self, axes=None, keepdims=False):
        return reduce_rms(self, axes, keepdims)

    def reshape(self, shape):
        return reshape(self, shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accum(t, g):
    if not t.requires_grad:
        return
    g = _unbroadcast(g, t.data.shape)
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g, shape):
    """Sum a gradient over the axes numpy broadcasting expanded."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a, b, opname):
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ValueError(
            f"{opname}: shapes {a.data.shape} and {b.data.shape} do not broadcast"
        ) from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def bwd(g):
        _accum(a, g)
        _accum(b, g)

    return _make(a.data + b.data, (a, b), bwd)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def bwd(g):
        _accum(a, g)
        _accum(b, -g)

    return _make(a.data - b.data, (a, b), bwd)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bwd(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make(a.data * b.data, (a, b), bwd)


def div(a, b):
    """a / b with |denominator| clamped at EPS (sign-preserving; sign(0) -> +)."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    sgn = np.where(b.data < 0.0, -1.0, 1.0)
    den = np.where(np.abs(b.data) < EPS, sgn * EPS, b.data)
    clamped = np.abs(b.data) < EPS
    out = a.data / den

    def bwd(g):
        _accum(a, g / den)
        _accum(b, np.where(clamped, 0.0, -g * out / den))

    return _make(out, (a, b), bwd)


def neg(a):
    a = as_tensor(a)

    def bwd(g):
        _accum(a, -g)

    return _make(-a.data, (a,), bwd)


def absolute(a):
    """|a|; subgradient at 0 is 0."""
    a = as_tensor(a)
    s = np.sign(a.data)

    def bwd(g):
        _accum(a, g * s)

    return _make(np.abs(a.data), (a,), bwd)


def ln(a):
    """Natural log; argument clamped below at EPS (zero gradient in the clamp)."""
    a = as_tensor(a)
    arg = np.maximum(a.data, EPS)
    live = a.data >= EPS

    def bwd(g):
        _accum(a, np.where(live, g / arg, 0.0))

    return _make(np.log(arg), (a,), bwd)


def sqrt(a):
    """Square root; argument clamped below at EPS (zero gradient in the clamp)."""
    a = as_tensor(a)
    arg = np.maximum(a.data, EPS)
    out = np.sqrt(arg)
    live = a.data >= EPS

    def bwd(g):
        _accum(a, np.where(live, 0.5 * g / out, 0.0))

    return _make(out, (a,), bwd)


def relu(a):
    a = as_tensor(a)
    live = a.data > 0

    def bwd(g):
        _accum(a, np.where(live, g, 0.0))

    return _make(np.where(live, a.data, 0.0), (a,), bwd)


def sigmoid(a):
    a = as_tensor(a)
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bwd(g):
        _accum(a, g * out * (1.0 - out))

    return _make(out, (a,), bwd)


def minimum(a, b):
    """Elementwise min; ties route the gradient to the first operand."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "minimum")
    take_a = a.data <= b.data

    def bwd(g):
        _accum(a, np.where(take_a, g, 0.0))
        _accum(b, np.where(take_a, 0.0, g))

    return _make(np.where(take_a, a.data, b.data), (a, b), bwd)


def maximum(a, b):
    """Elementwise max; ties route the gradient to the first operand."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "maximum")
    take_a = a.data >= b.data

    def bwd(g):
        _accum(a, np.where(take_a, g, 0.0))
        _accum(b, np.where(take_a, 0.0, g))

    return _make(np.where(take_a, a.data, b.data), (a, b), bwd)


def softplus(a):
    """ln(1 + exp(a)), strictly positive for a > -745; derivative sigmoid(a)."""
    a = as_tensor(a)
    x = a.data
    out = np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)
    sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bwd(g):
        _accum(a, g * sig)

    return _make(out, (a,), bwd)


def clamp01(a):
    return minimum(maximum(a, 0.0), 1.0)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _norm_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(ax % ndim for ax in axes)
    if any(ax >= ndim for ax in axes) or len(set(axes)) != len(axes):
        raise ValueError(f"bad reduction axes {axes} for rank {ndim}")
    return axes


def reduce_sum(a, axes=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axes(axes, a.data.ndim)
    if any(a.data.shape[ax] == 0 for ax in axes) or a.data.size == 0:
        raise ValueError("reduction over an empty set")
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bwd(g):
        gg = g if keepdims else np.expand_dims(g, axes)
        _accum(a, np.broadcast_to(gg, a.data.shape))

    return _make(out, (a,), bwd)


def reduce_mean(a, axes=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axes(axes, a.data.ndim)
    count = 1
    for ax in axes:
        count *= a.data.shape[ax]
    if count == 0:
        raise ValueError("reduction over an empty set")
    return reduce_sum(a, axes, keepdims) * (1.0 / count)


def reduce_rms(a, axes=None, keepdims=False):
    """sqrt of the mean of squares (the clamped sqrt keeps 0 differentiable)."""
    return sqrt(reduce_mean(mul(a, a), axes, keepdims))


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(a, shape):
    a = as_tensor(a)
    out = a.data.reshape(shape)

    def bwd(g):
        _accum(a, g.reshape(a.data.shape))

    return _make(out, (a,), bwd)


def concat(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, g[tuple(idx)])

    return _make(out, tuple(tensors), bwd)


def slice_axis0(a, i):
    """a[i:i+1] along axis 0, kept in the graph."""
    a = as_tensor(a)

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[i : i + 1] = g
            _accum(a, full)

    return _make(a.data[i : i + 1].copy(), (a,), bwd)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.data.shape} @ {b.data.shape}")

    def bwd(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), bwd)


# ---------------------------------------------------------------------------
# spatial ops (rank-4 NCHW)
# ---------------------------------------------------------------------------

def _require4d(a, opname):
    if a.data.ndim != 4:
        raise ValueError(f"{opname} expects a rank-4 NCHW tensor, got rank {a.data.ndim}")


def pad_replicate(a, pad):
    """Replicate-pad the two spatial dims by `pad` pixels each side."""
    a = as_tensor(a)
    _require4d(a, "pad_replicate")
    if pad == 0:
        return a
    h, w = a.data.shape[2], a.data.shape[3]
    iy = np.clip(np.arange(-pad, h + pad), 0, h - 1)
    ix = np.clip(np.arange(-pad, w + pad), 0, w - 1)
    out = a.data[:, :, iy][:, :, :, ix]

    def bwd(g):
        if not a.requires_grad:
            return
        tmp = np.zeros(g.shape[:3] + (w,))
        np.add.at(tmp, (slice(None), slice(None), slice(None), ix), g)
        ga = np.zeros_like(a.data)
        np.add.at(ga, (slice(None), slice(None), iy), tmp)
        _accum(a, ga)

    return _make(out, (a,), bwd)


def _odd_reflect_coeffs(n, pad):
    """Index/coefficient pairs realizing odd reflection about the edge value:
    out[-k] = 2*out[0] - out[k].  Linear signals continue exactly."""
    if pad >= n:
        raise ValueError(f"odd reflection pad {pad} needs extent > pad, got {n}")
    pos = np.arange(-pad, n + pad)
    ia = np.clip(pos, 0, n - 1)
    ib = np.where(pos < 0, -pos, np.where(pos >= n, 2 * (n - 1) - pos, ia))
    ca = np.where((pos < 0) | (pos >= n), 2.0, 1.0)
    cb = np.where((pos < 0) | (pos >= n), -1.0, 0.0)
    return ia, ib, ca, cb


def pad_reflect_odd(a, pad):
    """Pad the spatial dims by odd reflection, which preserves planes exactly
    (replicate padding would kink them and fabricate border curvature)."""
    a = as_tensor(a)
    _require4d(a, "pad_reflect_odd")
    if pad == 0:
        return a
    h, w = a.data.shape[2], a.data.shape[3]
    ra, rb, rca, rcb = _odd_reflect_coeffs(h, pad)
    ca_, cb_, cca, ccb = _odd_reflect_coeffs(w, pad)
    rca_ = rca[:, None]
    rcb_ = rcb[:, None]
    rows = a.data[:, :, ra, :] * rca_ + a.data[:, :, rb, :] * rcb_
    out = rows[:, :, :, ca_] * cca + rows[:, :, :, cb_] * ccb

    def bwd(g):
        if not a.requires_grad:
            return
        grows = np.zeros(g.shape[:3] + (w,))
        np.add.at(grows, (slice(None), slice(None), slice(None), ca_), g * cca)
        np.add.at(grows, (slice(None), slice(None), slice(None), cb_), g * ccb)
        ga = np.zeros_like(a.data)
        np.add.at(ga, (slice(None), slice(None), ra), grows * rca_)
        np.add.at(ga, (slice(None), slice(None), rb), grows * rcb_)
        _accum(a, ga)

    return _make(out, (a,), bwd)


def _pad_rows_cols_replicate(a, rows, cols):
    """Replicate-pad `rows` extra rows at the bottom, `cols` at the right."""
    a = as_tensor(a)
    h, w = a.data.shape[2], a.data.shape[3]
    iy = np.minimum(np.arange(h + rows), h - 1)
    ix = np.minimum(np.arange(w + cols), w - 1)
    out = a.data[:, :, iy][:, :, :, ix]

    def bwd(g):
        if not a.requires_grad:
            return
        tmp = np.zeros(g.shape[:3] + (w,))
        np.add.at(tmp, (slice(None), slice(None), slice(None), ix), g)
        ga = np.zeros_like(a.data)
        np.add.at(ga, (slice(None), slice(None), iy), tmp)
        _accum(a, ga)

    return _make(out, (a,), bwd)


def conv2d(x, w, bias=None, stride=1, dilation=1, padding=0):
    """2D cross-correlation, NCHW.

    Zero padding; per output element the accumulation order is bias first,
    then taps in (ci, ki, kj) order (see _kernels).
    """
    x, w = as_tensor(x), as_tensor(w)
    b = as_tensor(bias) if bias is not None else None
    _require4d(x, "conv2d")
    if w.data.ndim != 4:
        raise ValueError(f"conv2d kernel must be rank 4, got rank {w.data.ndim}")
    if x.data.shape[1] != w.data.shape[1]:
        raise ValueError(
            f"conv2d: input channels {x.data.shape[1]} != kernel channels {w.data.shape[1]}"
        )
    if stride < 1 or dilation < 1 or padding < 0:
        raise ValueError("conv2d: stride, dilation must be >= 1 and padding >= 0")
    _kernels.conv_geometry(
        x.data.shape[2], x.data.shape[3], w.data.shape[2], w.data.shape[3],
        stride, dilation, padding,
    )
    if padding:
        xpad = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xpad = x.data
    out, _col = _kernels.conv2d_forward(
        xpad, w.data, b.data if b is not None else None, stride, dilation
    )

    def bwd(g):
        need_x, need_w = x.requires_grad, w.requires_grad
        if need_x or need_w:
            gx, gw = _kernels.conv2d_backward(
                g, xpad, w.data, None, stride, dilation, need_x, need_w
            )
            if need_w:
                _accum(w, gw)
            if need_x:
                if padding:
                    gx = gx[:, :, padding:-padding, padding:-padding]
                _accum(x, gx)
        if b is not None and b.requires_grad:
            _accum(b, g.sum(axis=(0, 2, 3)))

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, bwd)


def downsample2x_avg(a):
    """Halve both spatial extents by 2x2 averaging.

    Odd extents are first replicate-padded by one row/column.
    """
    a = as_tensor(a)
    _require4d(a, "downsample2x_avg")
    h, w = a.data.shape[2], a.data.shape[3]
    if h < 2 or w < 2:
        raise ValueError(f"downsample2x_avg needs spatial extents >= 2, got {h}x{w}")
    if h % 2 or w % 2:
        a = _pad_rows_cols_replicate(a, h % 2, w % 2)
        h, w = a.data.shape[2], a.data.shape[3]
    n, c = a.data.shape[0], a.data.shape[1]
    out = a.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def bwd(g):
        if a.requires_grad:
            ga = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25
            _accum(a, ga)

    return _make(out, (a,), bwd)


def _bilinear_axis_indices(n_out, n_in):
    src = np.clip((np.arange(n_out) + 0.5) / 2.0 - 0.5, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(np.int64)
    i0 = np.minimum(i0, n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = src - i0
    return i0, i1, w1


def upsample2x_bilinear(a):
    """Double both spatial extents with half-pixel-centre bilinear weights."""
    a = as_tensor(a)
    _require4d(a, "upsample2x_bilinear")
    h, w = a.data.shape[2], a.data.shape[3]
    if h < 2 or w < 2:
        raise ValueError(f"upsample2x_bilinear needs spatial extents >= 2, got {h}x{w}")
    r0, r1, wr = _bilinear_axis_indices(2 * h, h)
    c0, c1, wc = _bilinear_axis_indices(2 * w, w)
    wr_ = wr[:, None]
    rows = a.data[:, :, r0, :] * (1.0 - wr_) + a.data[:, :, r1, :] * wr_
    out = rows[:, :, :, c0] * (1.0 - wc) + rows[:, :, :, c1] * wc

    def bwd(g):
        if not a.requires_grad:
            return
        grows = np.zeros(a.data.shape[:2] + (2 * h, w))
        np.add.at(grows, (slice(None), slice(None), slice(None), c0), g * (1.0 - wc))
        np.add.at(grows, (slice(None), slice(None), slice(None), c1), g * wc)
        ga = np.zeros_like(a.data)
        np.add.at(ga, (slice(None), slice(None), r0), grows * (1.0 - wr_))
        np.add.at(ga, (slice(None), slice(None), r1), grows * wr_)
        _accum(a, ga)

    return _make(out, (a,), bwd)


def resample(a, mode):
    if mode == "downsample2x-avg":
        return downsample2x_avg(a)
    if mode == "upsample2x-bilinear":
        return upsample2x_bilinear(a)
    raise ValueError(f"unknown resample mode {mode!r}")


def gather_pixels(a, rows, cols):
    """Read a[0, 0, rows, cols] as a length-P vector (differentiable in a)."""
    a = as_tensor(a)
    _require4d(a, "gather_pixels")
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)

    def bwd(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            np.add.at(ga[0, 0], (rows, cols), g)
            _accum(a, ga)

    return _make(a.data[0, 0, rows, cols].copy(), (a,), bwd)


def scatter_pixels(values, rows, cols, hw):
    """Scatter-add a length-P vector into a zero (1,1,H,W) grid."""
    values = as_tensor(values)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    h, w = hw
    out = np.zeros((1, 1, h, w))
    np.add.at(out[0, 0], (rows, cols), values.data)

    def bwd(g):
        _accum(values, g[0, 0, rows, cols])

    return _make(out, (values,), bwd)


def scatter_channels(values, rows, cols, chw):
    """Scatter-add (P, C) point features into a zero (1,C,H,W) grid."""
    values = as_tensor(values)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    c, h, w = chw
    out = np.zeros((1, c, h, w))
    np.add.at(out[0], (slice(None), rows, cols), values.data.T)

    def bwd(g):
        _accum(values, g[0][:, rows, cols].T)

    return _make(out, (values,), bwd)


# ---------------------------------------------------------------------------
# backward pass and gradient checking
# ---------------------------------------------------------------------------

def backward(loss):
    """Populate .grad with d(loss)/d(tensor) for the whole recorded graph."""
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("backward called on a non-finite loss")
    if not loss.requires_grad:
        return

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
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


@dataclass
class GradcheckReport:
    max_rel_error: float
    tol: float
    n_elements: int

    @property
    def passed(self):
        return self.max_rel_error <= self.tol

    def __str__(self):
        word = "pass" if self.passed else "FAIL"
        return (
            f"gradcheck {word}: max rel error {self.max_rel_error:.3e} "
            f"(tol {self.tol:.1e}, {self.n_elements} elements)"
        )


def gradcheck(f, x, step=1e-4, tol=1e-3):
    """Compare the analytic gradient of scalar-valued f against central
    finite differences, elementwise over x.

    Relative error uses max(|analytic|, |numeric|, 1) as the denominator.
    """
    if step <= 0:
        raise ValueError("gradcheck step must be positive")
    x0 = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True)
    y = f(xt)
    if y.data.size != 1:
        raise ValueError("gradcheck target function must be scalar-valued")
    if not np.isfinite(y.data).all():
        raise FloatingPointError("gradcheck: f(x) is not finite")
    backward(y)
    analytic = xt.grad.copy() if xt.grad is not None else np.zeros_like(x0)

    flat = x0.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        pert = flat.copy()
        pert[i] = flat[i] + step
        fp = float(f(Tensor(pert.reshape(x0.shape))).data.reshape(-1)[0])
        pert[i] = flat[i] - step
        fm = float(f(Tensor(pert.reshape(x0.shape))).data.reshape(-1)[0])
        numeric[i] = (fp - fm) / (2.0 * step)
    numeric = numeric.reshape(x0.shape)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    max_rel = float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
    return GradcheckReport(max_rel, tol, flat.size)
