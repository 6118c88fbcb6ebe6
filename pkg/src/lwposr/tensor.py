"""Float64 tensors with reverse-mode automatic differentiation.

The graph is taped per forward pass: each traced tensor keeps an ordered
tuple of parents plus a closure that routes its gradient to them.  Calling
``backward`` on a scalar walks the tape once in reverse topological order and
then releases it, so a second call without a fresh forward pass is an error.
Evaluation under ``no_grad`` (or with no traced parent) builds no graph.

Gradient buffers are accumulated functionally (``grad = grad + g``), never in
place, so a buffer handed to two parents can be aliased safely.
"""

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy.special import erf

from . import _kernels


class LwposrError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(LwposrError):
    """Operand shapes are inconsistent with the operation's contract."""


class AutodiffError(LwposrError):
    """Misuse of the autodiff tape (non-scalar or repeated backward)."""


class NumericError(LwposrError):
    """Non-finite values were produced where finite values are required."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (pure evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class MacCounter:
    """Counts multiply-accumulate operations executed by forward kernels."""

    __slots__ = ("active", "macs")

    def __init__(self):
        self.active = False
        self.macs = 0


mac_counter = MacCounter()


@contextmanager
def count_macs():
    """Count forward-kernel MACs inside the block.

    Yields a holder whose .macs carries the final count once the block
    exits; nested blocks fold their counts into the enclosing one.
    """
    prev_active, prev_macs = mac_counter.active, mac_counter.macs
    mac_counter.active = True
    mac_counter.macs = 0
    holder = MacCounter()
    try:
        yield holder
    finally:
        holder.macs = mac_counter.macs
        mac_counter.active = prev_active
        mac_counter.macs = prev_macs + (holder.macs if prev_active else 0)


def _count(n):
    if mac_counter.active:
        mac_counter.macs += n


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backprop", "_spent")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backprop = None
        self._spent = False

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

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def assert_finite(self, context):
        if not np.all(np.isfinite(self.data)):
            raise NumericError(f"non-finite values encountered in {context}")
        return self

    def backward(self):
        """Backpropagate from this scalar through the taped graph."""
        if self.data.size != 1:
            raise AutodiffError(
                f"backward requires a scalar, got shape {self.data.shape}"
            )
        if self._spent:
            raise AutodiffError(
                "backward was already called on this graph; run a fresh forward pass"
            )
        topo = []
        visited = {id(self)}
        if self._backprop is not None:
            stack = [(self, 0)]
            while stack:
                node, state = stack.pop()
                if state:
                    topo.append(node)
                    continue
                stack.append((node, 1))
                for parent in reversed(node._parents):
                    if parent._backprop is not None and id(parent) not in visited:
                        visited.add(id(parent))
                        stack.append((parent, 0))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            node._backprop(node.grad)
            node._backprop = None
            node._parents = ()
            node._spent = True
            node.grad = None
        self._spent = True

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class ParamTensor:
    """A trainable tensor with its hierarchical name (stream/stage/layer/...)."""

    name: str
    tensor: Tensor

    def __post_init__(self):
        if not self.tensor.requires_grad:
            raise ValueError(f"parameter {self.name!r} must require gradients")


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _trace(data, parents, backprop):
    """Wrap op output, attaching the tape node when tracing is active."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True)
        out._parents = tuple(parents)
        out._backprop = backprop
        return out
    return Tensor(data)


def _accumulate(t, g):
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise and shape ops -------------------------------------------


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def backprop(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _trace(data, (a, b), backprop)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data - b.data

    def backprop(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _trace(data, (a, b), backprop)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def backprop(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _trace(data, (a, b), backprop)


def neg(a):
    def backprop(g):
        _accumulate(a, -g)

    return _trace(-a.data, (a,), backprop)


def reshape(a, shape):
    orig = a.data.shape
    data = a.data.reshape(shape)

    def backprop(g):
        _accumulate(a, g.reshape(orig))

    return _trace(data, (a,), backprop)


def transpose(a, axes):
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    data = np.ascontiguousarray(a.data.transpose(axes))

    def backprop(g):
        _accumulate(a, np.ascontiguousarray(g.transpose(inverse)))

    return _trace(data, (a,), backprop)


def concat(tensors, axis):
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backprop(g):
        for t, piece in zip(tensors, np.split(g, bounds, axis=axis)):
            _accumulate(t, np.ascontiguousarray(piece))

    return _trace(data, tuple(tensors), backprop)


def narrow(a, axis, start, length):
    """Slice ``length`` entries from ``start`` along ``axis``."""
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    data = np.ascontiguousarray(a.data[index])

    def backprop(g):
        full = np.zeros_like(a.data)
        full[index] = g
        _accumulate(a, full)

    return _trace(data, (a,), backprop)


def mean_all(a):
    n = a.data.size
    data = np.asarray(a.data.mean())

    def backprop(g):
        _accumulate(a, np.full(a.data.shape, float(g) / n))

    return _trace(data, (a,), backprop)


def absolute(a):
    data = np.abs(a.data)

    def backprop(g):
        # sign(0) == 0: the subgradient at the kink is fixed to zero
        _accumulate(a, g * np.sign(a.data))

    return _trace(data, (a,), backprop)


# -- activations ----------------------------------------------------------


def relu(a):
    data = np.maximum(a.data, 0.0)

    def backprop(g):
        _accumulate(a, g * (a.data > 0.0))

    return _trace(data, (a,), backprop)


def tanh(a):
    data = np.tanh(a.data)

    def backprop(g):
        _accumulate(a, g * (1.0 - data * data))

    return _trace(data, (a,), backprop)


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a):
    """Exact Gaussian-CDF gelu: x * Phi(x)."""
    phi = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    data = a.data * phi

    def backprop(g):
        density = np.exp(-0.5 * a.data * a.data) * _INV_SQRT2PI
        _accumulate(a, g * (phi + a.data * density))

    return _trace(data, (a,), backprop)


ACTIVATIONS = {"relu": relu, "tanh": tanh, "gelu": gelu}


def softmax(a):
    """Softmax over the last axis, computed with max subtraction."""
    n = a.data.shape[-1]
    flat = np.ascontiguousarray(a.data.reshape(-1, n))
    out = np.empty_like(flat)
    _kernels.softmax_rows(flat, out)
    data = out.reshape(a.data.shape)

    def backprop(g):
        dot = np.sum(g * data, axis=-1, keepdims=True)
        _accumulate(a, data * (g - dot))

    return _trace(data, (a,), backprop)


# -- dense linear algebra --------------------------------------------------


def matmul(a, b):
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul operands must have at least 2 dimensions")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions differ: {a.data.shape} @ {b.data.shape}"
        )
    data = np.matmul(a.data, b.data)
    _count(data.size * a.data.shape[-1])

    def backprop(g):
        da = np.matmul(g, np.swapaxes(b.data, -1, -2))
        db = np.matmul(np.swapaxes(a.data, -1, -2), g)
        _accumulate(a, _unbroadcast(da, a.data.shape))
        _accumulate(b, _unbroadcast(db, b.data.shape))

    return _trace(data, (a, b), backprop)


def linear(x, weight, bias=None):
    """Affine map: x @ weight^T + bias, with weight shaped (d_out, d_in)."""
    if x.data.shape[-1] != weight.data.shape[1]:
        raise ShapeError(
            f"linear expects input features {weight.data.shape[1]}, "
            f"got {x.data.shape[-1]}"
        )
    d_out, d_in = weight.data.shape
    if x.data.ndim == 2:
        # per-sample GEMMs keep identical rows bit-identical (a single 2-d
        # GEMM routes remainder rows through different BLAS edge kernels)
        data = np.matmul(x.data[:, None, :], weight.data.T)[:, 0, :]
    else:
        data = np.matmul(x.data, weight.data.T)
    if bias is not None:
        data += bias.data
    _count((x.data.size // d_in) * d_in * d_out)

    def backprop(g):
        g2 = g.reshape(-1, d_out)
        x2 = x.data.reshape(-1, d_in)
        _accumulate(x, np.matmul(g, weight.data).reshape(x.data.shape))
        _accumulate(weight, np.matmul(g2.T, x2))
        if bias is not None:
            _accumulate(bias, g2.sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _trace(data, parents, backprop)


# -- convolutions ----------------------------------------------------------


def _conv_geometry(h, w, f, stride, padding):
    if f % 2 != 1:
        raise ShapeError(f"kernel size must be odd, got {f}")
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ShapeError(f"padding must be >= 0, got {padding}")
    for extent in (h, w):
        if (extent + 2 * padding - f) % stride != 0:
            raise ShapeError(
                f"output extent for input {extent}, kernel {f}, stride {stride}, "
                f"padding {padding} is not integral"
            )
    return (h + 2 * padding - f) // stride + 1, (w + 2 * padding - f) // stride + 1


def _pad_input(x, padding):
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv2d_standard(x, weight, stride=1, padding=0):
    """Dense 2-d convolution; weight shaped (c_out, c_in, f, f)."""
    b, c_in, h, w = x.data.shape
    c_out, c_in_k, f, f2 = weight.data.shape
    if f != f2:
        raise ShapeError("convolution kernels must be square")
    if c_in_k != c_in:
        raise ShapeError(f"kernel expects {c_in_k} input channels, got {c_in}")
    ho, wo = _conv_geometry(h, w, f, stride, padding)
    xp = _pad_input(x.data, padding)
    sb, sc, sh, sw = xp.strides
    windows = as_strided(
        xp,
        shape=(b, c_in, ho, wo, f, f),
        strides=(sb, sc, sh * stride, sw * stride, sh, sw),
    )
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(
        b * ho * wo, c_in * f * f
    )
    wmat = weight.data.reshape(c_out, c_in * f * f)
    out = np.matmul(cols, wmat.T)
    _count(out.size * c_in * f * f)
    data = np.ascontiguousarray(
        out.reshape(b, ho, wo, c_out).transpose(0, 3, 1, 2)
    )

    def backprop(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, c_out)
        _accumulate(weight, np.matmul(g2.T, cols).reshape(weight.data.shape))
        dcols = np.matmul(g2, wmat).reshape(b, ho, wo, c_in, f, f)
        dcols = dcols.transpose(0, 3, 1, 2, 4, 5)
        dxp = np.zeros_like(xp)
        for i in range(f):
            for j in range(f):
                dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                    :, :, :, :, i, j
                ]
        if padding:
            dxp = dxp[:, :, padding : padding + h, padding : padding + w]
        _accumulate(x, np.ascontiguousarray(dxp))

    return _trace(data, (x, weight), backprop)


def conv2d_depthwise(x, weight, stride=1, padding=0):
    """Per-channel convolution; weight shaped (c_in, f, f)."""
    b, c_in, h, w = x.data.shape
    c_k, f, f2 = weight.data.shape
    if f != f2:
        raise ShapeError("convolution kernels must be square")
    if c_k != c_in:
        raise ShapeError(
            f"depthwise kernel has {c_k} channels but input has {c_in}"
        )
    ho, wo = _conv_geometry(h, w, f, stride, padding)
    xp = np.ascontiguousarray(_pad_input(x.data, padding))
    out = np.empty((b, c_in, ho, wo))
    _kernels.dwconv_fwd(xp, weight.data, stride, out)
    _count(out.size * f * f)

    def backprop(g):
        g = np.ascontiguousarray(g)
        dxp = np.zeros_like(xp)
        _kernels.dwconv_bwd_input(weight.data, g, stride, dxp)
        if padding:
            dxp = np.ascontiguousarray(dxp[:, :, padding : padding + h, padding : padding + w])
        _accumulate(x, dxp)
        dw = np.zeros_like(weight.data)
        _kernels.dwconv_bwd_weight(xp, g, stride, dw)
        _accumulate(weight, dw)

    return _trace(out, (x, weight), backprop)


def conv2d_pointwise(x, weight):
    """1x1 convolution: a per-pixel linear map over channels; weight (c_out, c_in)."""
    b, c_in, h, w = x.data.shape
    c_out, c_in_k = weight.data.shape
    if c_in_k != c_in:
        raise ShapeError(f"pointwise kernel expects {c_in_k} channels, got {c_in}")
    flat = x.data.reshape(b, c_in, h * w)
    out = np.matmul(weight.data, flat)
    _count(out.size * c_in)

    def backprop(g):
        g3 = g.reshape(b, c_out, h * w)
        _accumulate(x, np.matmul(weight.data.T, g3).reshape(x.data.shape))
        dw = np.matmul(g3, flat.swapaxes(1, 2)).sum(axis=0)
        _accumulate(weight, dw)

    return _trace(out.reshape(b, c_out, h, w), (x, weight), backprop)


def bias_channels(x, bias):
    """Add a per-channel bias to a (B, C, H, W) map."""
    data = x.data + bias.data[None, :, None, None]

    def backprop(g):
        _accumulate(x, g)
        _accumulate(bias, g.sum(axis=(0, 2, 3)))

    return _trace(data, (x, bias), backprop)


# -- normalization ---------------------------------------------------------


class BatchNormState:
    """Running per-channel statistics owned by one batch-norm layer.

    Pass initialized=True to start from the (mean 0, var 1) prior, which
    makes a freshly built model evaluable before any training step.
    """

    __slots__ = ("running_mean", "running_var", "initialized")

    def __init__(self, channels, initialized=False):
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.initialized = initialized


def batch_norm(x, gamma, beta, state, mode, eps=1e-5, momentum=0.1):
    """Channel normalization over (B, H, W) for a (B, C, H, W) input.

    Train mode normalizes by batch statistics and folds them into the running
    state; eval mode is a pure function of the stored statistics.  A batch of
    one sample reuses the running statistics (if any) instead of its own.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown batch norm mode {mode!r}")
    b, c, h, w = x.data.shape
    if mode == "eval" or (b == 1 and state.initialized):
        if not state.initialized:
            raise LwposrError(
                "eval-mode batch norm requires initialized running statistics"
            )
        inv_std = 1.0 / np.sqrt(state.running_var + eps)
        scale = gamma.data * inv_std
        shift = beta.data - state.running_mean * scale
        out = np.empty_like(x.data)
        _kernels.affine_channels(x.data, scale, shift, out)
        mean = state.running_mean.copy()

        def backprop(g):
            _accumulate(x, g * scale[None, :, None, None])
            xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
            _accumulate(gamma, np.sum(g * xhat, axis=(0, 2, 3)))
            _accumulate(beta, g.sum(axis=(0, 2, 3)))

        return _trace(out, (x, gamma, beta), backprop)

    xc = np.ascontiguousarray(x.data)
    mean, var = _kernels.bn_stats(xc)
    inv_std = 1.0 / np.sqrt(var + eps)
    scale = gamma.data * inv_std
    shift = beta.data - mean * scale
    out = np.empty_like(xc)
    _kernels.affine_channels(xc, scale, shift, out)

    n = b * h * w
    unbiased = var * (n / (n - 1)) if n > 1 else var
    state.running_mean = (1.0 - momentum) * state.running_mean + momentum * mean
    state.running_var = (1.0 - momentum) * state.running_var + momentum * unbiased
    state.initialized = True

    def backprop(g):
        dx, dgamma, dbeta = _kernels.bn_bwd(
            xc, np.ascontiguousarray(g), mean, inv_std, gamma.data
        )
        _accumulate(x, dx)
        _accumulate(gamma, dgamma)
        _accumulate(beta, dbeta)

    return _trace(out, (x, gamma, beta), backprop)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalization over the last (feature) axis."""
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError("layer norm affine parameters must match the feature axis")
    flat = np.ascontiguousarray(x.data.reshape(-1, d))
    rows = flat.shape[0]
    out = np.empty_like(flat)
    mean = np.empty(rows)
    inv_std = np.empty(rows)
    _kernels.ln_fwd(flat, gamma.data, beta.data, eps, out, mean, inv_std)

    def backprop(g):
        g2 = np.ascontiguousarray(g.reshape(rows, d))
        dx = np.empty_like(flat)
        dgamma = np.empty(d)
        dbeta = np.empty(d)
        _kernels.ln_bwd(flat, g2, gamma.data, mean, inv_std, dx, dgamma, dbeta)
        _accumulate(x, dx.reshape(x.data.shape))
        _accumulate(gamma, dgamma)
        _accumulate(beta, dbeta)

    return _trace(out.reshape(x.data.shape), (x, gamma, beta), backprop)


# -- pooling ---------------------------------------------------------------


def pool2d(x, kind, window=2, stride=2):
    """Non-overlapping 2x2 mean or max reduction."""
    if window != 2 or stride != 2:
        raise ShapeError("only 2x2 window with stride 2 is supported")
    if kind not in ("avg", "max"):
        raise ValueError(f"unknown pooling kind {kind!r}")
    b, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"pooling requires even extents, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    blocks = x.data.reshape(b, c, h2, 2, w2, 2)

    if kind == "avg":
        data = (
            blocks[:, :, :, 0, :, 0]
            + blocks[:, :, :, 1, :, 0]
            + blocks[:, :, :, 0, :, 1]
            + blocks[:, :, :, 1, :, 1]
        ) * 0.25

        def backprop(g):
            dx = np.empty_like(x.data)
            dx.reshape(b, c, h2, 2, w2, 2)[...] = (g * 0.25)[:, :, :, None, :, None]
            _accumulate(x, dx)

        return _trace(data, (x,), backprop)

    quads = np.ascontiguousarray(blocks.transpose(0, 1, 2, 4, 3, 5)).reshape(
        b, c, h2, w2, 4
    )
    idx = quads.argmax(axis=-1)
    data = np.take_along_axis(quads, idx[..., None], axis=-1)[..., 0]

    def backprop(g):
        dquads = np.zeros((b, c, h2, w2, 4))
        np.put_along_axis(dquads, idx[..., None], g[..., None], axis=-1)
        dx = (
            dquads.reshape(b, c, h2, w2, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(b, c, h, w)
        )
        _accumulate(x, np.ascontiguousarray(dx))

    return _trace(data, (x,), backprop)


def pack_heads(x, n_heads):
    """Regroup (B, A, n_heads*dk) into head-major (B*n_heads, A, dk)."""
    b, a, c = x.data.shape
    if c % n_heads != 0:
        raise ShapeError(f"feature width {c} is not divisible by {n_heads} heads")
    dk = c // n_heads
    src = np.ascontiguousarray(x.data)
    out = np.empty((b * n_heads, a, dk))
    _kernels.pack_heads(src, n_heads, out)

    def backprop(g):
        dx = np.empty((b, a, c))
        _kernels.unpack_heads(np.ascontiguousarray(g), n_heads, dx)
        _accumulate(x, dx)

    return _trace(out, (x,), backprop)


def unpack_heads(x, n_heads):
    """Inverse of pack_heads: (B*n_heads, A, dk) -> (B, A, n_heads*dk)."""
    bh, a, dk = x.data.shape
    if bh % n_heads != 0:
        raise ShapeError(f"group count {bh} is not divisible by {n_heads} heads")
    b = bh // n_heads
    src = np.ascontiguousarray(x.data)
    out = np.empty((b, a, n_heads * dk))
    _kernels.unpack_heads(src, n_heads, out)

    def backprop(g):
        dx = np.empty((bh, a, dk))
        _kernels.pack_heads(np.ascontiguousarray(g), n_heads, dx)
        _accumulate(x, dx)

    return _trace(out, (x,), backprop)


# -- fused attention --------------------------------------------------------


def attention(q, k, v, scale):
    """Scaled dot-product attention over (groups, positions, features) stacks.

    Computes softmax(q k^T * scale) v per group with max-subtracted softmax.
    """
    if q.data.ndim != 3 or k.data.ndim != 3 or v.data.ndim != 3:
        raise ShapeError("attention operands must be rank-3 (group, position, dim)")
    g_count, a, dk = q.data.shape
    if k.data.shape != (g_count, a, dk):
        raise ShapeError(f"key shape {k.data.shape} must match query {q.data.shape}")
    if v.data.shape[:2] != (g_count, a):
        raise ShapeError("value group/position dims must match the query")
    dv = v.data.shape[2]
    qd = np.ascontiguousarray(q.data)
    kd = np.ascontiguousarray(k.data)
    vd = np.ascontiguousarray(v.data)
    out = np.empty((g_count, a, dv))
    _count(g_count * a * a * (dk + dv))

    tracked = _grad_enabled and (q.requires_grad or k.requires_grad or v.requires_grad)
    if not tracked:
        _kernels.attn_fwd_nograd(qd, kd, vd, scale, out)
        return Tensor(out)

    probs = np.empty((g_count, a, a))
    _kernels.attn_fwd(qd, kd, vd, scale, out, probs)

    def backprop(g):
        dq = np.empty_like(qd)
        dk_ = np.empty_like(kd)
        dv_ = np.empty_like(vd)
        _kernels.attn_bwd(qd, kd, vd, scale, probs, np.ascontiguousarray(g), dq, dk_, dv_)
        _accumulate(q, dq)
        _accumulate(k, dk_)
        _accumulate(v, dv_)

    return _trace(out, (q, k, v), backprop)
