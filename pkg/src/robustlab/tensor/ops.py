"""Differentiable primitives.

Each primitive is a numpy forward pass plus a closure computing the
vector-Jacobian product.  Broadcasting is limited to a scalar (shape ``()``)
operand; per-channel bias goes through the explicit ``bias_add`` primitive.
Kinks: ``sign`` has zero gradient everywhere, ``relu`` and ``leaky_relu``
take subgradient 0 at exactly 0, and ``clamp`` passes gradient only strictly
inside ``(lo, hi)``.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import ShapeError, Tensor, active_record, as_tensor

PRIMITIVES: dict[str, Callable] = {}


def primitive(name: str):
    def register(fn):
        PRIMITIVES[name] = fn
        return fn
    return register


def _emit(op: str, inputs: Sequence[Tensor], out: np.ndarray, vjp, selective: bool = False) -> Tensor:
    rec = active_record()
    if rec is not None and any(isinstance(t, Tensor) and t.record is rec for t in inputs):
        return rec.push(op, inputs, out, vjp, selective)
    for t in inputs:
        if isinstance(t, Tensor) and t.record is not None and t.record is not rec:
            if rec is not None:
                raise ValueError(f"{op}: operand belongs to a different computation record")
    return Tensor(out)


def apply_primitive(op: str, *inputs, **params) -> Tensor:
    """Dispatch by primitive name, e.g. ``apply_primitive("conv2d", x, w, pad=1)``."""
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise ValueError(f"unknown primitive {op!r}") from None
    return fn(*inputs, **params)


def _same_or_scalar(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    return np.asarray(g.sum()) if shape == () and g.shape != () else g


# elementwise arithmetic ---------------------------------------------------

@primitive("add")
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_or_scalar("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", (a, b), a.data + b.data,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


@primitive("sub")
def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_or_scalar("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", (a, b), a.data - b.data,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


@primitive("mul")
def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_or_scalar("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", (a, b), ad * bd,
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


@primitive("scalar_mul")
def scalar_mul(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _emit("scalar_mul", (a,), a.data * c, lambda g: (g * c,))


@primitive("bias_add")
def bias_add(x, b) -> Tensor:
    """Add a per-channel vector along axis 1 of ``x``."""
    x, b = as_tensor(x), as_tensor(b)
    if x.data.ndim < 2 or b.shape != (x.shape[1],):
        raise ShapeError(f"bias_add: bias shape {b.shape} does not match channels of {x.shape}")
    view = (1, -1) + (1,) * (x.data.ndim - 2)
    axes = (0,) + tuple(range(2, x.data.ndim))
    return _emit("bias_add", (x, b), x.data + b.data.reshape(view),
                 lambda g: (g, g.sum(axis=axes)))


@primitive("matmul")
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _emit("matmul", (a, b), ad @ bd,
                 lambda g, need: (g @ bd.T if need[0] else None, ad.T @ g if need[1] else None),
                 selective=True)


# activations --------------------------------------------------------------

@primitive("relu")
def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _emit("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


@primitive("leaky_relu")
def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    d = np.where(x.data > 0, 1.0, slope)
    d[x.data == 0] = 0.0
    return _emit("leaky_relu", (x,), np.where(x.data > 0, x.data, slope * x.data),
                 lambda g: (g * d,))


@primitive("sigmoid")
def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _emit("sigmoid", (x,), y, lambda g: (g * y * (1.0 - y),))


@primitive("tanh")
def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _emit("tanh", (x,), y, lambda g: (g * (1.0 - y * y),))


@primitive("sign")
def sign(x) -> Tensor:
    x = as_tensor(x)
    return _emit("sign", (x,), np.sign(x.data), lambda g: (np.zeros_like(g),))


@primitive("clamp")
def clamp(x, lo: float = -np.inf, hi: float = np.inf) -> Tensor:
    x = as_tensor(x)
    inside = (x.data > lo) & (x.data < hi)
    return _emit("clamp", (x,), np.clip(x.data, lo, hi), lambda g: (g * inside,))


# reductions and losses ----------------------------------------------------

@primitive("sum")
def sum_(x) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return _emit("sum", (x,), np.asarray(x.data.sum()), lambda g: (np.full(shape, g),))


@primitive("mean")
def mean(x) -> Tensor:
    x = as_tensor(x)
    shape, n = x.shape, x.size
    return _emit("mean", (x,), np.asarray(x.data.mean()),
                 lambda g: (np.full(shape, g / n),))


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy_per_sample(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Untaped per-sample cross-entropy, used where no gradient is needed."""
    return -log_softmax(logits)[np.arange(len(labels)), labels]


@primitive("softmax_cross_entropy")
def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean cross-entropy of ``(N, K)`` logits against integer labels."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.data.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    lsm = log_softmax(logits.data)
    loss = -lsm[np.arange(n), labels].mean()

    def vjp(g):
        p = np.exp(lsm)
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    return _emit("softmax_cross_entropy", (logits,), np.asarray(loss), vjp)


@primitive("l1_loss")
def l1_loss(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"l1_loss: shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    s = np.sign(diff)
    return _emit("l1_loss", (a, b), np.asarray(np.abs(diff).mean()),
                 lambda g: (g * s / n, -g * s / n))


@primitive("l2_loss")
def l2_loss(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"l2_loss: shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    return _emit("l2_loss", (a, b), np.asarray((diff * diff).mean()),
                 lambda g: (2.0 * g * diff / n, -2.0 * g * diff / n))


# structural ---------------------------------------------------------------

@primitive("reshape")
def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
    old = x.shape
    return _emit("reshape", (x,), out, lambda g: (g.reshape(old),))


@primitive("concat")
def concat(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    base = ts[0].shape
    for t in ts[1:]:
        if len(t.shape) != len(base) or any(
                a != b for i, (a, b) in enumerate(zip(t.shape, base)) if i != axis % len(base)):
            raise ShapeError(f"concat: shape mismatch {base} vs {t.shape} off axis {axis}")
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    out = np.concatenate([t.data for t in ts], axis=axis)
    return _emit("concat", ts, out, lambda g: tuple(np.split(g, sizes, axis=axis)))


# convolution --------------------------------------------------------------

def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def im2col(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """Patch tensor ``(N, C*k*k, P)`` built from k*k slice copies.

    For stride 1 the patches are taken from the flattened padded image, so
    each copy is one contiguous run; rows then have ``Wp`` columns of which
    the last ``k - 1`` are junk (``P = Ho * Wp``).  For other strides
    ``P = Ho * Wo``.
    """
    xp = _pad(x, pad)
    n, c, hp, wp = xp.shape
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    if stride == 1:
        flat = np.zeros((n, c, hp * wp + k - 1))
        flat[:, :, :hp * wp] = xp.reshape(n, c, hp * wp)
        cols = np.empty((n, c, k, k, ho * wp))
        for i in range(k):
            for j in range(k):
                off = i * wp + j
                cols[:, :, i, j] = flat[:, :, off:off + ho * wp]
        return cols.reshape(n, c * k * k, ho * wp)
    cols = np.empty((n, c, k, k, ho, wo))
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
    return cols.reshape(n, c * k * k, ho * wo)


def _row_width(x_w: int, k: int, stride: int, pad: int) -> int:
    # columns per output row in the im2col layout
    return x_w + 2 * pad if stride == 1 else (x_w + 2 * pad - k) // stride + 1


def conv_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int, cols=None) -> np.ndarray:
    f, c, k, _ = w.shape
    n, _, h, wd = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    if cols is None:
        cols = im2col(x, k, stride, pad)
    out = np.matmul(w.reshape(f, c * k * k), cols).reshape(n, f, ho, _row_width(wd, k, stride, pad))
    return out if out.shape[3] == wo else np.ascontiguousarray(out[..., :wo])


def conv_grad_input(g: np.ndarray, w: np.ndarray, in_shape, stride: int, pad: int) -> np.ndarray:
    n, c, h, wd = in_shape
    f, _, k, _ = w.shape
    ho, wo = g.shape[2], g.shape[3]
    if stride == 1 and pad <= k - 1 and ho + 2 * (k - 1 - pad) - k + 1 == h:
        # full correlation with the flipped, channel-swapped kernel
        wf = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        return conv_forward(g, wf, 1, k - 1 - pad)
    wt = np.ascontiguousarray(w.reshape(f, c * k * k).T)
    dcols = np.matmul(wt, g.reshape(n, f, ho * wo)).reshape(n, c, k, k, ho, wo)
    dxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    for i in range(k):
        for j in range(k):
            dst = (slice(None), slice(None),
                   slice(i, i + stride * (ho - 1) + 1, stride), slice(j, j + stride * (wo - 1) + 1, stride))
            if stride >= k:
                dxp[dst] = dcols[:, :, i, j]      # windows do not overlap
            else:
                dxp[dst] += dcols[:, :, i, j]
    return dxp[:, :, pad:pad + h, pad:pad + wd] if pad else dxp


def conv_grad_weight(x: np.ndarray, g: np.ndarray, k: int, stride: int, pad: int, cols=None) -> np.ndarray:
    n, f, ho, wo = g.shape
    c = x.shape[1]
    if cols is None:
        cols = im2col(x, k, stride, pad)
    row = _row_width(x.shape[3], k, stride, pad)
    if row != wo:
        gw = np.zeros((n, f, ho, row))
        gw[..., :wo] = g
        g = gw
    return np.tensordot(g.reshape(n, f, ho * row), cols, axes=([0, 2], [0, 2])).reshape(f, c, k, k)


@primitive("conv2d")
def conv2d(x, w, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``(N, C, H, W)`` with ``(F, C, k, k)`` weights."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: shape mismatch input {x.shape} vs kernel {w.shape}")
    k = w.shape[2]
    if x.shape[2] + 2 * pad < k or x.shape[3] + 2 * pad < k:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")
    xd, wd = x.data, w.data
    cols = im2col(xd, k, stride, pad)
    out = conv_forward(xd, wd, stride, pad, cols)
    return _emit("conv2d", (x, w), out, lambda g, need: (
        conv_grad_input(g, wd, xd.shape, stride, pad) if need[0] else None,
        conv_grad_weight(xd, g, k, stride, pad, cols) if need[1] else None), selective=True)


@primitive("conv_transpose2d")
def conv_transpose2d(x, w, stride: int = 2, pad: int = 0, output_padding=0) -> Tensor:
    """Transposed convolution; ``w`` is ``(C_in, C_out, k, k)``.

    Output extent is ``(H - 1) * stride - 2 * pad + k + output_padding``;
    ``output_padding`` may be one int or a ``(rows, cols)`` pair.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[0] or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv_transpose2d: shape mismatch input {x.shape} vs kernel {w.shape}")
    op_h, op_w = (output_padding, output_padding) if np.isscalar(output_padding) else output_padding
    if not (0 <= op_h < stride and 0 <= op_w < stride):
        raise ValueError("output_padding must lie in [0, stride)")
    k = w.shape[2]
    n, _, h, wd_ = x.shape
    ho = (h - 1) * stride - 2 * pad + k + op_h
    wo = (wd_ - 1) * stride - 2 * pad + k + op_w
    xd, wd = x.data, w.data
    out = conv_grad_input(xd, wd, (n, w.shape[1], ho, wo), stride, pad)
    return _emit("conv_transpose2d", (x, w), out, lambda g, need: (
        conv_forward(g, wd, stride, pad) if need[0] else None,
        conv_grad_weight(g, xd, k, stride, pad) if need[1] else None), selective=True)


@primitive("max_pool2d")
def max_pool2d(x, k: int = 2) -> Tensor:
    """Non-overlapping ``k x k`` max pooling (stride ``k``, floor mode).

    Ties route the gradient to the first maximum in row-major window order.
    """
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"max_pool2d: expected 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    ho, wo = h // k, w // k
    if ho == 0 or wo == 0:
        raise ShapeError(f"max_pool2d: window {k} larger than input {x.shape}")
    blocks = x.data[:, :, :ho * k, :wo * k].reshape(n, c, ho, k, wo, k)
    flat = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
    idx = flat.argmax(axis=-1)[..., None]
    out = np.take_along_axis(flat, idx, axis=-1)[..., 0]
    shape = x.shape

    def vjp(g):
        gflat = np.zeros((n, c, ho, wo, k * k))
        np.put_along_axis(gflat, idx, g[..., None], axis=-1)
        gx = np.zeros(shape)
        gx[:, :, :ho * k, :wo * k] = gflat.reshape(n, c, ho, wo, k, k).transpose(
            0, 1, 2, 4, 3, 5).reshape(n, c, ho * k, wo * k)
        return (gx,)

    return _emit("max_pool2d", (x,), out, vjp)
