"""Dense numerical primitives shared by every other module.

Arrays are plain :class:`numpy.ndarray` objects. Every op returns a fresh
array and keeps the dtype of its (promoted) inputs, so float32 is the fast
path and float64 is used for gradient checks.
"""

import os

import numpy as np

DEFAULT_DTYPE = np.float32
ZERO_NORM = 1e-12

# NaN/Inf checking after every op; switch on with GFSS_DEBUG=1 or set_debug(True).
_DEBUG = os.environ.get("GFSS_DEBUG", "0") not in ("", "0")


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf showed up in a tensor."""


def set_debug(flag):
    global _DEBUG
    _DEBUG = bool(flag)


def _checked(out):
    if _DEBUG and not np.all(np.isfinite(out)):
        raise NonFiniteError("non-finite values produced")
    return out


def as_tensor(data, dtype=None):
    """Build a float array and reject NaN/Inf."""
    arr = np.array(data, dtype=dtype or DEFAULT_DTYPE)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("tensor contains NaN or Inf")
    return arr


def matmul(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dims differ: {a.shape} @ {b.shape}")
    return _checked(a @ b)


def softmax(t, axis=-1):
    t = np.asarray(t)
    if t.ndim == 0 or t.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    shifted = t - np.max(t, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return _checked(e / np.sum(e, axis=axis, keepdims=True))


def log_softmax(t, axis=-1):
    t = np.asarray(t)
    if t.ndim == 0 or t.shape[axis] == 0:
        raise ShapeError("log_softmax over an empty axis")
    shifted = t - np.max(t, axis=axis, keepdims=True)
    return _checked(shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True)))


def sigmoid(x):
    x = np.asarray(x)
    # two-branch form avoids exp overflow for large |x|
    e = np.exp(-np.abs(x))
    return _checked(np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False))


def relu(x):
    return np.maximum(x, 0)


def cosine(a, b):
    """Cosine similarity of two vectors; 0 when either norm is below 1e-12."""
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na < ZERO_NORM or nb < ZERO_NORM:
        return a.dtype.type(0)
    return a.dtype.type(np.dot(a, b) / (na * nb))


def row_cosine(a, b):
    """Row-wise cosine between two (n, c) matrices."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"row_cosine shape mismatch {a.shape} vs {b.shape}")
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    denom = na * nb
    ok = (na >= ZERO_NORM) & (nb >= ZERO_NORM)
    dots = np.sum(a * b, axis=1)
    return np.where(ok, dots / np.where(ok, denom, 1), 0).astype(a.dtype, copy=False)


def l2_normalize(v, axis=-1):
    """Scale to unit L2 norm along ``axis``; zero vectors stay zero."""
    v = np.asarray(v)
    n = np.linalg.norm(v, axis=axis, keepdims=True)
    safe = np.where(n < ZERO_NORM, 1, n)
    return _checked(np.where(n < ZERO_NORM, 0, v / safe).astype(v.dtype, copy=False))


def reduce(t, axis, mode="mean"):
    t = np.asarray(t)
    if axis >= t.ndim or axis < -t.ndim:
        raise ShapeError(f"axis {axis} out of range for rank {t.ndim}")
    if t.shape[axis] == 0:
        raise ShapeError("reduce over an empty axis")
    if mode == "max":
        return np.max(t, axis=axis)
    if mode == "mean":
        return _checked(np.mean(t, axis=axis))
    if mode == "sum":
        return _checked(np.sum(t, axis=axis))
    raise ValueError(f"unknown reduce mode {mode!r}")


def _im2col(x):
    """(B, C, H, W) -> (B, C*9, H*W) patches of a 3x3 window, zero padding 1."""
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((b, c, 3, 3, h, w), dtype=x.dtype)
    for dy in range(3):
        for dx in range(3):
            cols[:, :, dy, dx] = xp[:, :, dy:dy + h, dx:dx + w]
    return cols.reshape(b, c * 9, h * w)


def _col2im(cols, shape):
    b, c, h, w = shape
    cols = cols.reshape(b, c, 3, 3, h, w)
    out = np.zeros((b, c, h + 2, w + 2), dtype=cols.dtype)
    for dy in range(3):
        for dx in range(3):
            out[:, :, dy:dy + h, dx:dx + w] += cols[:, :, dy, dx]
    return out[:, :, 1:-1, 1:-1]


def conv2d(x, w, bias, return_cols=False):
    """3x3 convolution, stride 1, zero padding 1.

    x is (B, Cin, H, W), w is (Cout, Cin, 3, 3) and bias is (Cout,).
    With ``return_cols`` the im2col buffer is also returned for reuse in
    :func:`conv2d_backward`.
    """
    x = np.asarray(x)
    w = np.asarray(w)
    if x.ndim != 4 or w.ndim != 4 or w.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d expects x (B,C,H,W) and w (O,C,3,3), got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"channel mismatch: input {x.shape[1]} vs kernel {w.shape[1]}")
    if np.shape(bias) != (w.shape[0],):
        raise ShapeError(f"bias must have shape ({w.shape[0]},)")
    b, _, h, wd = x.shape
    cols = _im2col(x)
    wm = w.reshape(w.shape[0], -1)
    out = np.matmul(wm, cols)
    out = out + np.asarray(bias)[None, :, None]
    out = _checked(out.reshape(b, w.shape[0], h, wd).astype(x.dtype, copy=False))
    if return_cols:
        return out, cols
    return out


def conv2d_backward(dout, x_shape, w, cols, need_input_grad=True):
    """Gradients of :func:`conv2d` w.r.t. weights, bias and (optionally) input."""
    b, cout, h, wd = dout.shape
    d = dout.reshape(b, cout, h * wd)
    dw = np.matmul(d, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    db = d.sum(axis=(0, 2))
    dx = None
    if need_input_grad:
        dcols = np.matmul(w.reshape(cout, -1).T, d)
        dx = _col2im(dcols, x_shape)
    return dw, db, dx
