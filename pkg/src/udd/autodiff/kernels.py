"""Raw numpy kernels used by the graph primitives.

Everything here works on plain arrays; differentiation lives in ``ops``.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv_out_hw(h: int, w: int, kh: int, kw: int, stride: int, padding: int) -> tuple[int, int]:
    return (h + 2 * padding - kh) // stride + 1, (w + 2 * padding - kw) // stride + 1


def col2im(cols: np.ndarray, x_shape: tuple, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Adjoint of :func:`patches`: scatter-add [B, C*kh*kw, Ho*Wo] columns back into an image."""
    b, c, h, w = x_shape
    ho, wo = conv_out_hw(h, w, kh, kw, stride, padding)
    cols = cols.reshape(b, c, kh, kw, ho, wo)
    out = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    if padding:
        out = out[:, :, padding:padding + h, padding:padding + w]
    return np.ascontiguousarray(out)


def patches(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Per-sample unfold: [B, C*kh*kw, Ho*Wo]."""
    b, c, h, w = x.shape
    ho, wo = conv_out_hw(h, w, kh, kw, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    v = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return v.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * kh * kw, ho * wo)


def conv2d(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    co, _, kh, kw = w.shape
    b, _, h, wd = x.shape
    ho, wo = conv_out_hw(h, wd, kh, kw, stride, padding)
    return np.matmul(w.reshape(co, -1), patches(x, kh, kw, stride, padding)).reshape(b, co, ho, wo)


def conv2d_input_grad(g: np.ndarray, w: np.ndarray, x_shape: tuple, stride: int, padding: int) -> np.ndarray:
    co, ci, kh, kw = w.shape
    if stride == 1 and ci >= 8 and padding <= min(kh, kw) - 1 and kh == kw:
        # transposed convolution = convolution with the flipped, channel-swapped kernel
        wf = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        return conv2d(g, wf, 1, kh - 1 - padding)
    b = g.shape[0]
    cols = np.matmul(w.reshape(co, -1).T, g.reshape(b, co, -1))  # [B, C*kh*kw, Ho*Wo]
    return col2im(cols, x_shape, kh, kw, stride, padding)


def conv2d_weight_grad(x: np.ndarray, g: np.ndarray, w_shape: tuple, stride: int, padding: int) -> np.ndarray:
    co, _, kh, kw = w_shape
    b = g.shape[0]
    cols = patches(x, kh, kw, stride, padding)
    return np.tensordot(g.reshape(b, co, -1), cols, axes=([0, 2], [0, 2])).reshape(w_shape)


def avgpool2x2(x: np.ndarray) -> np.ndarray:
    b, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    if h % 2 or w % 2:
        x = np.ascontiguousarray(x[:, :, :2 * h2, :2 * w2])
    r = x.reshape(b, c, h2, 2, w2, 2)
    out = r[:, :, :, 0, :, 0] + r[:, :, :, 0, :, 1]
    out += r[:, :, :, 1, :, 0]
    out += r[:, :, :, 1, :, 1]
    out *= 0.25
    return out


def avgpool2x2_adjoint(g: np.ndarray, x_shape: tuple) -> np.ndarray:
    b, c, h, w = x_shape
    out = np.zeros(x_shape, dtype=g.dtype)
    q = g * 0.25
    h2, w2 = g.shape[2], g.shape[3]
    for i in (0, 1):
        for j in (0, 1):
            out[:, :, i:2 * h2:2, j:2 * w2:2] = q
    return out


def bilinear_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Align-corners 1-D interpolation matrix of shape [n_out, n_in]."""
    m = np.zeros((n_out, n_in))
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    if n_out == 1:
        m[0, 0] = 1.0
        return m
    pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.minimum(np.floor(pos).astype(int), n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    rows = np.arange(n_out)
    m[rows, lo] += 1.0 - frac
    m[rows, hi] += frac
    return m


def separable_apply(x: np.ndarray, mh: np.ndarray, mw: np.ndarray) -> np.ndarray:
    """y[..., i, j] = sum_{a,b} mh[i, a] x[..., a, b] mw[j, b]."""
    mh = mh.astype(x.dtype, copy=False)
    mw = mw.astype(x.dtype, copy=False)
    return np.ascontiguousarray(np.matmul(np.matmul(mh, x), mw.T))


def logsumexp(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    return (m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))).squeeze(axis)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


def sum_to_shape(x: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast result back to ``shape``."""
    if x.shape == tuple(shape):
        return x
    lead = x.ndim - len(shape)
    if lead:
        x = x.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and x.shape[i] != 1)
    if axes:
        x = x.sum(axis=axes, keepdims=True)
    return x
