"""Dense NHWC tensor kernels.

Tensors are plain ``numpy.ndarray`` values. Training runs in float32; every
kernel is dtype-preserving so the same code runs in float64 for gradient
checking. Convolution is cross-correlation (no kernel flip) implemented
with an im2col gather followed by a single matmul.
"""
from __future__ import annotations

import numpy as np

from .errors import NumericError, ShapeError

FLOAT = np.float32


def make_rng(seed) -> np.random.Generator:
    """Seeded generator; PCG64 streams are stable across platforms."""
    return np.random.Generator(np.random.PCG64(seed))


def as_tensor(x, dtype=FLOAT) -> np.ndarray:
    arr = np.ascontiguousarray(x, dtype=dtype)
    if arr.ndim == 0 or 0 in arr.shape:
        raise ShapeError(f"tensor dimensions must be >= 1, got shape {arr.shape}")
    return arr


def ensure_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.isfinite(x).all():
        raise NumericError(f"non-finite values in {what}")
    return x


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return ensure_finite(a @ b, "matmul output")


def _pad_hw(x, padding, value=0.0):
    if padding == 0:
        return x
    p = padding
    return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)), constant_values=value)


def _window_slices(kh, kw, stride, out_h, out_w):
    for i in range(kh):
        for j in range(kw):
            yield i, j, (slice(None), slice(i, i + stride * (out_h - 1) + 1, stride),
                         slice(j, j + stride * (out_w - 1) + 1, stride))


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    """Gather patches into an ``(N*H'*W', kh*kw*C)`` matrix.

    Column order is (kernel row, kernel col, channel), matching a kernel
    tensor of layout ``K x kh x kw x C`` flattened per filter.
    """
    n, h, w, c = x.shape
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(
            f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    out_h = conv_output_size(h, kh, stride, padding)
    out_w = conv_output_size(w, kw, stride, padding)
    xp = _pad_hw(x, padding)
    cols = np.empty((n, out_h, out_w, kh, kw, c), dtype=x.dtype)
    for i, j, sl in _window_slices(kh, kw, stride, out_h, out_w):
        cols[:, :, :, i, j, :] = xp[sl]
    return cols.reshape(n * out_h * out_w, kh * kw * c), (out_h, out_w)


def col2im(dcols: np.ndarray, x_shape, kh: int, kw: int, stride: int, padding: int):
    n, h, w, c = x_shape
    out_h = conv_output_size(h, kh, stride, padding)
    out_w = conv_output_size(w, kw, stride, padding)
    dcols = dcols.reshape(n, out_h, out_w, kh, kw, c)
    dxp = np.zeros((n, h + 2 * padding, w + 2 * padding, c), dtype=dcols.dtype)
    for i, j, sl in _window_slices(kh, kw, stride, out_h, out_w):
        dxp[sl] += dcols[:, :, :, i, j, :]
    if padding:
        dxp = dxp[:, padding:-padding, padding:-padding, :]
    return np.ascontiguousarray(dxp)


def _check_conv_args(x, kernels, stride):
    if x.ndim != 4 or kernels.ndim != 4:
        raise ShapeError(f"conv2d expects NHWC input and KxkhxkwxC kernels, "
                         f"got {x.shape} and {kernels.shape}")
    if kernels.shape[3] != x.shape[3]:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, kernels {kernels.shape}")
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")


def conv2d(x, kernels, bias=None, stride=1, padding=0, return_cols=False):
    """Cross-correlate an ``N x H x W x C`` batch with ``K x kh x kw x C`` kernels."""
    _check_conv_args(x, kernels, stride)
    k, kh, kw, _ = kernels.shape
    cols, (out_h, out_w) = im2col(x, kh, kw, stride, padding)
    out = cols @ kernels.reshape(k, -1).T
    if bias is not None:
        out += bias
    out = ensure_finite(out.reshape(x.shape[0], out_h, out_w, k), "conv2d output")
    if return_cols:
        return out, cols
    return out


def conv2d_backward(dout, x_shape, cols, kernels, stride, padding, need_dx=True):
    """Gradients of :func:`conv2d` w.r.t. input, kernels and bias."""
    k, kh, kw, c = kernels.shape
    dflat = dout.reshape(-1, k)
    dkernels = (dflat.T @ cols).reshape(kernels.shape)
    dbias = dflat.sum(axis=0)
    dx = None
    if need_dx:
        dcols = dflat @ kernels.reshape(k, -1)
        dx = col2im(dcols, x_shape, kh, kw, stride, padding)
    return dx, dkernels, dbias


def maxpool2d(x, pool: int, stride: int | None = None, padding: int = 0):
    """Max over ``pool x pool`` windows.

    Returns the pooled tensor and the argmax map: for every output cell the
    row-major offset of the winner inside its window. Ties go to the first
    offset. Padding is filled with ``-inf`` so it never wins.
    """
    stride = pool if stride is None else stride
    n, h, w, c = x.shape
    if pool > h + 2 * padding or pool > w + 2 * padding:
        raise ShapeError(f"pool {pool} exceeds input {h}x{w} (padding {padding})")
    if padding >= pool:
        raise ShapeError(f"pool padding {padding} must be smaller than pool {pool}")
    out_h = conv_output_size(h, pool, stride, padding)
    out_w = conv_output_size(w, pool, stride, padding)
    xp = _pad_hw(x, padding, value=-np.inf)
    windows = np.empty((pool * pool, n, out_h, out_w, c), dtype=x.dtype)
    for i, j, sl in _window_slices(pool, pool, stride, out_h, out_w):
        windows[i * pool + j] = xp[sl]
    argmax = windows.argmax(axis=0)
    out = np.take_along_axis(windows, argmax[None], axis=0)[0]
    return out, argmax.astype(np.int32)


def maxpool2d_gather(x, argmax, pool, stride=None, padding=0):
    """Max-pool with the winners fixed by a previously recorded argmax map."""
    stride = pool if stride is None else stride
    out_h, out_w = argmax.shape[1:3]
    xp = _pad_hw(x, padding, value=-np.inf)
    out = np.zeros(argmax.shape, dtype=x.dtype)
    for i, j, sl in _window_slices(pool, pool, stride, out_h, out_w):
        hit = argmax == i * pool + j
        out[hit] = xp[sl][hit]
    return out


def maxpool2d_backward(dout, argmax, x_shape, pool, stride=None, padding=0):
    stride = pool if stride is None else stride
    n, h, w, c = x_shape
    out_h, out_w = argmax.shape[1:3]
    dxp = np.zeros((n, h + 2 * padding, w + 2 * padding, c), dtype=dout.dtype)
    for i, j, sl in _window_slices(pool, pool, stride, out_h, out_w):
        dxp[sl] += np.where(argmax == i * pool + j, dout, 0)
    if padding:
        dxp = dxp[:, padding:-padding, padding:-padding, :]
    return np.ascontiguousarray(dxp)


def softmax(logits: np.ndarray) -> np.ndarray:
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise ShapeError(f"softmax expects N x K logits with K >= 2, got {logits.shape}")
    ensure_finite(logits, "softmax input")
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(dprobs, probs):
    dot = (dprobs * probs).sum(axis=1, keepdims=True)
    return probs * (dprobs - dot)


def concat_channels(inputs) -> np.ndarray:
    inputs = list(inputs)
    if not inputs:
        raise ShapeError("concat_channels needs at least one input")
    ref = inputs[0].shape[:-1]
    for t in inputs[1:]:
        if t.shape[:-1] != ref:
            raise ShapeError(f"concat spatial mismatch: {ref} vs {t.shape[:-1]}")
    if len(inputs) == 1:
        return inputs[0]
    return np.concatenate(inputs, axis=-1)


def split_channels(grad: np.ndarray, sizes) -> list[np.ndarray]:
    offsets = np.cumsum(sizes)[:-1]
    return [np.ascontiguousarray(g) for g in np.split(grad, offsets, axis=-1)]
