"""Differentiable operations on NCHW tensors.

Convolutions use cross-correlation (no kernel flip) and are computed through
an im2col matrix product.  Every op returns a new :class:`Tensor` and, when a
tape is active, records a closure computing input gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError
from .tensor import Tensor, as_tensor, make_output


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _require_4d(x: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{what} expects a 4-D [n,c,h,w] tensor, got shape {x.shape}")


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


@dataclass
class ConvSpec:
    """Kernel ``(out_ch, in_ch, kh, kw)`` plus stride, zero padding and optional bias."""

    weight: Tensor
    bias: Optional[Tensor] = None
    stride: int = 1
    padding: int = 0

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.weight.shape[2:]
        return (conv_output_size(h, kh, self.stride, self.padding),
                conv_output_size(w, kw, self.stride, self.padding))


# ---------------------------------------------------------------- elementwise

def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return make_output(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return make_output(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad * bd
    return make_output(out, (a, b), lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)))


def sum_all(x: Tensor) -> Tensor:
    shape, dtype = x.shape, x.dtype
    out = np.asarray(x.data.sum(), dtype=dtype)
    return make_output(out, (x,), lambda g: (np.broadcast_to(g, shape).astype(dtype),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum(sizes)[:-1]
    return make_output(out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)))


def split(x: Tensor, sections: int, axis: int = 1) -> list[Tensor]:
    """Split into ``sections`` equal chunks; each chunk is its own tape entry."""
    if x.shape[axis] % sections:
        raise ShapeError(f"cannot split axis of size {x.shape[axis]} into {sections} parts")
    step = x.shape[axis] // sections
    parts = []
    for k in range(sections):
        index = [slice(None)] * x.ndim
        index[axis] = slice(k * step, (k + 1) * step)
        index = tuple(index)

        def back(g, index=index):
            full = np.zeros_like(x.data)
            full[index] = g
            return (full,)

        parts.append(make_output(x.data[index], (x,), back))
    return parts


# ---------------------------------------------------------------- activations

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_output(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    y = (0.5 * (1.0 + np.tanh(0.5 * x.data))).astype(x.dtype)
    return make_output(y, (x,), lambda g: (g * y * (1 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return make_output(y, (x,), lambda g: (g * (1 - y * y),))


ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        return ACTIVATIONS[kind](x)
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(ACTIVATIONS)}") from None


# ---------------------------------------------------------------- convolution

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Patches of a padded NCHW array as a ``(n*oh*ow, c*kh*kw)`` matrix."""
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)


def _col2im(cols: np.ndarray, padded_shape: tuple, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Scatter-add the inverse of :func:`_im2col` (fixed kernel-offset order)."""
    n, c = padded_shape[:2]
    cols = np.ascontiguousarray(cols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2))
    out = np.zeros(padded_shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * (oh - 1) + 1 : stride, j : j + stride * (ow - 1) + 1 : stride] += cols[:, :, i, j]
    return out


def _pad(x: np.ndarray, p: int, pw: int = None) -> np.ndarray:
    pw = p if pw is None else pw
    if p == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (pw, pw)))


def _full_correlation(g: np.ndarray, weight: np.ndarray, padding: int) -> np.ndarray:
    """Input gradient of a stride-1 conv: correlate ``g`` with the flipped, transposed kernel."""
    n, co, oh, ow = g.shape
    _, ci, kh, kw = weight.shape
    gp = _pad(g, kh - 1 - padding, kw - 1 - padding)
    h, w = gp.shape[2] - kh + 1, gp.shape[3] - kw + 1
    wflip = weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(ci, -1)
    out = _im2col(gp, kh, kw, 1, h, w) @ wflip.T
    return np.ascontiguousarray(out.reshape(n, h, w, ci).transpose(0, 3, 1, 2))


def _check_conv_args(x: Tensor, weight: Tensor, bias: Optional[Tensor], stride: int, padding: int, in_axis: int) -> None:
    _require_4d(x, "convolution")
    if weight.ndim != 4:
        raise ShapeError(f"kernel must be 4-D, got shape {weight.shape}")
    if weight.shape[in_axis] != x.shape[1]:
        raise ShapeError(
            f"kernel {weight.shape} expects {weight.shape[in_axis]} input channels, input has {x.shape[1]}"
        )
    if stride < 1 or padding < 0:
        raise ShapeError(f"stride must be >= 1 and padding >= 0, got stride={stride} padding={padding}")
    out_ch = weight.shape[1 - in_axis]
    if bias is not None and bias.shape != (out_ch,):
        raise ShapeError(f"bias shape {bias.shape} does not match {out_ch} output channels")
    if not x.is_finite():
        raise FloatingPointError("convolution input contains NaN or Inf")


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Zero-padded 2-D cross-correlation.

    ``weight`` has shape ``(out_ch, in_ch, kh, kw)``.
    """
    _check_conv_args(x, weight, bias, stride, padding, in_axis=1)
    n, _, h, w = x.shape
    co, ci, kh, kw = weight.shape
    oh, ow = conv_output_size(h, kh, stride, padding), conv_output_size(w, kw, stride, padding)
    if oh < 1 or ow < 1:
        raise ShapeError(f"kernel {kh}x{kw} with padding {padding} does not fit input {h}x{w}")

    xp = _pad(x.data, padding)
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    wmat = weight.data.reshape(co, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, oh, ow, co).transpose(0, 3, 1, 2))

    def back(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, co)
        gw = (gm.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = gm.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            if stride == 1 and padding <= min(kh, kw) - 1:
                gx = _full_correlation(g, weight.data, padding)
            else:
                dxp = _col2im(gm @ wmat, xp.shape, kh, kw, stride, oh, ow)
                gx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
        return gx, gw, gb

    return make_output(out, (x, weight, bias), back)


def conv_transpose_raw(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution: the adjoint of :func:`conv2d` with the same kernel.

    ``weight`` has the forward-convolution layout ``(in_ch_of_x, out_ch, kh, kw)``
    so that ``<conv2d(u, K), v> == <u, conv_transpose_raw(v, K)>``.  Output
    size is ``(h - 1) * stride - 2 * padding + kh``.
    """
    _check_conv_args(x, weight, bias, stride, padding, in_axis=0)
    n, ci, h, w = x.shape
    _, co, kh, kw = weight.shape
    full_h, full_w = (h - 1) * stride + kh, (w - 1) * stride + kw
    oh, ow = full_h - 2 * padding, full_w - 2 * padding
    if oh < 1 or ow < 1:
        raise ShapeError(f"transposed convolution output would be {oh}x{ow}")

    xm = x.data.transpose(0, 2, 3, 1).reshape(-1, ci)
    wmat = weight.data.reshape(ci, -1)
    full = _col2im(xm @ wmat, (n, co, full_h, full_w), kh, kw, stride, h, w)
    out = full[:, :, padding : padding + oh, padding : padding + ow]
    if bias is not None:
        out = out + bias.data.reshape(1, co, 1, 1)
    out = np.ascontiguousarray(out)

    def back(g):
        gcols = _im2col(_pad(g, padding), kh, kw, stride, h, w)
        gx = (gcols @ wmat.T).reshape(n, h, w, ci).transpose(0, 3, 1, 2) if x.requires_grad else None
        gw = (xm.T @ gcols).reshape(weight.shape) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    return make_output(out, (x, weight, bias), back)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 2, padding: int = 0) -> Tensor:
    """Learnable 2x upsampling; rejects configurations that do not exactly double h and w."""
    kh, kw = weight.shape[2:] if weight.ndim == 4 else (0, 0)
    if stride != 2 or kh - 2 * padding != 2 or kw - 2 * padding != 2:
        raise ShapeError(
            f"transposed convolution with kernel {kh}x{kw}, stride {stride}, padding {padding} "
            "does not double spatial dims (need stride 2 and kernel - 2*padding == 2)"
        )
    return conv_transpose_raw(x, weight, bias, stride, padding)


# ---------------------------------------------------------------- resampling

@lru_cache(maxsize=64)
def _upsample_matrix(size: int, dtype_str: str) -> np.ndarray:
    """Interpolation matrix (2*size, size) for half-pixel centred 2x bilinear upsampling."""
    mat = np.zeros((2 * size, size), dtype=dtype_str)
    for d in range(2 * size):
        src = min(max((d + 0.5) / 2.0 - 0.5, 0.0), size - 1.0)
        lo = int(np.floor(src))
        hi = min(lo + 1, size - 1)
        frac = src - lo
        mat[d, lo] += 1.0 - frac
        mat[d, hi] += frac
    mat.setflags(write=False)
    return mat


def bilinear_upsample2x(x: Tensor) -> Tensor:
    """Separable bilinear 2x upsampling with edge clamping."""
    _require_4d(x, "bilinear_upsample2x")
    _, _, h, w = x.shape
    if h < 1 or w < 1:
        raise ShapeError(f"cannot upsample empty spatial dims {h}x{w}")
    uh = _upsample_matrix(h, x.dtype.str)
    uw = _upsample_matrix(w, x.dtype.str)
    out = uh @ (x.data @ uw.T)
    return make_output(out, (x,), lambda g: ((uh.T @ g) @ uw,))


def maxpool2d(x: Tensor, size: int = 2, stride: int = 2) -> Tensor:
    """Non-overlapping max pooling.

    The gradient goes to the first maximum of each window in row-major order.
    """
    _require_4d(x, "maxpool2d")
    if size != stride:
        raise ShapeError("only non-overlapping pooling (size == stride) is supported")
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ShapeError(f"maxpool2d needs spatial dims divisible by {size}, got {h}x{w}")
    oh, ow = h // size, w // size
    win = x.data.reshape(n, c, oh, size, ow, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, size * size)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gw = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gx = gw.reshape(n, c, oh, ow, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return make_output(out, (x,), back)


# ---------------------------------------------------------------- normalization

@dataclass
class BatchNormState:
    """Running statistics owned by one batch-norm layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, channels: int, dtype=np.float32) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Per-channel batch normalization.

    Training mode normalizes with the biased batch variance and folds the
    unbiased variance into the running estimate with ``state.momentum``.
    Evaluation mode uses the running estimates.
    """
    _require_4d(x, "batchnorm2d")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm affine params must have shape ({c},), got {gamma.shape}, {beta.shape}")
    eps = state.eps
    shape = (1, c, 1, 1)
    xd = x.data

    if training:
        m = n * h * w
        if m < 2:
            raise ShapeError("batchnorm2d in training mode needs at least 2 values per channel")
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        mom = state.momentum
        state.running_mean = ((1 - mom) * state.running_mean + mom * mean).astype(state.running_mean.dtype)
        state.running_var = ((1 - mom) * state.running_var + mom * var * m / (m - 1)).astype(state.running_var.dtype)
    else:
        mean, var = state.running_mean.astype(xd.dtype), state.running_var.astype(xd.dtype)

    inv_std = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mean.reshape(shape)) * inv_std.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)
    gam = gamma.data

    def back(g):
        gbeta = g.sum(axis=(0, 2, 3))
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        if not x.requires_grad:
            return None, ggamma, gbeta
        dxhat = g * gam.reshape(shape)
        if training:
            mcount = n * h * w
            gx = (inv_std.reshape(shape) / mcount) * (
                mcount * dxhat
                - dxhat.sum(axis=(0, 2, 3)).reshape(shape)
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(shape)
            )
        else:
            gx = dxhat * inv_std.reshape(shape)
        return gx, ggamma, gbeta

    return make_output(out, (x, gamma, beta), back)


# ---------------------------------------------------------------- loss

def softmax_cross_entropy(logits: Tensor, labels: np.ndarray, reduction: str = "mean") -> Tensor:
    """Per-pixel softmax cross-entropy against integer labels.

    ``reduction="mean"`` averages over all pixels in the batch; ``"sum"`` adds them.
    """
    _require_4d(logits, "softmax_cross_entropy")
    n, c, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"reduction must be 'mean' or 'sum', got {reduction!r}")

    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    expz = np.exp(shifted)
    denom = expz.sum(axis=1, keepdims=True)
    lab = labels.astype(np.intp)[:, None]
    true_shifted = np.take_along_axis(shifted, lab, axis=1)
    per_pixel = np.log(denom) - true_shifted
    scale = 1.0 / (n * h * w) if reduction == "mean" else 1.0
    loss = np.asarray(per_pixel.sum() * scale, dtype=z.dtype)

    def back(g):
        probs = expz / denom
        np.put_along_axis(probs, lab, np.take_along_axis(probs, lab, axis=1) - 1.0, axis=1)
        return (probs * (scale * g),)

    return make_output(loss, (logits,), back)
