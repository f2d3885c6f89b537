"""Tensor values and the forward kernels every other module builds on.

Tensors are plain float64 numpy arrays in row-major order, shape conventions:
``[channels, height, width]`` for images, ``[out, in]`` for dense weights and
``[out_ch, in_ch, kh, kw]`` for convolution kernels.  ``as_tensor`` is the
validating constructor used at every load/deserialization boundary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, GeometryError, InvalidValueError

Tensor = np.ndarray


def as_tensor(data, shape=None) -> Tensor:
    """Build a float64 tensor, checking extents, element count and finiteness."""
    arr = np.asarray(data, dtype=np.float64)
    if shape is not None:
        shape = tuple(int(e) for e in shape)
        if len(shape) == 0 or any(e < 1 for e in shape):
            raise InvalidValueError(f"tensor extents must all be >= 1, got {shape}")
        flat = arr.reshape(-1)
        expected = int(np.prod(shape))
        if flat.size != expected:
            raise DimensionError(
                f"shape {list(shape)} requires {expected} values, got {flat.size}"
            )
        arr = flat.reshape(shape)
    else:
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if any(e < 1 for e in arr.shape):
            raise InvalidValueError(f"tensor extents must all be >= 1, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidValueError("tensor contains non-finite values")
    return arr


@dataclass(frozen=True)
class BnParams:
    """Inference-time normalization parameters.

    One entry per channel for the usual case; a per-element vector (one entry
    per flattened input value) is also accepted, which is how spatially
    varying normalizations are expressed after lowering.  ``running_std``
    stores the standard deviation with any training-time epsilon already
    folded in, so the forward map is exactly ``gamma*(x-mean)/std + beta``.
    """

    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_std: Tensor

    def __post_init__(self):
        for name in ("gamma", "beta", "running_mean", "running_std"):
            arr = as_tensor(getattr(self, name))
            if arr.ndim != 1:
                raise DimensionError(f"BnParams.{name} must be rank 1, got rank {arr.ndim}")
            object.__setattr__(self, name, arr)
        n = self.gamma.shape[0]
        for name in ("beta", "running_mean", "running_std"):
            if getattr(self, name).shape[0] != n:
                raise DimensionError(
                    f"BnParams vectors must have equal length, gamma has {n}, "
                    f"{name} has {getattr(self, name).shape[0]}"
                )
        if np.any(self.running_std <= 0.0):
            raise InvalidValueError("BnParams.running_std must be strictly positive")

    def __len__(self) -> int:
        return self.gamma.shape[0]

    def scale(self) -> Tensor:
        """Multiplicative part of the affine map: gamma / std."""
        return self.gamma / self.running_std

    def shift(self) -> Tensor:
        """Additive part of the affine map: beta - gamma*mean/std."""
        return self.beta - (self.gamma * self.running_mean) / self.running_std


def conv_output_extent(extent: int, window: int, stride: int, padding: int = 0) -> int:
    """Output extent of a sliding window; only exact divisions are accepted."""
    span = extent + 2 * padding - window
    if span < 0:
        raise GeometryError(
            f"window {window} does not fit extent {extent} with padding {padding}"
        )
    if span % stride != 0:
        raise GeometryError(
            f"extent {extent} with window {window}, stride {stride}, padding {padding} "
            f"leaves a remainder of {span % stride}; only exact geometries are accepted"
        )
    return span // stride + 1


def dense_forward(weights: Tensor, bias: Tensor, x: Tensor) -> Tensor:
    """out[j] = sum_i weights[j,i]*x[i] + bias[j]."""
    w = np.asarray(weights, dtype=np.float64)
    b = np.asarray(bias, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if w.ndim != 2 or x.ndim != 1 or w.shape[1] != x.shape[0]:
        raise DimensionError(
            f"dense weights {list(w.shape)} cannot be applied to input {list(x.shape)}"
        )
    if b.ndim != 1 or b.shape[0] != w.shape[0]:
        raise DimensionError(
            f"dense bias {list(b.shape)} does not match weight rows {w.shape[0]}"
        )
    return w @ x + b


def conv2d_forward(
    kernel: Tensor, bias: Tensor, x: Tensor, stride: int = 1, padding: int = 0
) -> Tensor:
    """Cross-correlation (no kernel flip) with zero padding and per-channel bias."""
    k = np.asarray(kernel, dtype=np.float64)
    b = np.asarray(bias, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if k.ndim != 4 or x.ndim != 3:
        raise DimensionError(
            f"conv needs a rank-4 kernel and rank-3 input, got {list(k.shape)} and {list(x.shape)}"
        )
    oc, ic, kh, kw = k.shape
    if x.shape[0] != ic:
        raise DimensionError(
            f"kernel expects {ic} input channels, input has {x.shape[0]}"
        )
    if b.ndim != 1 or b.shape[0] != oc:
        raise DimensionError(f"conv bias {list(b.shape)} does not match {oc} output channels")
    oh = conv_output_extent(x.shape[1], kh, stride, padding)
    ow = conv_output_extent(x.shape[2], kw, stride, padding)
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    out = np.einsum("oikl,ihwkl->ohw", k, win, optimize=True)
    return out + b[:, None, None]


def batchnorm_forward(params: BnParams, x: Tensor) -> Tensor:
    """gamma*(x - mean)/std + beta, per channel (or per element for long vectors)."""
    x = np.asarray(x, dtype=np.float64)
    n = len(params)
    if x.ndim == 1:
        if x.shape[0] != n:
            raise DimensionError(
                f"batchnorm over {n} channels cannot normalize vector of length {x.shape[0]}"
            )
        g, b, m, s = params.gamma, params.beta, params.running_mean, params.running_std
    elif x.ndim == 3:
        if n == x.shape[0]:
            rs = (x.shape[0], 1, 1)
        elif n == x.size:
            rs = x.shape
        else:
            raise DimensionError(
                f"batchnorm over {n} channels cannot normalize input of shape {list(x.shape)}"
            )
        g = params.gamma.reshape(rs)
        b = params.beta.reshape(rs)
        m = params.running_mean.reshape(rs)
        s = params.running_std.reshape(rs)
    else:
        raise DimensionError(f"batchnorm expects rank 1 or 3 input, got rank {x.ndim}")
    return g * (x - m) / s + b


def relu(x: Tensor) -> Tensor:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def maxpool(x: Tensor, window, stride: int):
    """Window maximum over each channel.

    Returns ``(out, argmax)`` where ``argmax[c, oh, ow]`` is the flat spatial
    index (row*width + col) of the winning input cell, consumed by the
    relevance engine's winner-take-all rule.  Ties resolve to the first cell
    in row-major window order, deterministically.
    """
    x = np.asarray(x, dtype=np.float64)
    th, tw = _window_pair(window)
    if x.ndim != 3:
        raise DimensionError(f"pooling expects rank-3 input, got rank {x.ndim}")
    c, h, w = x.shape
    oh = conv_output_extent(h, th, stride)
    ow = conv_output_extent(w, tw, stride)
    win = sliding_window_view(x, (th, tw), axis=(1, 2))[:, ::stride, ::stride]
    flat = win.reshape(c, oh, ow, th * tw)
    k = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, k[..., None], axis=-1)[..., 0]
    dy, dx = k // tw, k % tw
    rows = np.arange(oh).reshape(1, -1, 1) * stride + dy
    cols = np.arange(ow).reshape(1, 1, -1) * stride + dx
    return out, rows * w + cols


def avgpool(x: Tensor, window, stride: int) -> Tensor:
    """Window mean over each channel."""
    x = np.asarray(x, dtype=np.float64)
    th, tw = _window_pair(window)
    if x.ndim != 3:
        raise DimensionError(f"pooling expects rank-3 input, got rank {x.ndim}")
    conv_output_extent(x.shape[1], th, stride)
    conv_output_extent(x.shape[2], tw, stride)
    win = sliding_window_view(x, (th, tw), axis=(1, 2))[:, ::stride, ::stride]
    return win.mean(axis=(-2, -1))


def flatten(x: Tensor) -> Tensor:
    """Row-major (channel-major) flattening."""
    return np.asarray(x, dtype=np.float64).reshape(-1)


def _window_pair(window):
    if isinstance(window, (int, np.integer)):
        pair = (int(window), int(window))
    else:
        pair = tuple(int(e) for e in window)
    if len(pair) != 2 or any(e < 1 for e in pair):
        raise InvalidValueError(f"pool window must be a pair of extents >= 1, got {window}")
    return pair
