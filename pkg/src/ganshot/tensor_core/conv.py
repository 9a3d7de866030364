"""Spatial ops on NCHW tensors: convolution, transposed convolution, pooling, batchnorm.

Convolutions use a patch-matrix path: patches are gathered channel-major into a
(C*kh*kw, N*OH*OW) matrix, one kernel tap at a time, so every copy and every
GEMM runs over long contiguous rows. A direct path that accumulates one tap at
a time is kept alongside as the explicit loop kernel; both produce the same
numbers to float32 rounding.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import DimensionError, Tensor, make_node


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def deconv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size - 1) * stride - 2 * pad + kernel


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Read-only view of shape (N, C, OH, OW, kh, kw) over a padded input."""
    n, c, hp, wp = xp.shape
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    s0, s1, s2, s3 = xp.strides
    return as_strided(
        xp,
        shape=(n, c, oh, ow, kh, kw),
        strides=(s0, s1, s2 * stride, s3 * stride, s2, s3),
        writeable=False,
    )


def _scatter_taps(cols: np.ndarray, out_shape, stride: int) -> np.ndarray:
    """Sum a (N, OH, OW, C, kh, kw) patch array back onto a padded (N, C, Hp, Wp) canvas."""
    n, oh, ow, c, kh, kw = cols.shape
    canvas = np.zeros(out_shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            canvas[:, :, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride] += (
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    return canvas


def _crop(xp: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return xp
    return xp[:, :, pad:-pad, pad:-pad]


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> tuple[np.ndarray, int, int]:
    """(N, C, H, W) -> patch matrix (C*kh*kw, N*OH*OW), plus OH and OW."""
    n, c, h, w = x.shape
    xt = _pad(x.transpose(1, 0, 2, 3), pad)
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    cols = np.empty((c, kh, kw, n, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride]
    return cols.reshape(c * kh * kw, n * oh * ow), oh, ow


def _col2im(cols: np.ndarray, shape, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: sum a patch matrix back into an (N, C, H, W) array."""
    n, c, h, w = shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    cols = cols.reshape(c, kh, kw, n, oh, ow)
    canvas = np.zeros((c, n, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            canvas[:, :, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride] += cols[:, i, j]
    return np.ascontiguousarray(_crop(canvas, pad).transpose(1, 0, 2, 3))


def _channel_major(a: np.ndarray) -> np.ndarray:
    """(N, C, H, W) -> (C, N*H*W)."""
    return np.ascontiguousarray(a.transpose(1, 0, 2, 3)).reshape(a.shape[1], -1)


def _from_channel_major(a: np.ndarray, n: int, h: int, w: int) -> np.ndarray:
    return np.ascontiguousarray(a.reshape(-1, n, h, w).transpose(1, 0, 2, 3))


def _conv_forward_patches(x, w, stride, pad):
    cols, oh, ow = _im2col(x, w.shape[2], w.shape[3], stride, pad)
    return _from_channel_major(w.reshape(w.shape[0], -1) @ cols, x.shape[0], oh, ow), cols


def _conv_forward_direct(x, w, stride, pad):
    xp = _pad(x, pad)
    o, _, kh, kw = w.shape
    oh = (xp.shape[2] - kh) // stride + 1
    ow = (xp.shape[3] - kw) // stride + 1
    out = np.zeros((x.shape[0], oh, ow, o), dtype=np.result_type(x, w))
    for i in range(kh):
        for j in range(kw):
            tap = xp[:, :, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride]
            out += np.tensordot(tap, w[:, :, i, j], axes=([1], [1]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _check_conv(x: Tensor, kernel: Tensor, stride: int, pad: int):
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    if x.shape[1] != kernel.shape[1]:
        raise DimensionError(
            f"conv2d: input shape {x.shape} has {x.shape[1]} channels but kernel shape "
            f"{kernel.shape} expects {kernel.shape[1]}"
        )
    if stride < 1:
        raise DimensionError(f"conv2d: stride must be >= 1, got {stride}")
    if x.shape[2] + 2 * pad < kernel.shape[2] or x.shape[3] + 2 * pad < kernel.shape[3]:
        raise DimensionError(f"conv2d: kernel {kernel.shape} larger than padded input {x.shape}")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0,
           method: str = "patches") -> Tensor:
    """2-d cross-correlation, NCHW input, OCKhKw kernel."""
    _check_conv(x, kernel, stride, pad)
    cols = None
    if method == "patches":
        out, cols = _conv_forward_patches(x.data, kernel.data, stride, pad)
    elif method == "direct":
        out = _conv_forward_direct(x.data, kernel.data, stride, pad)
    else:
        raise ValueError(f"unknown conv method {method!r}")
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    kh, kw = kernel.shape[2:]
    wmat = kernel.data.reshape(kernel.shape[0], -1)

    def back(g):
        nonlocal cols
        gx = gk = gb = None
        gt = _channel_major(g)
        if x.requires_grad:
            gx = _col2im(wmat.T @ gt, x.shape, kh, kw, stride, pad)
        if kernel.requires_grad:
            if cols is None:
                cols = _im2col(x.data, kh, kw, stride, pad)[0]
            gk = (gt @ cols.T).reshape(kernel.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return make_node(out, parents, back)


def conv_transpose2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1,
                     pad: int = 0) -> Tensor:
    """Transposed convolution; ``kernel`` is laid out (C_in, C_out, kh, kw).

    The forward pass is exactly the input-gradient pass of :func:`conv2d` with
    the same kernel and geometry.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv_transpose2d expects 4-d tensors, got {x.shape} and {kernel.shape}")
    if x.shape[1] != kernel.shape[0]:
        raise DimensionError(
            f"conv_transpose2d: input shape {x.shape} has {x.shape[1]} channels but kernel "
            f"shape {kernel.shape} expects {kernel.shape[0]}"
        )
    if stride < 1:
        raise DimensionError(f"conv_transpose2d: stride must be >= 1, got {stride}")
    n, _, h, w = x.shape
    kh, kw = kernel.shape[2:]
    oh, ow = deconv_output_size(h, kh, stride, pad), deconv_output_size(w, kw, stride, pad)
    if oh <= 0 or ow <= 0:
        raise DimensionError(f"conv_transpose2d: non-positive output size {oh}x{ow}")
    kmat = kernel.data.reshape(kernel.shape[0], -1)  # C_in, C_out*kh*kw
    xt = _channel_major(x.data)
    out = _col2im(kmat.T @ xt, (n, kernel.shape[1], oh, ow), kh, kw, stride, pad)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)

    def back(g):
        gx = gk = gb = None
        gcols = _im2col(g, kh, kw, stride, pad)[0]  # C_out*kh*kw, N*H*W
        if x.requires_grad:
            gx = _from_channel_major(kmat @ gcols, n, h, w)
        if kernel.requires_grad:
            gk = (xt @ gcols.T).reshape(kernel.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return make_node(out, parents, back)


def maxpool2d(x: Tensor, kernel: int, stride: int | None = None) -> Tensor:
    """Max over kernel x kernel windows. Ties route the gradient to the first maximum."""
    stride = kernel if stride is None else stride
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d expects NCHW input, got {x.shape}")
    if x.shape[2] < kernel or x.shape[3] < kernel:
        raise DimensionError(f"maxpool2d: kernel {kernel} larger than input {x.shape}")
    win = _windows(x.data, kernel, kernel, stride)
    n, c, oh, ow = win.shape[:4]
    flat = win.reshape(n, c, oh, ow, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def back(g):
        onehot = np.zeros((n, c, oh, ow, kernel * kernel), dtype=g.dtype)
        np.put_along_axis(onehot, arg[..., None], g[..., None], axis=-1)
        cols = onehot.reshape(n, c, oh, ow, kernel, kernel).transpose(0, 2, 3, 1, 4, 5)
        return (_scatter_taps(cols, x.shape, stride),)

    return make_node(np.ascontiguousarray(out), (x,), back)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)

    def back(g):
        n, c, h, w = x.shape
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return make_node(out, (x,), back)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                running_var: np.ndarray, training: bool, momentum: float = 0.1,
                eps: float = 1e-5) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Per-channel batch normalization.

    Returns the output and the (possibly updated) running statistics; the
    caller decides whether to keep them. Inputs are never modified.
    """
    if x.ndim != 4 or x.shape[1] != gamma.size:
        raise DimensionError(f"batchnorm2d: input {x.shape} vs {gamma.size} channels")
    axes = (0, 2, 3)
    shape = (1, -1, 1, 1)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        count = x.size // x.shape[1]
        unbiased = var * count / max(count - 1, 1)
        new_mean = ((1 - momentum) * running_mean + momentum * mu).astype(running_mean.dtype)
        new_var = ((1 - momentum) * running_var + momentum * unbiased).astype(running_var.dtype)
    else:
        mu, var = running_mean.astype(x.dtype), running_var.astype(x.dtype)
        new_mean, new_var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(shape)) * inv_std.reshape(shape)
    out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)

    def back(g):
        gg = gb = gx = None
        if gamma.requires_grad:
            gg = (g * xhat).sum(axis=axes)
        if beta.requires_grad:
            gb = g.sum(axis=axes)
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(shape)
            if training:
                m = x.size // x.shape[1]
                gx = (inv_std.reshape(shape) / m) * (
                    m * dxhat
                    - dxhat.sum(axis=axes, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
                )
            else:
                gx = dxhat * inv_std.reshape(shape)
        return gx, gg, gb

    return make_node(out, (x, gamma, beta), back), new_mean, new_var
