"""Batched numpy kernels for the layer set (NCHW, row-major).

Every function is dtype-preserving: parameters are cast to the dtype of the
activation they act on, so the same kernels serve the float32 ANN path and the
float64 spiking simulator.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv_out_size(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def tconv_out_size(size, kernel, stride, padding):
    return (size - 1) * stride - 2 * padding + kernel


def _pad(x, padding):
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _windows(xp, kernel, stride):
    # (N, C, Ho, Wo, k, k) view, no copy
    win = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d(x, w, b, stride=1, padding=0, groups=1):
    """Grouped 2-D cross-correlation. ``w`` has shape (Cout, Cin/groups, k, k)."""
    w = w.astype(x.dtype, copy=False)
    n, c = x.shape[:2]
    cout, cg, k, _ = w.shape
    win = _windows(_pad(x, padding), k, stride)
    ho, wo = win.shape[2:4]
    if groups == 1:
        out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # N,Ho,Wo,Cout
        out = out.transpose(0, 3, 1, 2)
    else:
        win = win.reshape(n, groups, cg, ho, wo, k, k)
        wg = w.reshape(groups, cout // groups, cg, k, k)
        out = np.einsum("ngchwij,gocij->ngohw", win, wg, optimize=True)
        out = out.reshape(n, cout, ho, wo)
    if b is not None:
        out = out + b.astype(x.dtype, copy=False)[None, :, None, None]
    return np.ascontiguousarray(out)


def conv2d_grad_input(dy, w, in_hw, stride=1, padding=0, groups=1):
    """Adjoint of :func:`conv2d` with respect to its input."""
    w = w.astype(dy.dtype, copy=False)
    n, cout, ho, wo = dy.shape
    _, cg, k, _ = w.shape
    h, wd = in_hw
    cin = cg * groups
    dxp = np.zeros((n, cin, h + 2 * padding, wd + 2 * padding), dtype=dy.dtype)
    dyg = dy.reshape(n, groups, cout // groups, ho, wo)
    wg = w.reshape(groups, cout // groups, cg, k, k)
    for i in range(k):
        for j in range(k):
            contrib = np.einsum("ngohw,goc->ngchw", dyg, wg[..., i, j], optimize=True)
            dxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += (
                contrib.reshape(n, cin, ho, wo)
            )
    if padding:
        dxp = dxp[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(dxp)


def conv2d_grad_weight(dy, x, w_shape, stride=1, padding=0, groups=1):
    n, c = x.shape[:2]
    cout, cg, k, _ = w_shape
    win = _windows(_pad(x, padding), k, stride)
    ho, wo = win.shape[2:4]
    if groups == 1:
        return np.tensordot(dy, win, axes=([0, 2, 3], [0, 2, 3]))
    win = win.reshape(n, groups, cg, ho, wo, k, k)
    dyg = dy.reshape(n, groups, cout // groups, ho, wo)
    dw = np.einsum("ngohw,ngchwij->gocij", dyg, win, optimize=True)
    return dw.reshape(w_shape)


def conv_transpose2d(x, w, b, stride=1, padding=0, groups=1):
    """Transposed convolution; ``w`` has shape (Cin, Cout/groups, k, k)."""
    k = w.shape[2]
    h, wd = x.shape[2:]
    out_hw = (tconv_out_size(h, k, stride, padding), tconv_out_size(wd, k, stride, padding))
    out = conv2d_grad_input(x, w, out_hw, stride, padding, groups)
    if b is not None:
        out = out + b.astype(x.dtype, copy=False)[None, :, None, None]
    return out


def conv_transpose2d_backward(dy, x, w, stride=1, padding=0, groups=1):
    dx = conv2d(dy, w, None, stride, padding, groups)
    dw = conv2d_grad_weight(x, dy, w.shape, stride, padding, groups)
    return dx, dw


def avg_kernel(channels, kernel, dtype=np.float32):
    # shared by AvgPool2D and avg-initialized strided convolutions so both
    # run through identical arithmetic
    return np.full((channels, 1, kernel, kernel), 1.0 / (kernel * kernel), dtype=dtype)


def avg_pool2d(x, kernel, stride):
    c = x.shape[1]
    return conv2d(x, avg_kernel(c, kernel, x.dtype), None, stride, 0, groups=c)


def avg_pool2d_backward(dy, in_hw, kernel, stride):
    c = dy.shape[1]
    return conv2d_grad_input(dy, avg_kernel(c, kernel, dy.dtype), in_hw, stride, 0, groups=c)


def max_pool2d(x, kernel, stride):
    return np.ascontiguousarray(_windows(x, kernel, stride).max(axis=(-2, -1)))


def max_pool2d_backward(dy, x, kernel, stride):
    """Routes each window's gradient to its first maximal element."""
    win = _windows(x, kernel, stride)
    n, c, ho, wo = win.shape[:4]
    flat = win.reshape(n, c, ho, wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    dx = np.zeros_like(x)
    for idx in range(kernel * kernel):
        i, j = divmod(idx, kernel)
        mask = arg == idx
        dx[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += dy * mask
    return dx


def upsample_nearest(x, scale):
    return x.repeat(scale, axis=2).repeat(scale, axis=3)


def upsample_nearest_backward(dy, scale):
    n, c, h, w = dy.shape
    return dy.reshape(n, c, h // scale, scale, w // scale, scale).sum(axis=(3, 5))


def quant_clip(x, levels, offset, clip):
    """clip(floor(x * levels + offset) / levels, 0, clip), elementwise."""
    dt = x.dtype
    with np.errstate(over="ignore"):
        q = np.floor(x * dt.type(levels) + dt.type(offset)) / dt.type(levels)
    return np.clip(q, dt.type(0), dt.type(clip))
