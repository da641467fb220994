"""NumPy implementation of the valid-convolution kernels.

Fallback backend used when the compiled extension is unavailable. Forward
and backward passes are expressed as tensordot contractions over sliding
windows, so the heavy lifting stays inside BLAS.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BACKEND_NAME = "python"


def conv2d_forward(x, kernel, stride):
    """Valid cross-correlation of x (b,ci,h,w) with kernel (co,ci,kh,kw)."""
    kh, kw = kernel.shape[2], kernel.shape[3]
    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # windows: (b, ci, oh, ow, kh, kw) -> contract ci,kh,kw against kernel
    out = np.tensordot(windows, kernel, axes=([1, 4, 5], [1, 2, 3]))
    # out: (b, oh, ow, co) -> (b, co, oh, ow)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_backward_input(grad_out, kernel, stride, in_h, in_w):
    """Gradient of the valid convolution w.r.t. its input."""
    b = grad_out.shape[0]
    ci = kernel.shape[1]
    kh, kw = kernel.shape[2], kernel.shape[3]
    oh, ow = grad_out.shape[2], grad_out.shape[3]
    grad_in = np.zeros((b, ci, in_h, in_w), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            # every output (oh,ow) touched input pixel (oh*stride+i, ow*stride+j)
            contrib = np.tensordot(grad_out, kernel[:, :, i, j], axes=([1], [0]))
            # contrib: (b, oh, ow, ci) -> (b, ci, oh, ow)
            grad_in[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride] += (
                contrib.transpose(0, 3, 1, 2)
            )
    return grad_in


def conv2d_backward_kernel(grad_out, x, stride, kh, kw):
    """Gradient of the valid convolution w.r.t. the kernel."""
    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # contract batch and output positions: (b,co,oh,ow) x (b,ci,oh,ow,kh,kw)
    grad_k = np.tensordot(grad_out, windows, axes=([0, 2, 3], [0, 2, 3]))
    return np.ascontiguousarray(grad_k)
