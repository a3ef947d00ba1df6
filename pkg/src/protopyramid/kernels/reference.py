"""Pure numpy conv / pool kernels. Fallback when the compiled extension is absent.

Convolutions are expressed as a sum of shifted GEMMs (one per kernel tap), which
keeps memory flat relative to im2col while still hitting BLAS.
"""

import numpy as np

BACKEND = "python"


def conv2d_forward(x, k, stride, padding):
    """x: (B, Cin, H, W), k: (Cout, Cin, kh, kw) -> (B, Cout, Ho, Wo)."""
    b, cin, h, w = x.shape
    cout, cink, kh, kw = k.shape
    if cin != cink:
        raise ValueError(
            f"conv2d: input has {cin} channels but kernel expects {cink}"
        )
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((b, cout, ho, wo), dtype=x.dtype)
    for dy in range(kh):
        for dx in range(kw):
            patch = x[:, :, dy : dy + ho * stride : stride, dx : dx + wo * stride : stride]
            # (cout, cin) x (b, cin, ho, wo) -> (cout, b, ho, wo)
            out += np.tensordot(k[:, :, dy, dx], patch, axes=([1], [1])).transpose(1, 0, 2, 3)
    return out


def conv2d_backward_input(grad_out, k, x_shape, stride, padding):
    b, cin, h, w = x_shape
    cout, _, kh, kw = k.shape
    _, _, ho, wo = grad_out.shape
    gx = np.zeros((b, cin, h + 2 * padding, w + 2 * padding), dtype=grad_out.dtype)
    for dy in range(kh):
        for dx in range(kw):
            # (cin, cout) x (b, cout, ho, wo) -> (cin, b, ho, wo)
            contrib = np.tensordot(k[:, :, dy, dx], grad_out, axes=([0], [1]))
            gx[:, :, dy : dy + ho * stride : stride, dx : dx + wo * stride : stride] += (
                contrib.transpose(1, 0, 2, 3)
            )
    if padding:
        gx = gx[:, :, padding : padding + h, padding : padding + w]
    return gx


def conv2d_backward_kernel(grad_out, x, k_shape, stride, padding):
    cout, cin, kh, kw = k_shape
    _, _, ho, wo = grad_out.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    gk = np.empty(k_shape, dtype=grad_out.dtype)
    for dy in range(kh):
        for dx in range(kw):
            patch = x[:, :, dy : dy + ho * stride : stride, dx : dx + wo * stride : stride]
            gk[:, :, dy, dx] = np.tensordot(grad_out, patch, axes=([0, 2, 3], [0, 2, 3]))
    return gk


def maxpool2d_forward(x, window, stride):
    """Returns (out, argmax) where argmax holds flat within-window indices
    (row-major over the window, first occurrence on ties)."""
    b, c, h, w = x.shape
    if h % stride or w % stride or window != stride:
        raise ValueError(
            f"maxpool2d: extents ({h},{w}) not divisible by stride {stride}"
        )
    ho, wo = h // stride, w // stride
    tiles = x.reshape(b, c, ho, window, wo, window).transpose(0, 1, 2, 4, 3, 5)
    tiles = tiles.reshape(b, c, ho, wo, window * window)
    arg = tiles.argmax(axis=-1)
    out = np.take_along_axis(tiles, arg[..., None], axis=-1)[..., 0]
    return out, arg.astype(np.int64)


def maxpool2d_backward(grad_out, argmax, x_shape, window, stride):
    b, c, h, w = x_shape
    ho, wo = h // stride, w // stride
    gt = np.zeros((b, c, ho, wo, window * window), dtype=grad_out.dtype)
    np.put_along_axis(gt, argmax[..., None], grad_out[..., None], axis=-1)
    gt = gt.reshape(b, c, ho, wo, window, window).transpose(0, 1, 2, 4, 3, 5)
    return gt.reshape(b, c, h, w)
