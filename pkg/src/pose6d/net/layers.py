"""Dense array layers with analytic gradients.

Images and feature maps are NHWC. Convolutions are 3x3, valid padding,
cross-correlation (no kernel flip). Every ``*_forward`` returns
``(output, cache)`` and the matching ``*_backward`` consumes the cache.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

KERNEL = 3


def conv_output_size(size: int, stride: int, kernel: int = KERNEL) -> int:
    return (size - kernel) // stride + 1


def conv2d_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray, stride: int, activation: str = "relu"):
    """x: (B, H, W, Cin); weights: (3, 3, Cin, Cout); bias: (Cout,)."""
    if x.ndim != 4:
        raise ValueError(f"conv input must be NHWC, got shape {x.shape}")
    b, h, w, cin = x.shape
    if weights.shape[:3] != (KERNEL, KERNEL, cin) or bias.shape != weights.shape[3:]:
        raise ValueError(f"conv weight shape {weights.shape} does not match input channels {cin}")
    if h < KERNEL or w < KERNEL:
        raise ValueError(f"conv input {h}x{w} smaller than kernel")
    if activation not in ("relu", "none"):
        raise ValueError(f"unknown activation {activation!r}")
    ho, wo = conv_output_size(h, stride), conv_output_size(w, stride)
    # (B, H', W', C, kh, kw) -> strided -> (B, Ho, Wo, kh, kw, C)
    win = sliding_window_view(x, (KERNEL, KERNEL), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(b * ho * wo, KERNEL * KERNEL * cin)
    cout = weights.shape[3]
    out = (cols @ weights.reshape(-1, cout) + bias).reshape(b, ho, wo, cout)
    if activation == "relu":
        np.maximum(out, 0, out=out)
    cache = (x.shape, cols, weights, stride, activation, out)
    return out, cache


def conv2d_backward(dout: np.ndarray, cache, need_input_grad: bool = True):
    """Returns (dx, dweights, dbias); dx is None when not requested."""
    x_shape, cols, weights, stride, activation, out = cache
    if activation == "relu":
        dout = dout * (out > 0)
    b, ho, wo, cout = dout.shape
    d2 = dout.reshape(-1, cout)
    dw = (cols.T @ d2).reshape(weights.shape)
    db = d2.sum(axis=0)
    if not need_input_grad:
        return None, dw, db
    cin = x_shape[3]
    dcols = (d2 @ weights.reshape(-1, cout).T).reshape(b, ho, wo, KERNEL, KERNEL, cin)
    dx = np.zeros(x_shape, dtype=dout.dtype)
    for i in range(KERNEL):
        for j in range(KERNEL):
            dx[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :] += dcols[:, :, :, i, j, :]
    return dx, dw, db


def dense_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray, activation: str = "relu"):
    """x: (B, Din); weights: (Din, Dout)."""
    if x.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise ValueError(f"dense input {x.shape} does not match weights {weights.shape}")
    out = x @ weights + bias
    if activation == "relu":
        np.maximum(out, 0, out=out)
    elif activation != "none":
        raise ValueError(f"unknown activation {activation!r}")
    return out, (x, weights, activation, out)


def dense_backward(dout: np.ndarray, cache, need_input_grad: bool = True):
    x, weights, activation, out = cache
    if activation == "relu":
        dout = dout * (out > 0)
    dw = x.T @ dout
    db = dout.sum(axis=0)
    dx = dout @ weights.T if need_input_grad else None
    return dx, dw, db


def l2_normalize_forward(q: np.ndarray, min_norm: float = 1e-8):
    """Row-wise L2 normalization of (..., 4) raw quaternions."""
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n < min_norm):
        raise FloatingPointError("degenerate head output")
    qhat = q / n
    return qhat, (qhat, n)


def l2_normalize_backward(dqhat: np.ndarray, cache) -> np.ndarray:
    # Jacobian (I - qhat qhat^T) / |q| is symmetric
    qhat, n = cache
    return (dqhat - qhat * np.sum(qhat * dqhat, axis=-1, keepdims=True)) / n
