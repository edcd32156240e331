from __future__ import annotations

import numpy as np

from pose6d.net.model import NetworkParams


class DivergenceError(FloatingPointError):
    """Raised when a gradient contains NaN or inf."""


def adam_step(params: NetworkParams, grads: dict[str, np.ndarray], lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> NetworkParams:
    """In-place Adam update with bias correction; returns ``params``."""
    for k, g in grads.items():
        if k not in params.weights:
            continue
        if g.shape != params.weights[k].shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {k} {params.weights[k].shape}")
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"diverged: non-finite gradient for {k}")
    params.step += 1
    t = params.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for k, w in params.weights.items():
        g = grads.get(k)
        m, v = params.m[k], params.v[k]
        m *= beta1
        v *= beta2
        if g is not None:
            m += (1.0 - beta1) * g
            v += (1.0 - beta2) * (g * g)
        w -= (lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(w.dtype, copy=False)
    return params
