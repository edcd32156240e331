"""Central finite-difference checks of every analytic gradient in the regressor."""

from __future__ import annotations

from typing import Callable

import numpy as np

from pose6d.net import layers
from pose6d.net.model import (
    ArchitectureSpec,
    VARIANTS,
    build_architecture,
    head_backward,
    head_forward,
    loss_and_grads,
    masked_multiblock_loss,
    pose_loss,
)

# central differences at eps=1e-5 carry ~1e-11 absolute roundoff, so
# relative error is meaningless for entries far below this
DENOM_FLOOR = 1e-6


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest elementwise |a - n| / max(|a|, |n|), with a small floor."""
    a, n = np.asarray(analytic, float), np.asarray(numeric, float)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), DENOM_FLOOR)))


def numeric_grad(f: Callable[[], float], x: np.ndarray, eps: float, indices=None) -> np.ndarray:
    """d f / d x by central differences, perturbing ``x`` in place.

    With ``indices`` only those flat entries are evaluated (others stay 0).
    """
    g = np.zeros_like(x, dtype=float)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in (range(flat.size) if indices is None else indices):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def _away_from_kinks(a: np.ndarray, margin: float) -> np.ndarray:
    # push values off zero so a finite-difference step never straddles a ReLU kink
    return np.where(np.abs(a) < margin, np.sign(a + 1e-300) * margin, a)


def check_conv(rng, eps, stride, activation) -> float:
    x = rng.normal(size=(2, 7, 7, 2))
    w = rng.normal(size=(3, 3, 2, 3))
    b = rng.normal(size=3)
    r = rng.normal(size=(2, layers.conv_output_size(7, stride), layers.conv_output_size(7, stride), 3))

    def f():
        return float(np.sum(layers.conv2d_forward(x, w, b, stride, activation)[0] * r))

    out, cache = layers.conv2d_forward(x, w, b, stride, activation)
    if activation == "relu":
        pre = layers.conv2d_forward(x, w, b, stride, "none")[0]
        if np.min(np.abs(pre)) < 10 * eps:
            b = b + 20 * eps
            out, cache = layers.conv2d_forward(x, w, b, stride, activation)
    dx, dw, db = layers.conv2d_backward(r, cache)
    return max(relative_error(dx, numeric_grad(f, x, eps)),
               relative_error(dw, numeric_grad(f, w, eps)),
               relative_error(db, numeric_grad(f, b, eps)))


def check_dense(rng, eps, activation) -> float:
    x = rng.normal(size=(4, 5))
    w = rng.normal(size=(5, 3))
    b = _away_from_kinks(rng.normal(size=3), 0.1)
    r = rng.normal(size=(4, 3))

    def f():
        return float(np.sum(layers.dense_forward(x, w, b, activation)[0] * r))

    _, cache = layers.dense_forward(x, w, b, activation)
    dx, dw, db = layers.dense_backward(r, cache)
    return max(relative_error(dx, numeric_grad(f, x, eps)),
               relative_error(dw, numeric_grad(f, w, eps)),
               relative_error(db, numeric_grad(f, b, eps)))


def check_l2_normalize(rng, eps) -> float:
    q = rng.normal(size=(3, 4))
    r = rng.normal(size=(3, 4))

    def f():
        return float(np.sum(layers.l2_normalize_forward(q)[0] * r))

    _, cache = layers.l2_normalize_forward(q)
    return relative_error(layers.l2_normalize_backward(r, cache), numeric_grad(f, q, eps))


def check_head(rng, eps, blocks) -> float:
    raw = rng.normal(size=(2, 6 * blocks))
    r = rng.normal(size=(2, blocks, 6))

    def f():
        return float(np.sum(head_forward(raw, blocks)[0] * r))

    _, cache = head_forward(raw, blocks)
    return relative_error(head_backward(r, cache), numeric_grad(f, raw, eps))


def check_pose_loss(rng, eps) -> float:
    pred = rng.normal(size=(3, 6))
    target = rng.normal(size=(3, 6))

    def f():
        return pose_loss(pred, target, 0.7)[0]

    return relative_error(pose_loss(pred, target, 0.7)[1], numeric_grad(f, pred, eps))


def check_multiblock_loss(rng, eps) -> float:
    preds = rng.normal(size=(4, 3, 6))
    target = rng.normal(size=(4, 6))
    cls = np.array([0, 2, 1, 2])

    def f():
        return masked_multiblock_loss(preds, target, cls, 0.7)[0]

    return relative_error(masked_multiblock_loss(preds, target, cls, 0.7)[1], numeric_grad(f, preds, eps))


def check_network(rng, eps, spec: ArchitectureSpec, input_shape=(31, 31, 2), batch=2) -> float:
    params = build_architecture(spec, input_shape, seed=int(rng.integers(1 << 31)), dtype=np.float64)
    for k in params.weights:
        if k.endswith(".b"):
            params.weights[k][:] = rng.uniform(0.05, 0.2, size=params.weights[k].shape)
    x = rng.normal(size=(batch,) + tuple(input_shape))
    targets = rng.normal(size=(batch, 6))
    targets[:, 2:] /= np.linalg.norm(targets[:, 2:], axis=1, keepdims=True)
    cls = rng.integers(0, spec.num_classes, size=batch)

    def f():
        return loss_and_grads(params, x, targets, cls)[0]

    _, grads, _ = loss_and_grads(params, x, targets, cls, need_input_grad=True)
    idx = rng.choice(x.size, size=min(x.size, 300), replace=False)
    worst = relative_error(grads["__input__"].reshape(-1)[idx], numeric_grad(f, x, eps, idx).reshape(-1)[idx])
    for k, w in params.weights.items():
        worst = max(worst, relative_error(grads[k], numeric_grad(f, w, eps)))
    return worst


def tiny_spec(variant: str, head: str = "single_block", num_classes: int = 1) -> ArchitectureSpec:
    return ArchitectureSpec(variant=variant, head=head, num_classes=num_classes, stem_channels=2,
                            head_channels=3, hidden=5, stem_layers=1)


def run_gradcheck(eps: float = 1e-5, seed: int = 0) -> dict[str, float]:
    """Maximum relative error per checked component (float64 throughout)."""
    rng = np.random.default_rng(seed)
    results = {
        "conv_s1_relu": check_conv(rng, eps, 1, "relu"),
        "conv_s2_relu": check_conv(rng, eps, 2, "relu"),
        "conv_s2_linear": check_conv(rng, eps, 2, "none"),
        "conv_s4_relu": check_conv(rng, eps, 4, "relu"),
        "dense_relu": check_dense(rng, eps, "relu"),
        "dense_linear": check_dense(rng, eps, "none"),
        "l2_normalize": check_l2_normalize(rng, eps),
        "pose_head_single": check_head(rng, eps, 1),
        "pose_head_multi": check_head(rng, eps, 3),
        "loss_single_block": check_pose_loss(rng, eps),
        "loss_multi_block": check_multiblock_loss(rng, eps),
    }
    for variant in VARIANTS:
        results[f"net_{variant}"] = check_network(rng, eps, tiny_spec(variant))
    results["net_conv3_s2_multi_block"] = check_network(rng, eps, tiny_spec("conv3_s2", "multi_block", 3), batch=3)
    return results
