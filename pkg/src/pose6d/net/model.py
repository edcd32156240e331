"""Pose regressor: architecture grid, pose head and losses."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from pose6d.geometry import Pose5D, Quaternion
from pose6d.net import layers

VARIANTS = ("fc_per_class", "fc_multi_class", "conv1_s4", "conv1_s8", "conv2_s2", "conv3_s2")
HEADS = ("single_block", "multi_block")
BLOCK = 6

# (number of head convs, stride); None for the single-FC baselines
_HEAD_CONVS = {
    "fc_per_class": None,
    "fc_multi_class": None,
    "conv1_s4": (1, 4),
    "conv1_s8": (1, 8),
    "conv2_s2": (2, 2),
    "conv3_s2": (3, 2),
}


@dataclass(frozen=True)
class ArchitectureSpec:
    variant: str = "conv3_s2"
    head: str = "single_block"
    num_classes: int = 1
    stem_channels: int = 32
    head_channels: int = 64
    hidden: int = 128
    stem_layers: int = 2

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}; expected one of {HEADS}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if min(self.stem_channels, self.head_channels, self.hidden) < 1 or self.stem_layers < 0:
            raise ValueError("layer widths must be positive")

    @property
    def blocks(self) -> int:
        return self.num_classes if self.head == "multi_block" else 1

    @property
    def output_width(self) -> int:
        return BLOCK * self.blocks

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "ArchitectureSpec":
        return cls(**d)


@dataclass(frozen=True)
class LayerDef:
    kind: str  # "conv" | "flatten" | "dense"
    name: str = ""
    stride: int = 1
    activation: str = "relu"


@dataclass
class LossWeights:
    alpha: float = 0.7

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")


@dataclass
class NetworkParams:
    """Learnable state of one regressor plus its Adam buffers."""

    spec: ArchitectureSpec
    input_shape: tuple[int, int, int]
    layers: list[LayerDef]
    weights: dict[str, np.ndarray]
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    seed: int = 0

    def __post_init__(self) -> None:
        for k, w in self.weights.items():
            self.m.setdefault(k, np.zeros_like(w))
            self.v.setdefault(k, np.zeros_like(w))

    @property
    def dtype(self):
        return next(iter(self.weights.values())).dtype

    def copy(self) -> "NetworkParams":
        return NetworkParams(
            self.spec, self.input_shape, list(self.layers),
            {k: w.copy() for k, w in self.weights.items()},
            {k: a.copy() for k, a in self.m.items()},
            {k: a.copy() for k, a in self.v.items()},
            self.step, self.seed,
        )

    def astype(self, dtype) -> "NetworkParams":
        p = self.copy()
        for d in (p.weights, p.m, p.v):
            for k in d:
                d[k] = d[k].astype(dtype)
        return p

    def num_parameters(self) -> int:
        return sum(w.size for w in self.weights.values())


def layer_plan(spec: ArchitectureSpec) -> list[LayerDef]:
    plan = [LayerDef("conv", f"stem{i + 1}", 2) for i in range(spec.stem_layers)]
    head = _HEAD_CONVS[spec.variant]
    if head is None:
        plan += [LayerDef("flatten"), LayerDef("dense", "out", activation="none")]
        return plan
    n_conv, stride = head
    plan += [LayerDef("conv", f"conv{i + 1}", stride) for i in range(n_conv)]
    plan += [
        LayerDef("flatten"),
        LayerDef("dense", "fc1"),
        LayerDef("dense", "fc2"),
        LayerDef("dense", "out", activation="none"),
    ]
    return plan


def build_architecture(
    spec: ArchitectureSpec, input_shape: tuple[int, int, int], seed: int = 0, dtype=np.float32
) -> NetworkParams:
    """Instantiate a variant with He-uniform weights and zero biases.

    The quaternion part of every output block is biased to the identity rotation,
    so the normalized head stays defined even if every hidden unit goes dead.
    """
    rng = np.random.default_rng(seed)
    h, w, c = input_shape
    plan = layer_plan(spec)
    weights: dict[str, np.ndarray] = {}
    flat = None
    for ld in plan:
        if ld.kind == "conv":
            cout = spec.stem_channels if ld.name.startswith("stem") else spec.head_channels
            h, w = layers.conv_output_size(h, ld.stride), layers.conv_output_size(w, ld.stride)
            if h < 1 or w < 1:
                raise ValueError(f"spatial size collapses below 1 at layer {ld.name} for input {input_shape}")
            fan_in = 9 * c
            lim = np.sqrt(6.0 / fan_in)
            weights[f"{ld.name}.w"] = rng.uniform(-lim, lim, size=(3, 3, c, cout)).astype(dtype)
            weights[f"{ld.name}.b"] = np.zeros(cout, dtype=dtype)
            c = cout
        elif ld.kind == "flatten":
            flat = h * w * c
        else:
            dout = spec.output_width if ld.name == "out" else spec.hidden
            lim = np.sqrt(6.0 / flat)
            weights[f"{ld.name}.w"] = rng.uniform(-lim, lim, size=(flat, dout)).astype(dtype)
            weights[f"{ld.name}.b"] = np.zeros(dout, dtype=dtype)
            if ld.name == "out":
                weights["out.b"][2::BLOCK] = 1.0
            flat = dout
    return NetworkParams(spec, tuple(input_shape), plan, weights, seed=seed)


def feature_shapes(params: NetworkParams) -> list[tuple[str, tuple[int, ...]]]:
    """Output shape after every layer, for a batch of one."""
    h, w, c = params.input_shape
    out = []
    for ld in params.layers:
        if ld.kind == "conv":
            h, w = layers.conv_output_size(h, ld.stride), layers.conv_output_size(w, ld.stride)
            c = params.weights[f"{ld.name}.w"].shape[3]
            out.append((ld.name, (h, w, c)))
        elif ld.kind == "flatten":
            out.append(("flatten", (h * w * c,)))
        else:
            out.append((ld.name, (params.weights[f"{ld.name}.w"].shape[1],)))
    return out


def prepare_input(images: np.ndarray, dtype=np.float32) -> np.ndarray:
    """uint8 NHWC images to floats in [-1, 1]."""
    return (np.asarray(images, dtype=dtype) / dtype(127.5) - dtype(1.0)).astype(dtype, copy=False)


def forward(params: NetworkParams, x: np.ndarray):
    """Raw network outputs (B, 6 * blocks) and the caches for ``backward``."""
    caches = []
    for ld in params.layers:
        if ld.kind == "conv":
            x, cache = layers.conv2d_forward(x, params.weights[f"{ld.name}.w"], params.weights[f"{ld.name}.b"],
                                             ld.stride, ld.activation)
        elif ld.kind == "flatten":
            cache = x.shape
            x = x.reshape(x.shape[0], -1)
        else:
            x, cache = layers.dense_forward(x, params.weights[f"{ld.name}.w"], params.weights[f"{ld.name}.b"],
                                            ld.activation)
        caches.append(cache)
    return x, caches


def backward(params: NetworkParams, caches, dout: np.ndarray, need_input_grad: bool = False):
    """Parameter gradients (dict keyed like ``params.weights``) and input gradient."""
    grads: dict[str, np.ndarray] = {}
    last = len(params.layers) - 1
    dx = dout
    for idx in range(last, -1, -1):
        ld, cache = params.layers[idx], caches[idx]
        want_dx = need_input_grad or idx > 0
        if ld.kind == "conv":
            dx, dw, db = layers.conv2d_backward(dx, cache, want_dx)
        elif ld.kind == "flatten":
            dx = dx.reshape(cache)
            continue
        else:
            dx, dw, db = layers.dense_backward(dx, cache, want_dx)
        grads[f"{ld.name}.w"], grads[f"{ld.name}.b"] = dw, db
    return {k: grads[k] for k in params.weights}, dx


def head_forward(raw: np.ndarray, blocks: int):
    """Split raw outputs into (B, blocks, 6) poses with unit quaternions."""
    r = raw.reshape(raw.shape[0], blocks, BLOCK)
    try:
        qhat, qcache = layers.l2_normalize_forward(r[..., 2:])
    except FloatingPointError as exc:
        raise FloatingPointError("degenerate head output") from exc
    pred = np.concatenate([r[..., :2], qhat], axis=-1)
    return pred, qcache


def head_backward(dpred: np.ndarray, qcache) -> np.ndarray:
    dq = layers.l2_normalize_backward(dpred[..., 2:], qcache)
    draw = np.concatenate([dpred[..., :2], dq], axis=-1)
    return draw.reshape(draw.shape[0], -1)


def pose_head_forward(features: np.ndarray, params: NetworkParams) -> list[list[Pose5D]]:
    """Run the network on a batch; one list of per-block poses per sample."""
    raw, _ = forward(params, features)
    pred, _ = head_forward(raw, params.spec.blocks)
    return [[Pose5D(float(p[0]), float(p[1]), Quaternion.from_array(p[2:])) for p in sample] for sample in pred]


def pose_loss(pred: np.ndarray, target: np.ndarray, alpha: float):
    """Mean over the batch of ``alpha |dxy|^2 + (1 - alpha) |dq|^2``.

    pred, target: (B, 6) rows of (u, v, qw, qx, qy, qz).
    Returns (loss, dloss/dpred).
    """
    diff = pred - target
    bsz = pred.shape[0]
    w = np.array([alpha, alpha] + [1.0 - alpha] * 4, dtype=pred.dtype)
    loss = float(np.sum(w * diff * diff)) / bsz
    grad = (2.0 / bsz) * w * diff
    return loss, grad.astype(pred.dtype, copy=False)


def loss(pred: Pose5D, target: Pose5D, weights: LossWeights = LossWeights()):
    """Single-sample loss and its gradient w.r.t. the 6 prediction components."""
    p = np.concatenate([pred.uv, pred.q.as_array()])[None]
    t = np.concatenate([target.uv, target.q.as_array()])[None]
    value, grad = pose_loss(p, t, weights.alpha)
    return value, grad[0]


def masked_multiblock_loss(preds: np.ndarray, targets: np.ndarray, class_ids: np.ndarray, alpha: float):
    """Loss on the block of each sample's own class only.

    preds: (B, N, 6); targets: (B, 6); class_ids: (B,). Gradient entries for
    every other block are exactly zero.
    """
    class_ids = np.asarray(class_ids)
    n = preds.shape[1]
    if np.any(class_ids < 0) or np.any(class_ids >= n):
        raise IndexError(f"class id out of range for {n} blocks")
    rows = np.arange(preds.shape[0])
    value, g = pose_loss(preds[rows, class_ids], targets, alpha)
    grad = np.zeros_like(preds)
    grad[rows, class_ids] = g
    return value, grad


def select_blocks(pred: np.ndarray, class_ids: np.ndarray) -> np.ndarray:
    """(B, blocks, 6) -> (B, 6) picking each sample's class block (or block 0)."""
    if pred.shape[1] == 1:
        return pred[:, 0]
    return pred[np.arange(pred.shape[0]), np.asarray(class_ids)]


def loss_and_grads(params: NetworkParams, x: np.ndarray, targets: np.ndarray, class_ids: np.ndarray,
                   alpha: float = 0.7, need_input_grad: bool = False):
    """Forward + loss + backward for one batch.

    Returns (loss, grads, pred) where pred is the (B, 6) selected prediction.
    """
    raw, caches = forward(params, x)
    pred, qcache = head_forward(raw, params.spec.blocks)
    if params.spec.head == "multi_block":
        value, dpred = masked_multiblock_loss(pred, targets, class_ids, alpha)
    else:
        value, g = pose_loss(pred[:, 0], targets, alpha)
        dpred = g[:, None, :]
    draw = head_backward(dpred, qcache)
    grads, dx = backward(params, caches, draw, need_input_grad)
    if need_input_grad:
        grads["__input__"] = dx
    return value, grads, select_blocks(pred, class_ids)


def predict(params: NetworkParams, x: np.ndarray, class_ids: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """(B, 6) predictions, evaluated in chunks."""
    out = []
    for i in range(0, x.shape[0], batch_size):
        raw, _ = forward(params, x[i:i + batch_size])
        pred, _ = head_forward(raw, params.spec.blocks)
        out.append(select_blocks(pred, class_ids[i:i + batch_size]))
    return np.concatenate(out, axis=0)
