"""A small convolutional network with exact backpropagation.

Inputs are patch stacks of shape ``(n, channels, height, width)``; the nine
salient patches of one face form the channels of one sample.
"""

from __future__ import annotations

import copy
import enum
import warnings
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .numerics import DimensionError, Rng

EPS = 1e-12


class ActivationMode(str, enum.Enum):
    BASELINE = "baseline"
    FLATTENED = "flattened"


class LossMode(str, enum.Enum):
    CROSS_ENTROPY = "cross-entropy"
    ENTROPY_LITERAL = "entropy-literal"
    LOG_LIKELIHOOD = "log-likelihood"


class ProbabilityClampWarning(RuntimeWarning):
    pass


# ---------------------------------------------------------------------------
# Scalar pieces
# ---------------------------------------------------------------------------


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def sigmoid_mod(x):
    """Flattened sigmoid ``1 / (1 + exp(-x/2))``."""
    return sigmoid(np.asarray(x, dtype=np.float64) / 2.0)


def activate(x, mode: ActivationMode):
    return sigmoid(x) if ActivationMode(mode) is ActivationMode.BASELINE else sigmoid_mod(x)


def activation_slope(x, mode: ActivationMode):
    """Derivative of the chosen activation at ``x``."""
    s = activate(x, mode)
    d = s * (1.0 - s)
    return d if ActivationMode(mode) is ActivationMode.BASELINE else d / 2.0


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def loss_terms(probs: np.ndarray, labels: np.ndarray, mode: LossMode) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-sample losses, gradients w.r.t. logits, and a clamp flag per sample.

    ``probs`` is (n, C) softmax output; ``labels`` is (n,) int.
    """
    mode = LossMode(mode)
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, c = p.shape
    rows = np.arange(n)
    onehot = np.zeros_like(p)
    onehot[rows, labels] = 1.0
    py = p[rows, labels]

    if mode is LossMode.CROSS_ENTROPY:
        clamped = py < EPS
        losses = -np.log(np.maximum(py, EPS))
        grad = p - onehot
    elif mode is LossMode.ENTROPY_LITERAL:
        clamped = py < EPS
        q = np.maximum(py, EPS)
        losses = -q * np.log(q)
        dq = -(np.log(q) + 1.0)
        grad = (dq * py)[:, None] * (onehot - p)
    else:
        pc = np.clip(p, EPS, 1.0 - EPS)
        clamped = np.any(pc != p, axis=1)
        ll = onehot * np.log(pc) + (1.0 - onehot) * np.log(1.0 - pc)
        losses = -ll.sum(axis=1) / c
        g = -(onehot / pc - (1.0 - onehot) / (1.0 - pc)) / c
        grad = p * (g - np.sum(g * p, axis=1, keepdims=True))
    return losses, grad, clamped


def loss(probs, label: int, mode: LossMode) -> float:
    """Loss of one prediction; warns when a probability had to be clamped."""
    losses, _, clamped = loss_terms(np.asarray(probs)[None, :], np.array([label]), mode)
    if clamped[0]:
        warnings.warn(f"probability clamped to {EPS} before log", ProbabilityClampWarning, stacklevel=2)
    return float(losses[0])


def log_likelihood_literal(p: float, successes: float, n: int) -> float:
    """Binomial form ``(1/n) log(p^k (1-p)^(n-k))`` evaluated with clamped p."""
    p = min(max(p, EPS), 1.0 - EPS)
    return (successes * np.log(p) + (n - successes) * np.log(1.0 - p)) / n


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


@dataclass
class Layer:
    kind: str  # conv | maxpool | activation | fc
    hyper: dict = field(default_factory=dict)
    weights: np.ndarray | None = None
    bias: np.ndarray | None = None

    @property
    def has_params(self) -> bool:
        return self.weights is not None


@dataclass
class NetworkParams:
    layers: list[Layer]
    input_shape: tuple[int, int, int]  # (channels, height, width)
    num_classes: int

    def copy(self) -> "NetworkParams":
        return copy.deepcopy(self)

    def param_layers(self) -> list[tuple[int, Layer]]:
        return [(i, l) for i, l in enumerate(self.layers) if l.has_params]

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([l.weights.ravel(), l.bias.ravel()]) for _, l in self.param_layers()])

    @property
    def feature_layer(self) -> int:
        """Index of the hidden fully-connected layer whose activation is the feature vector."""
        fcs = [i for i, l in enumerate(self.layers) if l.kind == "fc"]
        return fcs[-2] if len(fcs) > 1 else fcs[-1]


def _glorot(rng: Rng, fan_in: int, fan_out: int, shape, gain: float = 1.0) -> np.ndarray:
    limit = gain * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def build_network(
    rng: Rng,
    input_shape: tuple[int, int, int] = (9, 12, 12),
    num_classes: int = 6,
    conv_channels: tuple[int, ...] = (8, 16),
    kernel: int = 3,
    hidden: int = 64,
    mode: ActivationMode = ActivationMode.BASELINE,
    gain: float | None = None,
) -> NetworkParams:
    """conv/act/pool blocks, then a hidden fc layer (the features) and the logits.

    Layers feeding an activation use Glorot-uniform limits scaled by
    ``gain``, which defaults to the inverse slope of the activation at zero
    (4 for the sigmoid, 8 for the flattened sigmoid). The logit layer is
    unscaled. Biases start at zero.
    """
    if gain is None:
        gain = 1.0 / float(activation_slope(0.0, mode))
    c, h, w = input_shape
    layers: list[Layer] = []
    for out_c in conv_channels:
        wshape = (out_c, c, kernel, kernel)
        layers.append(
            Layer("conv", {"kernel": kernel, "in": c, "out": out_c},
                  _glorot(rng, c * kernel * kernel, out_c * kernel * kernel, wshape, gain), np.zeros(out_c))
        )
        layers.append(Layer("activation"))
        layers.append(Layer("maxpool", {"size": 2}))
        c, h, w = out_c, h // 2, w // 2
    flat = c * h * w
    for n_in, n_out, act in ((flat, hidden, True), (hidden, num_classes, False)):
        g = gain if act else 1.0
        layers.append(Layer("fc", {"in": n_in, "out": n_out}, _glorot(rng, n_in, n_out, (n_in, n_out), g), np.zeros(n_out)))
        if act:
            layers.append(Layer("activation"))
    return NetworkParams(layers, tuple(input_shape), num_classes)


def _conv_cols(x: np.ndarray, k: int) -> np.ndarray:
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # n, c, h, w, k, k
    n, c, h, w = x.shape
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * k * k)


def _conv_forward(x, layer):
    k = layer.hyper["kernel"]
    n, _, h, w = x.shape
    cols = _conv_cols(x, k)
    out_c = layer.weights.shape[0]
    y = cols @ layer.weights.reshape(out_c, -1).T + layer.bias
    return y.reshape(n, h, w, out_c).transpose(0, 3, 1, 2), cols


def _conv_backward(dy, x, cols, layer):
    k = layer.hyper["kernel"]
    pad = k // 2
    n, c, h, w = x.shape
    out_c = layer.weights.shape[0]
    dflat = dy.transpose(0, 2, 3, 1).reshape(-1, out_c)
    dw = (dflat.T @ cols).reshape(layer.weights.shape)
    db = dflat.sum(axis=0)
    dcols = (dflat @ layer.weights.reshape(out_c, -1)).reshape(n, h, w, c, k, k)
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + h, j : j + w] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dxp[:, :, pad : pad + h, pad : pad + w], dw, db


def _pool_forward(x, s):
    n, c, h, w = x.shape
    ho, wo = h // s, w // s
    blocks = x[:, :, : ho * s, : wo * s].reshape(n, c, ho, s, wo, s).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, s * s)
    arg = blocks.argmax(axis=-1)
    return np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0], arg


def _pool_backward(dy, x_shape, arg, s):
    n, c, h, w = x_shape
    ho, wo = dy.shape[2], dy.shape[3]
    dblocks = np.zeros((n, c, ho, wo, s * s))
    np.put_along_axis(dblocks, arg[..., None], dy[..., None], axis=-1)
    dx = np.zeros(x_shape)
    dx[:, :, : ho * s, : wo * s] = dblocks.reshape(n, c, ho, wo, s, s).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * s, wo * s)
    return dx


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


@dataclass
class ForwardTrace:
    inputs: list[np.ndarray]  # input to each layer
    caches: list[object]
    features: np.ndarray  # (n, hidden) activated feature vector
    fc_outputs: np.ndarray  # (n, hidden) pre-activation feature layer output
    logits: np.ndarray  # (n, C)
    mode: ActivationMode

    @property
    def probs(self) -> np.ndarray:
        return softmax(self.logits)


def as_batch(patches, input_shape) -> np.ndarray:
    """Coerce a PatchSet, one sample or a batch to ``(n, c, h, w)``."""
    if hasattr(patches, "stacked"):
        patches = patches.stacked(input_shape[0])
    x = np.asarray(patches, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[1:] != tuple(input_shape):
        raise DimensionError(f"layer 0 (input) expects (n, {', '.join(map(str, input_shape))}), got {x.shape}")
    return x


def forward(params: NetworkParams, patches, mode: ActivationMode = ActivationMode.BASELINE) -> ForwardTrace:
    mode = ActivationMode(mode)
    x = as_batch(patches, params.input_shape)
    inputs, caches = [], []
    feat_idx = params.feature_layer
    fc_out = None
    features = None
    for i, layer in enumerate(params.layers):
        inputs.append(x)
        if layer.kind == "conv":
            if x.shape[1] != layer.weights.shape[1]:
                raise DimensionError(f"layer {i} (conv) expects {layer.weights.shape[1]} channels, got {x.shape[1]}")
            x, cache = _conv_forward(x, layer)
        elif layer.kind == "maxpool":
            x, cache = _pool_forward(x, layer.hyper["size"])
        elif layer.kind == "activation":
            x, cache = activate(x, mode), None
        elif layer.kind == "fc":
            flat = x.reshape(x.shape[0], -1)
            if flat.shape[1] != layer.weights.shape[0]:
                raise DimensionError(f"layer {i} (fc) expects {layer.weights.shape[0]} inputs, got {flat.shape[1]}")
            x, cache = flat @ layer.weights + layer.bias, None
        else:
            raise ValueError(f"layer {i}: unknown kind {layer.kind!r}")
        caches.append(cache)
        if i == feat_idx:
            fc_out = x
        if i == feat_idx + 1 and layer.kind == "activation":
            features = x
    if features is None:
        features = fc_out
    return ForwardTrace(inputs, caches, features, fc_out, x, mode)


def backward(
    trace: ForwardTrace,
    params: NetworkParams,
    labels,
    loss_mode: LossMode = LossMode.CROSS_ENTROPY,
    activation_mode: ActivationMode | None = None,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Gradients of the batch-summed loss, one ``(dW, db)`` per parametrised layer."""
    mode = ActivationMode(activation_mode or trace.mode)
    if len(trace.inputs) != len(params.layers):
        raise DimensionError("trace does not belong to these parameters")
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.shape[0] != trace.logits.shape[0]:
        raise DimensionError("one label per traced sample required")
    _, dz, _ = loss_terms(trace.probs, labels, loss_mode)
    grads: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    d = dz
    for i in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[i]
        x = trace.inputs[i]
        if layer.kind == "fc":
            flat = x.reshape(x.shape[0], -1)
            grads[i] = (flat.T @ d, d.sum(axis=0))
            d = (d @ layer.weights.T).reshape(x.shape)
        elif layer.kind == "activation":
            d = d * activation_slope(x, mode)
        elif layer.kind == "maxpool":
            d = _pool_backward(d, x.shape, trace.caches[i], layer.hyper["size"])
        elif layer.kind == "conv":
            d, dw, db = _conv_backward(d, x, trace.caches[i], layer)
            grads[i] = (dw, db)
    return [grads[i] for i, _ in params.param_layers()]


def batch_loss(params: NetworkParams, x, labels, loss_mode: LossMode, mode: ActivationMode) -> float:
    """Summed loss over a batch; convenience for finite-difference checks."""
    trace = forward(params, x, mode)
    losses, _, _ = loss_terms(trace.probs, labels, loss_mode)
    return float(losses.sum())


def predict(params: NetworkParams, x, mode: ActivationMode = ActivationMode.BASELINE) -> np.ndarray:
    return np.argmax(forward(params, x, mode).logits, axis=1)
