"""Classifier heads over network features: NCSF decision forest and ELM."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from .network import ActivationMode, activate, sigmoid
from .numerics import DimensionError, ParameterError, Rng, pinv

# ---------------------------------------------------------------------------
# Decision forest with sigmoid (NCSF) splits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Tree:
    """Complete binary tree in breadth-first layout.

    ``split_features[n]`` is the feature coordinate driving split node ``n``;
    node ``n`` has children ``2n+1`` (left) and ``2n+2`` (right).
    """

    depth: int
    split_features: np.ndarray  # (2**depth - 1,) int
    leaf_dists: np.ndarray  # (2**depth, C)

    @property
    def n_leaves(self) -> int:
        return 1 << self.depth


@dataclass(frozen=True)
class ForestHead:
    trees: tuple[Tree, ...]
    num_classes: int
    mode: ActivationMode = ActivationMode.BASELINE
    smoothing: float | None = None  # None means 1/C


def ncsf_split(features: np.ndarray, node_index: int, mode: ActivationMode = ActivationMode.BASELINE) -> float:
    """Routing probability towards the left child for one split node."""
    features = np.asarray(features, dtype=np.float64)
    if not 0 <= node_index < features.shape[-1]:
        raise IndexError(f"feature index {node_index} outside 0..{features.shape[-1] - 1}")
    return activate(features[..., node_index], mode)


def tree_leaf_probabilities(tree: Tree, features: np.ndarray, mode: ActivationMode = ActivationMode.BASELINE) -> np.ndarray:
    """Probability of reaching every leaf; accepts (d,) or (n, d) features."""
    features = np.asarray(features, dtype=np.float64)
    single = features.ndim == 1
    f = features[None, :] if single else features
    mu = np.ones((f.shape[0], 1))
    node = 0
    for level in range(tree.depth):
        width = 1 << level
        idx = tree.split_features[node : node + width]
        if idx.size and idx.max() >= f.shape[1]:
            raise IndexError(f"split feature {idx.max()} outside feature vector of length {f.shape[1]}")
        d = activate(f[:, idx], mode)
        mu = np.stack([mu * d, mu * (1.0 - d)], axis=2).reshape(f.shape[0], 2 * width)
        node += width
    return mu[0] if single else mu


def forest_predict(head: ForestHead, features: np.ndarray) -> np.ndarray:
    """Average over trees of the reach-weighted leaf distributions."""
    features = np.asarray(features, dtype=np.float64)
    total = None
    for tree in head.trees:
        p = tree_leaf_probabilities(tree, features, head.mode) @ tree.leaf_dists
        total = p if total is None else total + p
    return total / len(head.trees)


def forest_init(
    feature_dim: int,
    num_classes: int,
    n_trees: int = 5,
    depth: int = 5,
    mode: ActivationMode = ActivationMode.BASELINE,
    smoothing: float | None = None,
) -> ForestHead:
    """Uniform leaves; split nodes take feature coordinates round-robin across the forest."""
    if feature_dim < 1 or n_trees < 1 or depth < 0:
        raise ParameterError("feature_dim and n_trees must be >= 1, depth >= 0")
    n_split = (1 << depth) - 1
    trees = []
    for t in range(n_trees):
        feats = (np.arange(n_split) + t * n_split) % feature_dim
        leaves = np.full((1 << depth, num_classes), 1.0 / num_classes)
        trees.append(Tree(depth, feats.astype(np.int64), leaves))
    return ForestHead(tuple(trees), num_classes, ActivationMode(mode), smoothing)


def forest_update_leaves(head: ForestHead, feature_batch: np.ndarray, labels) -> ForestHead:
    """Set each leaf to the smoothed, reach-weighted label histogram of the batch.

    Leaves that no sample reaches (total reach < 1e-12) keep a uniform
    distribution when smoothing is zero.
    """
    x = np.atleast_2d(np.asarray(feature_batch, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    if x.shape[0] == 0:
        raise ParameterError("empty batch")
    if labels.shape[0] != x.shape[0]:
        raise DimensionError("one label per feature row required")
    c = head.num_classes
    alpha = 1.0 / c if head.smoothing is None else head.smoothing
    onehot = np.zeros((x.shape[0], c))
    onehot[np.arange(x.shape[0]), labels] = 1.0
    trees = []
    for tree in head.trees:
        mu = tree_leaf_probabilities(tree, x, head.mode)
        counts = mu.T @ onehot + alpha
        sums = counts.sum(axis=1, keepdims=True)
        dead = sums[:, 0] < 1e-12
        dists = np.where(dead[:, None], 1.0 / c, counts / np.where(dead[:, None], 1.0, sums))
        trees.append(replace(tree, leaf_dists=dists))
    return replace(head, trees=tuple(trees))


# ---------------------------------------------------------------------------
# Extreme learning machine
# ---------------------------------------------------------------------------


class UnfittedModelWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ElmModel:
    input_weights: np.ndarray  # (d, L)
    bias: np.ndarray  # (L,)
    output_weights: np.ndarray  # (L, C)
    ridge: float = 0.01
    seed: int = 0

    @property
    def hidden_size(self) -> int:
        return self.bias.shape[0]

    @property
    def fitted(self) -> bool:
        return bool(np.any(self.output_weights))


def elm_init(feature_dim: int, hidden: int, num_classes: int, rng: Rng, ridge: float = 0.01) -> ElmModel:
    if hidden < 1:
        raise ParameterError("hidden size must be >= 1")
    if ridge < 0:
        raise ParameterError("ridge must be >= 0")
    w = rng.uniform(-1.0, 1.0, size=(feature_dim, hidden))
    b = rng.uniform(-1.0, 1.0, size=hidden)
    return ElmModel(w, b, np.zeros((hidden, num_classes)), float(ridge), rng.seed)


def elm_hidden(model: ElmModel, features: np.ndarray) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.shape[-1] != model.input_weights.shape[0]:
        raise DimensionError(f"ELM expects {model.input_weights.shape[0]} features, got {x.shape[-1]}")
    return sigmoid(x @ model.input_weights + model.bias)


def elm_fit(model: ElmModel, features: np.ndarray, labels, ridge: float | None = None) -> ElmModel:
    """Closed-form output weights from one-hot targets; one solve, no iterations."""
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    if x.shape[0] < 1:
        raise ParameterError("need at least one sample")
    lam = model.ridge if ridge is None else float(ridge)
    c = model.output_weights.shape[1]
    t = np.zeros((x.shape[0], c))
    t[np.arange(x.shape[0]), labels] = 1.0
    h = elm_hidden(model, x)
    if lam > 0:
        gram = h.T @ h + lam * np.eye(h.shape[1])
        try:
            beta = np.linalg.solve(gram, h.T @ t)
        except np.linalg.LinAlgError:
            beta = pinv(gram) @ (h.T @ t)
    else:
        beta = pinv(h) @ t
    return replace(model, output_weights=beta, ridge=lam)


def elm_predict(model: ElmModel, features: np.ndarray) -> tuple[np.ndarray, np.ndarray | int]:
    """Class scores and argmax labels (lowest index wins ties)."""
    if not model.fitted:
        warnings.warn("ELM output weights are zero; model is unfitted", UnfittedModelWarning, stacklevel=2)
    scores = elm_hidden(model, features) @ model.output_weights
    labels = np.argmax(scores, axis=-1)
    return scores, (int(labels) if np.ndim(labels) == 0 else labels)
