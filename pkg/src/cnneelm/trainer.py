"""Mini-batch SGD training, the three update rules, and evaluation metrics."""

from __future__ import annotations

import csv
import enum
import io
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .dataio import Dataset
from .heads import elm_fit, elm_init, forest_init, forest_update_leaves
from .network import (
    ActivationMode,
    LossMode,
    NetworkParams,
    backward,
    build_network,
    forward,
    loss_terms,
)
from .numerics import ParameterError, Rng
from .pipeline import HEAD_KINDS, ModelBundle, PreprocessSettings, batch_inputs, classify_image, predict_inputs

log = logging.getLogger(__name__)


class UpdateRule(str, enum.Enum):
    BASELINE = "baseline"
    MODIFIED_LITERAL = "modified-literal"
    MODIFIED_CONVENTIONAL = "modified-conventional"


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    """Raised when parameters or losses become non-finite.

    ``params`` holds the last finite parameters and ``metrics`` the rows
    recorded so far.
    """

    def __init__(self, message: str, params: NetworkParams, metrics: "Metrics"):
        super().__init__(message)
        self.params = params
        self.metrics = metrics


DEFAULT_BATCH = {UpdateRule.BASELINE: 35, UpdateRule.MODIFIED_LITERAL: 70, UpdateRule.MODIFIED_CONVENTIONAL: 70}
DEFAULT_LR = {UpdateRule.BASELINE: 0.5, UpdateRule.MODIFIED_LITERAL: 8.0, UpdateRule.MODIFIED_CONVENTIONAL: 8.0}


@dataclass
class TrainConfig:
    update_rule: UpdateRule = UpdateRule.BASELINE
    learning_rate: float | None = None
    batch_size: int | None = None
    epochs: int = 100
    loss_mode: LossMode | None = None
    activation_mode: ActivationMode = ActivationMode.BASELINE
    seed: int = 0
    gradient_clip: float | None = None
    elm_hidden: int = 500
    elm_ridge: float = 0.01
    forest_trees: int = 5
    forest_depth: int = 5
    conv_channels: tuple[int, ...] = (8, 16)
    hidden: int = 64

    def __post_init__(self):
        self.update_rule = UpdateRule(self.update_rule)
        self.activation_mode = ActivationMode(self.activation_mode)
        modified = self.update_rule is not UpdateRule.BASELINE
        if self.loss_mode is None:
            self.loss_mode = LossMode.LOG_LIKELIHOOD if modified else LossMode.CROSS_ENTROPY
        self.loss_mode = LossMode(self.loss_mode)
        if modified and self.loss_mode is not LossMode.LOG_LIKELIHOOD:
            raise ConfigError(
                f"update rule {self.update_rule.value!r} is defined on the log-likelihood objective; "
                f"loss {self.loss_mode.value!r} is not allowed"
            )
        if self.learning_rate is None:
            self.learning_rate = DEFAULT_LR[self.update_rule]
        if self.batch_size is None:
            self.batch_size = DEFAULT_BATCH[self.update_rule]
        if self.learning_rate <= 0:
            raise ConfigError("learning rate must be > 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch size and epochs must be >= 1")
        if self.gradient_clip is not None and self.gradient_clip <= 0:
            raise ConfigError("gradient clip must be > 0")
        self.conv_channels = tuple(self.conv_channels)


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------


def make_batches(labels, batch_size: int, rng: Rng) -> list[np.ndarray]:
    """Class-balanced shuffled batches of sample indices.

    Each class's members are shuffled, then classes are interleaved
    round-robin so consecutive chunks mix classes as evenly as the counts
    allow. The last batch may be short.
    """
    if isinstance(labels, Dataset):
        labels = labels.labels
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ParameterError("cannot batch an empty dataset")
    if batch_size < 1:
        raise ParameterError("batch size must be >= 1")
    pools = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        pools.append(list(idx[rng.permutation(idx.size)]))
    order: list[int] = []
    depth = max(len(p) for p in pools)
    for r in range(depth):
        order.extend(p[r] for p in pools if r < len(p))
    order_arr = np.array(order, dtype=np.int64)
    return [order_arr[i : i + batch_size] for i in range(0, order_arr.size, batch_size)]


# ---------------------------------------------------------------------------
# Update rules
# ---------------------------------------------------------------------------


def update_baseline(y, grad_sum, eta: float, batch_size: int):
    """``Y - eta/|B| * sum dL/dY``."""
    return y - (eta / batch_size) * grad_sum


def update_modified_literal(y, likelihood_grad_sum, eta: float, batch_size: int):
    """The multiplicative form, applied verbatim: ``-Y * eta/(2|B|) * sum dL_I/dY``.

    Takes the gradient of the log-likelihood itself (not of its negation).
    Does not descend; kept for fidelity experiments.
    """
    return -y * (eta / (2.0 * batch_size)) * likelihood_grad_sum


def update_modified_conventional(y, loss_grad_sum, eta: float, batch_size: int):
    """``Y - eta/(2|B|) * sum d(-L_I)/dY``."""
    return y - (eta / (2.0 * batch_size)) * loss_grad_sum


def _apply(params: NetworkParams, grads, fn) -> NetworkParams:
    new = params.copy()
    for (i, _), (dw, db) in zip(new.param_layers(), grads):
        layer = new.layers[i]
        layer.weights = fn(layer.weights, dw)
        layer.bias = fn(layer.bias, db)
    return new


def _batch_grads(params, x, y, loss_mode, activation_mode, clip=None):
    grads = backward(forward(params, x, activation_mode), params, y, loss_mode)
    finite = all(np.all(np.isfinite(dw)) and np.all(np.isfinite(db)) for dw, db in grads)
    if clip is None:
        if not finite:
            raise FloatingPointError("non-finite gradient")
        return grads
    grads = [(np.nan_to_num(dw, nan=0.0, posinf=0.0, neginf=0.0), np.nan_to_num(db, nan=0.0, posinf=0.0, neginf=0.0)) for dw, db in grads]
    # clip the norm of the batch-mean gradient
    norm = np.sqrt(sum(np.sum(dw * dw) + np.sum(db * db) for dw, db in grads)) / len(y)
    if norm > clip:
        scale = clip / norm
        grads = [(dw * scale, db * scale) for dw, db in grads]
    return grads


def sgd_step_baseline(params, x, y, eta, loss_mode=LossMode.CROSS_ENTROPY, activation_mode=ActivationMode.BASELINE, clip=None):
    grads = _batch_grads(params, x, y, loss_mode, activation_mode, clip)
    n = len(y)
    return _apply(params, grads, lambda p, g: update_baseline(p, g, eta, n))


def sgd_step_modified_literal(params, x, y, eta, activation_mode=ActivationMode.BASELINE, clip=None):
    grads = _batch_grads(params, x, y, LossMode.LOG_LIKELIHOOD, activation_mode, clip)
    n = len(y)
    # the loss is -L_I, so the likelihood gradient is its negation
    return _apply(params, grads, lambda p, g: update_modified_literal(p, -g, eta, n))


def sgd_step_modified_conventional(params, x, y, eta, activation_mode=ActivationMode.BASELINE, clip=None):
    grads = _batch_grads(params, x, y, LossMode.LOG_LIKELIHOOD, activation_mode, clip)
    n = len(y)
    return _apply(params, grads, lambda p, g: update_modified_conventional(p, g, eta, n))


def sgd_step(config: TrainConfig, params, x, y):
    rule, eta, act, clip = config.update_rule, config.learning_rate, config.activation_mode, config.gradient_clip
    if rule is UpdateRule.BASELINE:
        return sgd_step_baseline(params, x, y, eta, config.loss_mode, act, clip)
    if rule is UpdateRule.MODIFIED_LITERAL:
        return sgd_step_modified_literal(params, x, y, eta, act, clip)
    return sgd_step_modified_conventional(params, x, y, eta, act, clip)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


BASE_COLUMNS = ("epoch", "trainAcc", "valAcc", "trainLoss", "valLoss", "trainCE", "valCE")


def layer_stats(params: NetworkParams) -> dict[str, float]:
    out = {}
    for k, (_, layer) in enumerate(params.param_layers()):
        out[f"w{k}Mean"] = float(layer.weights.mean())
        out[f"w{k}Std"] = float(layer.weights.std())
        out[f"b{k}Mean"] = float(layer.bias.mean())
        out[f"b{k}Std"] = float(layer.bias.std())
    return out


@dataclass
class Metrics:
    rows: list[dict] = field(default_factory=list)
    confusion: np.ndarray | None = None
    class_names: tuple[str, ...] = ()
    latency_ms: dict[str, float] = field(default_factory=dict)

    @property
    def accuracy(self) -> float:
        if self.confusion is None:
            raise ValueError("no evaluation recorded")
        return float(np.trace(self.confusion) / self.confusion.sum())

    @property
    def per_class_accuracy(self) -> np.ndarray:
        totals = self.confusion.sum(axis=1)
        return np.divide(np.diag(self.confusion), totals, out=np.zeros(len(totals)), where=totals > 0)

    def columns(self) -> list[str]:
        if not self.rows:
            return list(BASE_COLUMNS)
        extra = [k for k in self.rows[0] if k not in BASE_COLUMNS]
        return list(BASE_COLUMNS) + extra

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        cols = self.columns()
        writer.writerow(cols)
        for row in self.rows:
            writer.writerow([row[c] if c == "epoch" else repr(float(row[c])) for c in cols])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv())


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


def _split_scores(params, x, y, config):
    trace = forward(params, x, config.activation_mode)
    probs = trace.probs
    losses, _, _ = loss_terms(probs, y, config.loss_mode)
    ce, _, _ = loss_terms(probs, y, LossMode.CROSS_ENTROPY)
    acc = float(np.mean(np.argmax(trace.logits, axis=1) == y))
    return acc, float(losses.mean()), float(ce.mean())


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def fit_head(bundle: ModelBundle, x_train: np.ndarray, y_train: np.ndarray, config: TrainConfig, rng: Rng) -> ModelBundle:
    """Fit the bundle's head on features of the trained network."""
    trace = forward(bundle.network, x_train, bundle.activation)
    c = bundle.network.num_classes
    if bundle.head_kind == "elm":
        model = elm_init(trace.features.shape[1], config.elm_hidden, c, rng, config.elm_ridge)
        head = elm_fit(model, trace.features, y_train)
    elif bundle.head_kind == "forest":
        forest = forest_init(trace.fc_outputs.shape[1], c, config.forest_trees, config.forest_depth, bundle.activation)
        head = forest_update_leaves(forest, trace.fc_outputs, y_train)
    else:
        head = None
    return replace(bundle, head=head)


def train(
    config: TrainConfig,
    ds: Dataset,
    head_kind: str = "elm",
    settings: PreprocessSettings = PreprocessSettings(),
    inputs: np.ndarray | None = None,
) -> tuple[ModelBundle, Metrics]:
    """Train the network, then fit the requested head on its final features.

    ``inputs`` may carry precomputed network inputs for every sample of
    ``ds`` to skip patch extraction.
    """
    if head_kind not in HEAD_KINDS:
        raise ConfigError(f"unknown head {head_kind!r}")
    train_mask = ds.splits == "train"
    val_mask = ds.splits == "validation"
    if not train_mask.any() or not val_mask.any():
        raise ConfigError("dataset needs non-empty train and validation splits")
    x = batch_inputs(ds.images, settings) if inputs is None else inputs
    xt, yt = x[train_mask], ds.labels[train_mask]
    xv, yv = x[val_mask], ds.labels[val_mask]

    root = Rng(config.seed)
    init_rng, batch_rng, head_rng = root.spawn(), root.spawn(), root.spawn()
    params = build_network(
        init_rng, settings.input_shape, ds.num_classes, config.conv_channels, hidden=config.hidden, mode=config.activation_mode
    )
    metrics = Metrics(class_names=ds.class_names)
    for epoch in range(1, config.epochs + 1):
        for idx in make_batches(yt, config.batch_size, batch_rng):
            try:
                new = sgd_step(config, params, xt[idx], yt[idx])
            except FloatingPointError as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}", params, metrics) from exc
            if not np.all(np.isfinite(new.flat())):
                raise TrainingDiverged(f"epoch {epoch}: parameters became non-finite", params, metrics)
            params = new
        tr_acc, tr_loss, tr_ce = _split_scores(params, xt, yt, config)
        va_acc, va_loss, va_ce = _split_scores(params, xv, yv, config)
        if not np.isfinite(tr_loss):
            raise TrainingDiverged(f"epoch {epoch}: training loss is non-finite", params, metrics)
        row = {"epoch": epoch, "trainAcc": tr_acc, "valAcc": va_acc, "trainLoss": tr_loss,
               "valLoss": va_loss, "trainCE": tr_ce, "valCE": va_ce}
        row.update(layer_stats(params))
        metrics.rows.append(row)
        log.debug("epoch %d train %.3f val %.3f loss %.4f", epoch, tr_acc, va_acc, tr_loss)

    bundle = ModelBundle(params, config.activation_mode, head_kind, None, settings, ds.class_names, config.seed)
    return fit_head(bundle, xt, yt, config, head_rng), metrics


def refit_head(bundle: ModelBundle, ds: Dataset, head_kind: str, config: TrainConfig | None = None,
               inputs: np.ndarray | None = None) -> ModelBundle:
    """Attach a different head to an already trained network."""
    config = config or TrainConfig(seed=bundle.seed)
    mask = ds.splits == "train"
    x = batch_inputs(ds.images[mask], bundle.settings) if inputs is None else inputs[mask]
    rng = Rng(config.seed)
    rng.spawn(), rng.spawn()  # keep the head stream aligned with train()
    return fit_head(replace(bundle, head_kind=head_kind, head=None), x, ds.labels[mask], config, rng.spawn())


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def confusion_matrix(true, pred, num_classes: int) -> np.ndarray:
    m = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(m, (np.asarray(true, dtype=np.int64), np.asarray(pred, dtype=np.int64)), 1)
    return m


def evaluate(bundle: ModelBundle, ds: Dataset, split: str = "test", timed: bool = True) -> Metrics:
    """Accuracy and confusion on one split; per-stage mean latency when ``timed``.

    The timed path classifies one image at a time from the raw pixels.
    """
    part = ds.subset(split) if split else ds
    if len(part) == 0:
        raise ParameterError(f"split {split!r} is empty")
    if timed:
        preds, stage_sums = [], {}
        for img in part.images:
            res = classify_image(bundle, img)
            preds.append(res.label)
            for k, v in res.stage_ms.items():
                stage_sums[k] = stage_sums.get(k, 0.0) + v
        latency = {k: v / len(part) for k, v in stage_sums.items()}
        latency["total"] = sum(latency.values())
        pred = np.array(preds)
    else:
        _, pred = predict_inputs(bundle, batch_inputs(part.images, bundle.settings))
        latency = {}
    cm = confusion_matrix(part.labels, pred, part.num_classes)
    return Metrics(confusion=cm, class_names=part.class_names, latency_ms=latency)
