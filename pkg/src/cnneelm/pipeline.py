"""Image -> patch stack -> network -> head, with per-stage timing."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataio import DEFAULT_CLASSES, IMAGE_SIZE, preprocess
from .heads import ElmModel, ForestHead, elm_hidden, forest_predict
from .network import ActivationMode, ForwardTrace, NetworkParams, forward, softmax
from .saliency import (
    DEFAULT_MIN_SEPARATION,
    DEFAULT_SIGMA,
    DEFAULT_SIM_THRESHOLD,
    PATCH_COUNT,
    PATCH_SIZE,
    extract_patches,
)

HEAD_KINDS = ("softmax", "forest", "elm")
STAGES = ("preprocess", "saliency", "forward", "head")


@dataclass(frozen=True)
class PreprocessSettings:
    patch_count: int = PATCH_COUNT
    patch_size: int = PATCH_SIZE
    sigma: float = DEFAULT_SIGMA
    min_separation: float = DEFAULT_MIN_SEPARATION
    sim_threshold: float = DEFAULT_SIM_THRESHOLD
    image_size: int = IMAGE_SIZE
    standardize: bool = True
    patch_order: str = "score"

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (self.patch_count, self.patch_size, self.patch_size)


def standardize_stack(x: np.ndarray) -> np.ndarray:
    """Zero mean, unit variance per sample over all patches; constant stacks map to zero."""
    axes = tuple(range(x.ndim - 3, x.ndim))
    mean = x.mean(axis=axes, keepdims=True)
    std = x.std(axis=axes, keepdims=True)
    # round-off leaves a tiny std on constant stacks
    flat = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
    return np.where(flat, 0.0, (x - mean) / np.where(flat, 1.0, std))


def image_input(img: np.ndarray, settings: PreprocessSettings = PreprocessSettings()) -> np.ndarray:
    """Network input (count, size, size) for one already-preprocessed face."""
    patches = extract_patches(
        img,
        settings.sigma,
        settings.patch_count,
        settings.patch_size,
        settings.min_separation,
        settings.sim_threshold,
    )
    x = patches.stacked(settings.patch_count, settings.patch_order)
    return standardize_stack(x) if settings.standardize else x


def batch_inputs(images, settings: PreprocessSettings = PreprocessSettings()) -> np.ndarray:
    return np.stack([image_input(img, settings) for img in images])


@dataclass
class ModelBundle:
    network: NetworkParams
    activation: ActivationMode
    head_kind: str
    head: ForestHead | ElmModel | None
    settings: PreprocessSettings = field(default_factory=PreprocessSettings)
    class_names: tuple[str, ...] = DEFAULT_CLASSES
    seed: int = 0

    def __post_init__(self):
        if self.head_kind not in HEAD_KINDS:
            raise ValueError(f"unknown head kind {self.head_kind!r}")
        self.activation = ActivationMode(self.activation)
        self.class_names = tuple(self.class_names)


def head_scores(bundle: ModelBundle, trace: ForwardTrace) -> np.ndarray:
    """Class scores (n, C) from the bundle's head."""
    if bundle.head_kind == "softmax":
        return softmax(trace.logits)
    if bundle.head_kind == "forest":
        return forest_predict(bundle.head, trace.fc_outputs)
    return elm_hidden(bundle.head, trace.features) @ bundle.head.output_weights


def predict_inputs(bundle: ModelBundle, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Scores and labels for prepared network inputs."""
    scores = head_scores(bundle, forward(bundle.network, x, bundle.activation))
    return scores, np.argmax(scores, axis=1)


@dataclass
class Classification:
    label: int
    scores: np.ndarray
    stage_ms: dict[str, float]
    total_ms: float


def classify_image(bundle: ModelBundle, img: np.ndarray) -> Classification:
    """Classify one raw grayscale image, timing each stage."""
    clock = time.perf_counter
    t0 = clock()
    face = preprocess(img, bundle.settings.image_size)
    t1 = clock()
    x = image_input(face, bundle.settings)
    t2 = clock()
    trace = forward(bundle.network, x, bundle.activation)
    t3 = clock()
    scores = head_scores(bundle, trace)[0]
    label = int(np.argmax(scores))
    t4 = clock()
    stage_ms = {
        "preprocess": (t1 - t0) * 1e3,
        "saliency": (t2 - t1) * 1e3,
        "forward": (t3 - t2) * 1e3,
        "head": (t4 - t3) * 1e3,
    }
    return Classification(label, scores, stage_ms, (t4 - t0) * 1e3)
