"""Paired multi-seed comparison of the baseline and modified training recipes."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats

from .dataio import split, synth_dataset
from .numerics import ParameterError, Rng
from .pipeline import PreprocessSettings, batch_inputs
from .trainer import TrainConfig, UpdateRule, train

# Published reference improvement, shown for context only and never asserted.
REFERENCE_DELTA = 0.02

BASELINE_RECIPE = {"update_rule": UpdateRule.BASELINE, "loss_mode": "cross-entropy", "activation_mode": "baseline"}
MODIFIED_RECIPE = {"update_rule": UpdateRule.MODIFIED_CONVENTIONAL, "loss_mode": "log-likelihood", "activation_mode": "flattened"}


def synthetic_split(seed: int, per_class: int = 50, num_classes: int = 6, ratios=(0.8, 0.1, 0.1)):
    """The dataset used for a given seed by the end-to-end checks and experiments."""
    return split(synth_dataset(Rng(seed), per_class, num_classes), ratios, Rng(seed + 1))


@dataclass
class DeltaReport:
    seeds: list[int]
    baseline: list[float]
    modified: list[float]
    mean_delta: float
    ci_low: float
    ci_high: float
    confidence: float
    epochs: int
    per_class: int
    reference_delta: float = REFERENCE_DELTA

    @property
    def deltas(self) -> list[float]:
        return [m - b for b, m in zip(self.baseline, self.modified)]

    def to_json(self) -> str:
        doc = asdict(self)
        doc["deltas"] = self.deltas
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def summary(self) -> str:
        pct = 100 * self.confidence
        return (f"mean validation-accuracy delta (modified - baseline) over {len(self.seeds)} seeds: "
                f"{self.mean_delta:+.4f}, {pct:.0f}% CI [{self.ci_low:+.4f}, {self.ci_high:+.4f}] "
                f"(reference {self.reference_delta:+.2f})")


def mean_ci(values, confidence: float = 0.95) -> tuple[float, float, float]:
    """Mean and Student-t confidence interval; a single value gives a zero-width interval."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ParameterError("no values")
    m = float(v.mean())
    if v.size == 1:
        return m, m, m
    half = float(stats.t.ppf(0.5 + confidence / 2, v.size - 1) * v.std(ddof=1) / np.sqrt(v.size))
    return m, m - half, m + half


def accuracy_delta(seeds=range(10), per_class: int = 50, epochs: int = 100, confidence: float = 0.95,
                   settings: PreprocessSettings = PreprocessSettings(), progress=None) -> DeltaReport:
    """Train both recipes on each seed's dataset; report the paired validation-accuracy delta."""
    seeds = list(seeds)
    if not seeds:
        raise ParameterError("need at least one seed")
    base, mod = [], []
    for s in seeds:
        ds = synthetic_split(s, per_class)
        x = batch_inputs(ds.images, settings)
        accs = []
        for recipe in (BASELINE_RECIPE, MODIFIED_RECIPE):
            _, metrics = train(TrainConfig(seed=s, epochs=epochs, **recipe), ds, "softmax", settings, inputs=x)
            accs.append(metrics.rows[-1]["valAcc"])
        base.append(accs[0])
        mod.append(accs[1])
        if progress:
            progress(s, accs[0], accs[1])
    m, lo, hi = mean_ci(np.subtract(mod, base), confidence)
    return DeltaReport(seeds, base, mod, m, lo, hi, confidence, epochs, per_class)
