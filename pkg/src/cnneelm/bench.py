"""Per-image latency benchmark across classifier heads."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .numerics import ParameterError
from .pipeline import STAGES, ModelBundle, classify_image

# Published reference latencies, shown next to measurements and never asserted.
REFERENCE_MS = {"elm": 65.0, "forest": 113.0}


@dataclass
class HeadBench:
    name: str
    head_kind: str
    activation: str
    mean_ms: float
    median_ms: float
    p95_ms: float
    fps: float
    accuracy: float
    stage_ms: dict[str, float]
    repeat_means: list[float] = field(default_factory=list)

    @property
    def median_of_repeats(self) -> float:
        return float(np.median(self.repeat_means))


@dataclass
class BenchReport:
    entries: list[HeadBench]
    repeats: int
    images: int

    def entry(self, name: str) -> HeadBench:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    def ratio(self, num: str = "elm", den: str = "forest") -> float:
        """Median-over-repeats latency of ``num`` divided by that of ``den``."""
        return self.entry(num).median_of_repeats / self.entry(den).median_of_repeats

    def stage_delta(self, a: str = "elm", b: str = "forest") -> dict[str, float]:
        ea, eb = self.entry(a), self.entry(b)
        out = {s: ea.stage_ms[s] - eb.stage_ms[s] for s in STAGES}
        out["total"] = ea.mean_ms - eb.mean_ms
        return out

    def to_dict(self) -> dict:
        doc = {
            "repeats": self.repeats,
            "images": self.images,
            "entries": [asdict(e) for e in self.entries],
            "referenceMs": REFERENCE_MS,
        }
        names = {e.name for e in self.entries}
        if {"elm", "forest"} <= names:
            doc["elmOverForest"] = self.ratio()
            doc["stageDeltaMs"] = self.stage_delta()
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        """One row per head: accuracy, latency summary and stage means."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["head", "activation", "accuracy", "meanMs", "medianMs", "p95Ms", "fps", *(f"{s}Ms" for s in STAGES)])
        for e in self.entries:
            w.writerow([e.name, e.activation, f"{e.accuracy:.4f}", f"{e.mean_ms:.4f}", f"{e.median_ms:.4f}",
                        f"{e.p95_ms:.4f}", f"{e.fps:.3f}", *(f"{e.stage_ms[s]:.4f}" for s in STAGES)])
        return buf.getvalue()


def run_bench(bundles: dict[str, ModelBundle], images, labels, repeats: int = 5, warmup: bool = True) -> BenchReport:
    """Time end-to-end classification of every image under every bundle.

    Bundles are interleaved per image so that drift in machine load hits all
    heads alike. The optional warm-up pass is not recorded. Quantiles use
    linear interpolation; with one sample every quantile is that sample.
    """
    if not bundles:
        raise ParameterError("no models to benchmark")
    if repeats < 1:
        raise ParameterError("repeats must be >= 1")
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise ParameterError("no images to benchmark")
    names = list(bundles)
    if warmup:
        for img in images[: min(len(images), 5)]:
            for n in names:
                classify_image(bundles[n], img)

    totals = {n: np.zeros((repeats, len(images))) for n in names}
    stages = {n: {s: 0.0 for s in STAGES} for n in names}
    correct = {n: 0 for n in names}
    for r in range(repeats):
        for i, img in enumerate(images):
            for n in names:
                res = classify_image(bundles[n], img)
                totals[n][r, i] = res.total_ms
                for s in STAGES:
                    stages[n][s] += res.stage_ms[s]
                if r == 0:
                    correct[n] += int(res.label == labels[i])

    count = repeats * len(images)
    entries = []
    for n in names:
        t = totals[n]
        mean = float(t.mean())
        entries.append(HeadBench(
            name=n,
            head_kind=bundles[n].head_kind,
            activation=bundles[n].activation.value,
            mean_ms=mean,
            median_ms=float(np.median(t)),
            p95_ms=float(np.percentile(t, 95)),
            fps=1000.0 / mean,
            accuracy=correct[n] / len(images),
            stage_ms={s: v / count for s, v in stages[n].items()},
            repeat_means=[float(v) for v in t.mean(axis=1)],
        ))
    return BenchReport(entries, repeats, len(images))
