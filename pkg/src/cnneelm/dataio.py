"""Dataset ingestion, preprocessing and the PCA false-positive filter.

Images are 2-D ``float64`` arrays with values in [0, 1], indexed ``[row, col]``.
"""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .numerics import DimensionError, PcaModel, ParameterError, Rng, pca_project, pca_reconstruct

log = logging.getLogger(__name__)

IMAGE_SIZE = 48
DEFAULT_CLASSES = ("happy", "sad", "disgust", "fear", "surprise", "neutral")
SEVEN_CLASSES = DEFAULT_CLASSES + ("angry",)
SPLITS = ("train", "validation", "test")
USAGE_TO_SPLIT = {"Training": "train", "PublicTest": "validation", "PrivateTest": "test"}


class LabelError(ValueError):
    pass


class RowError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class ImageReadError(OSError):
    def __init__(self, path, message: str):
        super().__init__(f"{path}: {message}")
        self.path = Path(path)


@dataclass
class Dataset:
    images: np.ndarray  # (n, 48, 48)
    labels: np.ndarray  # (n,) int
    splits: np.ndarray  # (n,) str, one of SPLITS
    class_names: tuple[str, ...] = DEFAULT_CLASSES
    sources: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.splits = np.asarray(self.splits, dtype=object)
        self.class_names = tuple(self.class_names)
        n = len(self.labels)
        if self.images.shape[0] != n or len(self.splits) != n:
            raise DimensionError("images, labels and splits must have equal length")
        if n and self.images.shape[1:] != (IMAGE_SIZE, IMAGE_SIZE):
            raise DimensionError(f"images must be {IMAGE_SIZE}x{IMAGE_SIZE}, got {self.images.shape[1:]}")
        if len(set(self.class_names)) != len(self.class_names):
            raise LabelError("duplicate class names")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise LabelError("label index out of range")
        bad = set(self.splits.tolist()) - set(SPLITS)
        if bad:
            raise ValueError(f"unknown split tags {sorted(bad)}")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, split: str) -> "Dataset":
        mask = self.splits == split
        sources = [s for s, m in zip(self.sources, mask) if m] if self.sources else []
        return Dataset(self.images[mask], self.labels[mask], self.splits[mask], self.class_names, sources)

    def class_counts(self, split: str | None = None) -> np.ndarray:
        labels = self.labels if split is None else self.labels[self.splits == split]
        return np.bincount(labels, minlength=self.num_classes)


# ---------------------------------------------------------------------------
# Image files
# ---------------------------------------------------------------------------


def _pgm_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated header")
        tokens.append(data[start:pos])
    return tokens, pos + 1  # single whitespace byte separates header from raster


def read_pgm(path) -> np.ndarray:
    """Read a binary (P5) PGM with maxval <= 255."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise ImageReadError(path, str(exc)) from exc
    try:
        (magic, w, h, maxval), start = _pgm_tokens(data, 4)
        if magic != b"P5":
            raise ValueError(f"unsupported magic {magic!r}")
        w, h, maxval = int(w), int(h), int(maxval)
        if w < 1 or h < 1 or not 0 < maxval <= 255:
            raise ValueError("bad header values")
        raster = data[start : start + w * h]
        if len(raster) != w * h:
            raise ValueError(f"expected {w * h} pixel bytes, found {len(raster)}")
    except ValueError as exc:
        raise ImageReadError(path, f"corrupt PGM: {exc}") from exc
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w).astype(np.float64) / maxval


def write_pgm(path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    raster = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + raster.tobytes())


def read_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        return read_pgm(path)
    try:
        from PIL import Image
    except ImportError as exc:  # pragma: no cover
        raise ImageReadError(path, "PNG support requires Pillow") from exc
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    except OSError as exc:
        raise ImageReadError(path, str(exc)) from exc


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------


def resize_bilinear(img: np.ndarray, w: int, h: int) -> np.ndarray:
    """Bilinear resize using pixel-centre alignment and edge clamping."""
    if w < 1 or h < 1:
        raise DimensionError("target dimensions must be >= 1")
    img = np.asarray(img, dtype=np.float64)
    src_h, src_w = img.shape
    if (src_h, src_w) == (h, w):
        return img.copy()

    def axis(n_out, n_in):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis(h, src_h)
    x0, x1, fx = axis(w, src_w)
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bottom = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    out = top * (1 - fy)[:, None] + bottom * fy[:, None]
    return np.clip(out, 0.0, 1.0)


def center_crop_square(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    s = min(h, w)
    top, left = (h - s) // 2, (w - s) // 2
    return img[top : top + s, left : left + s]


def preprocess(img: np.ndarray, size: int = IMAGE_SIZE) -> np.ndarray:
    """Centre-crop to square and scale to ``size`` x ``size``."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=2)
    if img.shape != (size, size):
        img = resize_bilinear(center_crop_square(img), size, size)
    return np.clip(img, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Loaders
# ---------------------------------------------------------------------------


def load_directory_dataset(root, class_names: Sequence[str] = DEFAULT_CLASSES) -> Dataset:
    """Load ``<root>/<class>/<file>.pgm|png``; every sample is tagged ``train``."""
    root = Path(root)
    class_names = tuple(class_names)
    index = {name: i for i, name in enumerate(class_names)}
    dirs = sorted(p for p in root.iterdir() if p.is_dir())
    for d in dirs:
        if d.name not in index:
            raise LabelError(f"unknown class directory {d.name!r} in {root}")
    images, labels, sources = [], [], []
    for d in dirs:
        files = sorted(p for p in d.iterdir() if p.suffix.lower() in (".pgm", ".png"))
        if not files:
            warnings.warn(f"class directory {d} is empty", stacklevel=2)
        for f in files:
            images.append(preprocess(read_image(f)))
            labels.append(index[d.name])
            sources.append(str(f))
    n = len(labels)
    arr = np.stack(images) if images else np.zeros((0, IMAGE_SIZE, IMAGE_SIZE))
    return Dataset(arr, labels, ["train"] * n, class_names, sources)


def load_csv_dataset(path, class_names: Sequence[str] = DEFAULT_CLASSES) -> Dataset:
    """Load a FER2013-style ``emotion,pixels,Usage`` CSV."""
    class_names = tuple(class_names)
    images, labels, splits = [], [], []
    n_pix = IMAGE_SIZE * IMAGE_SIZE
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["emotion", "pixels", "Usage"]:
            raise RowError(1, f"expected header 'emotion,pixels,Usage', got {header}")
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != 3:
                raise RowError(line, f"expected 3 columns, got {len(row)}")
            try:
                label = int(row[0])
                pixels = np.array(row[1].split(), dtype=np.float64)
            except ValueError as exc:
                raise RowError(line, str(exc)) from exc
            if label < 0 or label >= len(class_names):
                raise LabelError(f"line {line}: emotion index {label} outside 0..{len(class_names) - 1}")
            if pixels.size != n_pix:
                raise RowError(line, f"expected {n_pix} pixels, got {pixels.size}")
            if pixels.min() < 0 or pixels.max() > 255:
                raise RowError(line, "pixel values must lie in 0..255")
            usage = row[2].strip()
            if usage not in USAGE_TO_SPLIT:
                raise RowError(line, f"unknown Usage {usage!r}")
            images.append(pixels.reshape(IMAGE_SIZE, IMAGE_SIZE) / 255.0)
            labels.append(label)
            splits.append(USAGE_TO_SPLIT[usage])
    arr = np.stack(images) if images else np.zeros((0, IMAGE_SIZE, IMAGE_SIZE))
    return Dataset(arr, labels, splits, class_names)


def save_archive(ds: Dataset, out_dir) -> Path:
    """Write ``images/NNNNN.pgm`` plus ``index.json``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (img, label, split) in enumerate(zip(ds.images, ds.labels, ds.splits)):
        name = f"images/{i:05d}.pgm"
        write_pgm(out / name, img)
        entries.append({"file": name, "label": int(label), "split": str(split)})
    index = {"class_names": list(ds.class_names), "samples": entries}
    (out / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True) + "\n")
    return out


def load_archive(root) -> Dataset:
    root = Path(root)
    try:
        index = json.loads((root / "index.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ImageReadError(root / "index.json", str(exc)) from exc
    try:
        samples = index["samples"]
        names = index["class_names"]
        files = [s["file"] for s in samples]
        labels = [s["label"] for s in samples]
        splits = [s["split"] for s in samples]
    except (KeyError, TypeError) as exc:
        raise ImageReadError(root / "index.json", f"malformed index: missing {exc}") from exc
    images = [read_pgm(root / f) for f in files]
    arr = np.stack(images) if images else np.zeros((0, IMAGE_SIZE, IMAGE_SIZE))
    return Dataset(arr, labels, splits, names, files)


# ---------------------------------------------------------------------------
# PCA filter
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FilterReport:
    error: float
    kept: bool
    threshold: float


def reconstruction_errors(imgs, model: PcaModel) -> np.ndarray:
    """Mean squared pixel error between each image and its PCA reconstruction."""
    x = np.asarray(imgs, dtype=np.float64).reshape(len(imgs), -1)
    if x.shape[1] != model.dim:
        raise DimensionError(f"model dimension {model.dim} does not match image size {x.shape[1]}")
    rec = pca_reconstruct(model, pca_project(model, x))
    return np.mean((x - rec) ** 2, axis=1)


def percentile_threshold(errors: Iterable[float], percentile: float = 95.0) -> float:
    return float(np.percentile(np.asarray(list(errors), dtype=np.float64), percentile))


def pca_filter(imgs, model: PcaModel, threshold: float) -> list[FilterReport]:
    if threshold <= 0:
        raise ParameterError("threshold must be > 0")
    errs = reconstruction_errors(imgs, model)
    return [FilterReport(float(e), bool(e <= threshold), float(threshold)) for e in errs]


# ---------------------------------------------------------------------------
# Synthetic faces
# ---------------------------------------------------------------------------

# (mouth curvature, mouth opening, eye openness, brow tilt, brow height)
# Positive curvature lifts the mouth corners; positive tilt raises inner brow ends.
EXPRESSION_PARAMS = {
    "happy": (3.5, 1.2, 1.8, 0.0, 0.0),
    "sad": (-3.0, 0.8, 1.4, 0.45, 0.0),
    "disgust": (-1.2, 0.8, 0.7, -0.45, -1.0),
    "fear": (-2.0, 2.0, 3.0, 0.7, 0.8),
    "surprise": (0.0, 5.0, 3.2, 0.0, 3.0),
    "neutral": (0.0, 0.7, 2.0, 0.0, 0.0),
    "angry": (-1.0, 1.0, 1.6, -0.6, -1.5),
}


def _ink(dist: np.ndarray, width: float) -> np.ndarray:
    """Anti-aliased coverage for a stroke of half-width ``width``."""
    return np.clip(width + 0.5 - dist, 0.0, 1.0)


def render_face(
    mouth_curve: float,
    mouth_open: float,
    eye_open: float,
    brow_tilt: float,
    brow_raise: float,
    *,
    dx: float = 0.0,
    dy: float = 0.0,
    size: int = IMAGE_SIZE,
) -> np.ndarray:
    """Draw a schematic frontal face; geometry is in 48-pixel units."""
    s = size / IMAGE_SIZE
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / s
    cx, cy = 24.0 + dx, 25.0 + dy
    img = np.full((size, size), 0.12)

    head = ((xx - cx) / 34.0) ** 2 + ((yy - cy) / 40.0) ** 2
    img = np.where(head <= 1.0, 0.62, img)
    img += 0.08 * np.clip(1.0 - head, 0, 1)

    def paint(mask, value):
        nonlocal img
        img = img * (1 - mask) + value * mask

    for side in (-1.0, 1.0):
        ex, ey = cx + side * 7.0, cy - 6.0
        eye = ((xx - ex) / 3.6) ** 2 + ((yy - ey) / max(eye_open, 0.3)) ** 2
        paint(np.clip((1.0 - eye) * 3.0, 0, 1), 0.08)
        # brow: short segment, inner end lifted by brow_tilt
        bx = np.clip(xx - ex, -4.0, 4.0)
        by = ey - 5.0 - brow_raise + side * bx * brow_tilt * 0.5
        inside = np.abs(xx - ex) <= 4.0
        paint(np.where(inside, _ink(np.abs(yy - by), 0.7), 0.0), 0.1)

    # nose
    paint(_ink(np.hypot(xx - cx, np.maximum(np.abs(yy - (cy + 1.0)) - 3.0, 0.0)), 0.5) * 0.6, 0.3)

    # nasolabial folds, deeper as the mouth curves, and a chin crease
    fold_ink = 0.35 + 0.08 * min(abs(mouth_curve), 3.0)
    for side in (-1.0, 1.0):
        t = np.clip((yy - (cy + 2.0)) / 9.0, 0.0, 1.0)
        fx = cx + side * (5.0 + 5.0 * t)
        seg = (yy >= cy + 2.0) & (yy <= cy + 11.0)
        paint(np.where(seg, _ink(np.abs(xx - fx), 0.5), 0.0) * fold_ink, 0.2)
    paint(_ink(np.where(np.abs(xx - cx) <= 3.0, np.abs(yy - (cy + 19.0)), 9.0), 0.5) * 0.5, 0.25)

    # mouth: upper lip curve plus an opening below it
    mx = np.clip(xx - cx, -8.0, 8.0)
    upper = cy + 10.0 - mouth_curve * (mx / 8.0) ** 2
    in_span = np.abs(xx - cx) <= 8.0
    taper = 1.0 - (mx / 8.0) ** 2
    lower = upper + mouth_open * taper
    fill = np.where(in_span & (yy >= upper) & (yy <= lower), 1.0, 0.0)
    edge = np.maximum(_ink(np.abs(yy - upper), 0.6), _ink(np.abs(yy - lower), 0.6))
    paint(np.where(in_span, np.maximum(fill, edge), 0.0), 0.05)
    return np.clip(img, 0.0, 1.0)


def synth_dataset(
    rng: Rng,
    per_class: int,
    num_classes: int = 6,
    *,
    jitter: float = 0.5,
    noise: float = 0.03,
) -> Dataset:
    """Procedural faces whose geometry is a function of class plus seeded jitter."""
    if per_class < 1:
        raise ParameterError("per_class must be >= 1")
    names = SEVEN_CLASSES[:num_classes] if num_classes <= 7 else tuple(f"class{i}" for i in range(num_classes))
    images, labels = [], []
    for c, name in enumerate(names):
        if name in EXPRESSION_PARAMS:
            base = EXPRESSION_PARAMS[name]
        else:  # beyond the named set: spread parameters deterministically
            base = (np.cos(c) * 3, 1 + c % 4, 1 + c % 3, 0.2 * (c % 5 - 2), c % 3 - 1.0)
        for _ in range(per_class):
            curve, opening, eye, tilt, raise_ = base
            img = render_face(
                curve + jitter * rng.uniform(-0.5, 0.5),
                max(opening + jitter * rng.uniform(-0.3, 0.3), 0.3),
                max(eye + jitter * rng.uniform(-0.3, 0.3), 0.3),
                tilt + jitter * rng.uniform(-0.1, 0.1),
                raise_ + jitter * rng.uniform(-0.4, 0.4),
                dx=jitter * rng.uniform(-1.5, 1.5),
                dy=jitter * rng.uniform(-1.5, 1.5),
            )
            gain = 1.0 + jitter * rng.uniform(-0.1, 0.1)
            if noise > 0:
                img = img * gain + rng.uniform(-noise, noise, size=img.shape)
            images.append(np.clip(img, 0.0, 1.0))
            labels.append(c)
    n = len(labels)
    return Dataset(np.stack(images), labels, ["train"] * n, names)


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------


def split(ds: Dataset, ratios: tuple[float, float, float], rng: Rng) -> Dataset:
    """Stratified per-class shuffle split into train/validation/test."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ParameterError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    n_parts = sum(r > 0 for r in ratios)
    tags = np.empty(len(ds), dtype=object)
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == c)
        if idx.size == 0:
            continue
        idx = idx[rng.permutation(idx.size)]
        if idx.size < n_parts:
            warnings.warn(f"class {ds.class_names[c]!r} has {idx.size} samples; all assigned to train", stacklevel=2)
            tags[idx] = "train"
            continue
        n_train = int(round(ratios[0] * idx.size))
        n_val = int(round(ratios[1] * idx.size))
        n_val = min(n_val, idx.size - n_train)
        tags[idx[:n_train]] = "train"
        tags[idx[n_train : n_train + n_val]] = "validation"
        tags[idx[n_train + n_val :]] = "test"
    return Dataset(ds.images, ds.labels, tags, ds.class_names, list(ds.sources))
