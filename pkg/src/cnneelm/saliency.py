"""Image-signature saliency and salient patch sampling."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter, maximum_filter, minimum_filter

from .dataio import write_pgm
from .numerics import DimensionError, ParameterError, dct2, idct2

PATCH_COUNT = 9
PATCH_SIZE = 12
DEFAULT_SIGMA = 2.0
DEFAULT_MIN_SEPARATION = 8
DEFAULT_SIM_THRESHOLD = 0.9
SIGN_ZERO_TOL = 1e-12


def image_signature_saliency(img: np.ndarray, sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    """Saliency map from the sign pattern of the image's DCT.

    The map is ``blur(idct2(sign(dct2(img)))**2)`` scaled so its maximum is 1;
    an all-zero map is returned unchanged. Coefficients smaller than
    ``SIGN_ZERO_TOL`` times the largest magnitude are treated as zero.
    """
    if sigma < 0:
        raise ParameterError("sigma must be >= 0")
    coeffs = dct2(img)
    # coefficients at round-off level count as exact zeros, so sign(0) = 0 holds numerically
    coeffs[np.abs(coeffs) <= SIGN_ZERO_TOL * np.abs(coeffs).max()] = 0.0
    recon = idct2(np.sign(coeffs))
    m = recon * recon
    if sigma > 0:
        m = gaussian_filter(m, sigma, mode="reflect")
    peak = m.max()
    if peak <= 0:
        return np.zeros_like(m)
    return m / peak


def patch_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Normalised cross-correlation of two equally sized patches."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"patch shapes differ: {a.shape} vs {b.shape}")
    da = a - a.mean()
    db = b - b.mean()
    na = np.sqrt(np.sum(da * da))
    nb = np.sqrt(np.sum(db * db))
    if na == 0.0 or nb == 0.0:
        return 1.0 if np.array_equal(a, b) else 0.0
    return float(np.clip(np.sum(da * db) / (na * nb), -1.0, 1.0))


@dataclass
class PatchSet:
    patches: np.ndarray  # (k, size, size)
    centers: list[tuple[int, int]]  # (x, y)
    scores: list[float]
    size: int = PATCH_SIZE
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.centers)

    def stacked(self, count: int = PATCH_COUNT, order: str = "score") -> np.ndarray:
        """Fixed-size network input, padded by repeating the top patch.

        ``order="position"`` sorts patches by centre row band (a third of the
        image height each), then by column, before padding.
        """
        k = min(len(self), count)
        idx = list(range(k))
        if order == "position":
            band = max(self.meta.get("height", 48) // 3, 1)
            idx.sort(key=lambda i: (self.centers[i][1] // band, self.centers[i][0], self.centers[i][1]))
        elif order != "score":
            raise ParameterError(f"unknown patch order {order!r}")
        chosen = self.patches[idx]
        if k == count:
            return chosen.copy()
        pad = np.repeat(self.patches[:1], count - k, axis=0)
        return np.concatenate([chosen, pad], axis=0)


def _window(center: tuple[int, int], size: int, h: int, w: int) -> tuple[int, int]:
    cy, cx = center
    top = int(np.clip(cy - size // 2, 0, h - size))
    left = int(np.clip(cx - size // 2, 0, w - size))
    return top, left


def sample_patches(
    img: np.ndarray,
    smap: np.ndarray,
    count: int = PATCH_COUNT,
    size: int = PATCH_SIZE,
    min_separation: float = DEFAULT_MIN_SEPARATION,
    sim_threshold: float = DEFAULT_SIM_THRESHOLD,
) -> PatchSet:
    """Greedily pick distinct patches around saliency local maxima.

    Candidates are strict 3x3 local maxima visited by descending saliency
    (row-major order on ties). A candidate is skipped when its window centre is
    closer than ``min_separation`` to a chosen centre, or when its patch
    correlates above ``sim_threshold`` with a chosen patch. If the map has no
    distinct maximum the single global argmax is used.
    """
    img = np.asarray(img, dtype=np.float64)
    smap = np.asarray(smap, dtype=np.float64)
    if img.shape != smap.shape:
        raise DimensionError("saliency map must match the image size")
    h, w = img.shape
    if size > min(h, w):
        raise DimensionError(f"patch size {size} exceeds image dimensions {img.shape}")
    if count < 1:
        raise ParameterError("count must be >= 1")

    local_max = (smap == maximum_filter(smap, size=3, mode="nearest")) & (
        smap > minimum_filter(smap, size=3, mode="nearest")
    )
    ys, xs = np.nonzero(local_max)
    order = np.lexsort((xs, ys, -smap[ys, xs]))
    candidates = [(int(ys[i]), int(xs[i])) for i in order]
    if not candidates:
        flat = int(np.argmax(smap))
        candidates = [divmod(flat, w)]

    patches, centers, scores = [], [], []
    for peak in candidates:
        top, left = _window(peak, size, h, w)
        cy, cx = top + size // 2, left + size // 2
        if any(np.hypot(cx - ox, cy - oy) < min_separation for ox, oy in centers):
            continue
        patch = img[top : top + size, left : left + size]
        if any(patch_similarity(patch, p) > sim_threshold for p in patches):
            continue
        patches.append(patch.copy())
        centers.append((cx, cy))
        scores.append(float(smap[peak]))
        if len(patches) == count:
            break
    return PatchSet(np.stack(patches), centers, scores, size, {"height": h, "width": w})


def extract_patches(
    img: np.ndarray,
    sigma: float = DEFAULT_SIGMA,
    count: int = PATCH_COUNT,
    size: int = PATCH_SIZE,
    min_separation: float = DEFAULT_MIN_SEPARATION,
    sim_threshold: float = DEFAULT_SIM_THRESHOLD,
) -> PatchSet:
    return sample_patches(img, image_signature_saliency(img, sigma), count, size, min_separation, sim_threshold)


def patch_tensor(images: np.ndarray, **kwargs) -> np.ndarray:
    """Stack padded patch sets for a batch of images: (n, count, size, size)."""
    count = kwargs.get("count", PATCH_COUNT)
    return np.stack([extract_patches(img, **kwargs).stacked(count) for img in images])


def dump_debug(img: np.ndarray, smap: np.ndarray, patches: PatchSet, prefix) -> None:
    """Write ``<prefix>_saliency.pgm`` and a ``<prefix>_patches.json`` sidecar."""
    prefix = Path(prefix)
    write_pgm(prefix.with_name(prefix.name + "_saliency.pgm"), smap)
    half = patches.size // 2
    boxes = [
        {"x": cx - half, "y": cy - half, "w": patches.size, "h": patches.size, "score": s}
        for (cx, cy), s in zip(patches.centers, patches.scores)
    ]
    sidecar = {"width": img.shape[1], "height": img.shape[0], "patches": boxes}
    prefix.with_name(prefix.name + "_patches.json").write_text(json.dumps(sidecar, indent=1) + "\n")
