"""Block-matching optical flow and peak-frame detection."""

from __future__ import annotations

import json
import re
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import read_pgm, write_pgm
from .numerics import DimensionError, ParameterError


@dataclass(frozen=True)
class FlowField:
    """Per-block displacement; ``dx``/``dy`` have shape (block rows, block cols)."""

    dx: np.ndarray
    dy: np.ndarray
    block_size: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.dx.shape


@dataclass
class FrameSequence:
    frames: list[np.ndarray]
    fps: float = 30.0

    def __post_init__(self):
        if not self.frames:
            raise ParameterError("a frame sequence needs at least one frame")
        if self.fps <= 0:
            raise ParameterError("fps must be > 0")
        shape = self.frames[0].shape
        if any(f.shape != shape for f in self.frames):
            raise DimensionError("all frames must have the same dimensions")

    def __len__(self) -> int:
        return len(self.frames)


def _candidate_offsets(radius: int) -> list[tuple[int, int]]:
    # tie-break order: smallest norm, then (dy, dx) lexicographic
    offs = [(dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)]
    offs.sort(key=lambda o: (o[0] ** 2 + o[1] ** 2, o[0], o[1]))
    return offs


def optical_flow(a: np.ndarray, b: np.ndarray, block_size: int = 8, radius: int = 4) -> FlowField:
    """Match each block of ``a`` to the window of ``b`` minimising the SAD.

    A block at ``a[y:y+s, x:x+s]`` reports ``(dx, dy)`` when it best matches
    ``b[y+dy:y+dy+s, x+dx:x+dx+s]``. Pixels outside either image are zero.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"frame sizes differ: {a.shape} vs {b.shape}")
    if block_size < 4 or radius < 1:
        raise ParameterError("block_size must be >= 4 and radius >= 1")
    h, w = a.shape
    gh, gw = -(-h // block_size), -(-w // block_size)
    ph, pw = gh * block_size, gw * block_size
    pa = np.zeros((ph, pw))
    pa[:h, :w] = a
    pb = np.zeros((ph + 2 * radius, pw + 2 * radius))
    pb[radius : radius + h, radius : radius + w] = b

    def blocks(img):
        return img.reshape(gh, block_size, gw, block_size)

    ref = blocks(pa)
    best = np.full((gh, gw), np.inf)
    bdx = np.zeros((gh, gw), dtype=np.int64)
    bdy = np.zeros((gh, gw), dtype=np.int64)
    for dy, dx in _candidate_offsets(radius):
        win = pb[radius + dy : radius + dy + ph, radius + dx : radius + dx + pw]
        sad = np.abs(blocks(win) - ref).sum(axis=(1, 3))
        better = sad < best
        best[better] = sad[better]
        bdx[better] = dx
        bdy[better] = dy
    return FlowField(bdx, bdy, block_size)


def motion_energy(flow: FlowField) -> float:
    """Mean Euclidean magnitude of the block displacements."""
    if flow.dx.size == 0:
        return 0.0
    return float(np.mean(np.hypot(flow.dx, flow.dy)))


def frame_energies(seq: FrameSequence, block_size: int = 8, radius: int = 4) -> list[float]:
    """Energy of each frame's flow relative to frame 0 (entry 0 is always 0)."""
    ref = seq.frames[0]
    return [0.0] + [motion_energy(optical_flow(ref, f, block_size, radius)) for f in seq.frames[1:]]


def detect_peak_frame(seq: FrameSequence, block_size: int = 8, radius: int = 4) -> int:
    """Index of the frame displaced most from the first (neutral) frame.

    Returns 0 when the sequence has a single frame or no motion at all.
    """
    if len(seq) < 2:
        warnings.warn("single-frame sequence; returning frame 0", stacklevel=2)
        return 0
    energies = frame_energies(seq, block_size, radius)
    peak = int(np.argmax(energies[1:])) + 1
    if energies[peak] <= 0.0:
        warnings.warn("no motion detected", stacklevel=2)
        return 0
    return peak


_FRAME_RE = re.compile(r"frame_(\d+)\.pgm$")


def load_frame_sequence(directory) -> FrameSequence:
    """Load ``frame_NNNN.pgm`` files in numeric order plus ``manifest.json``."""
    directory = Path(directory)
    files = sorted(
        (int(m.group(1)), p) for p in directory.iterdir() if (m := _FRAME_RE.search(p.name))
    )
    if not files:
        raise FileNotFoundError(f"no frame_*.pgm files in {directory}")
    fps = 30.0
    manifest = directory / "manifest.json"
    if manifest.exists():
        fps = float(json.loads(manifest.read_text())["fps"])
    return FrameSequence([read_pgm(p) for _, p in files], fps)


def save_frame_sequence(seq: FrameSequence, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(seq.frames, start=1):
        write_pgm(directory / f"frame_{i:04d}.pgm", frame)
    (directory / "manifest.json").write_text(json.dumps({"fps": seq.fps}) + "\n")
    return directory


def expression_frame(amplitude: float, size: int = 48) -> np.ndarray:
    """Schematic face whose mouth stretches and eyes lift with ``amplitude``."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.full((size, size), 0.6)
    mouth = ((xx - 24) / (8 + amplitude)) ** 2 + ((yy - 34) / (1.5 + 1.2 * amplitude)) ** 2
    img[mouth <= 1] = 0.05
    for side in (-1, 1):
        eye = ((xx - 24 - side * 9) / 3.5) ** 2 + ((yy - 16 + 0.8 * amplitude) / 2) ** 2
        img[eye <= 1] = 0.1
    return img


def scripted_sequence(amplitudes, fps: float = 23.0) -> FrameSequence:
    return FrameSequence([expression_frame(a) for a in amplitudes], fps)
