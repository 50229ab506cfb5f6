"""Radar-frame container I/O, scaling, rain filtering, sequence assembly and a
synthetic advected-rain generator.

Frames are 5-minute accumulations in mm. The on-disk container is::

    "SPTK" | version u32 | H u32 | W u32 | n_frames u64 | first_timestamp i64
    | step_minutes u32 | reserved u32 | float32 payload | FNV-1a-64 checksum u64

all little-endian, payload frame-major and row-major.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .hashing import fnv1a64

MAGIC = b"SPTK"
VERSION = 1
STEP_MINUTES = 5
HEADER = struct.Struct("<4sIIIQqII")
CHECKSUM = struct.Struct("<Q")
RAIN_THRESHOLD_MM_PER_H = 0.5


class DataError(Exception):
    """Dataset or container problem (bad file, empty split, invalid frames)."""


class BadMagicError(DataError):
    pass


class TruncatedError(DataError):
    pass


class ChecksumError(DataError):
    pass


def mm_per_h_to_mm_per_5min(value: float) -> float:
    return value / 12.0


# ---------------------------------------------------------------------------
# scaling


@dataclass(frozen=True)
class ScalingParams:
    min_val: float
    max_val: float

    def __post_init__(self):
        if not self.max_val > self.min_val:
            raise DataError(f"scaling needs max > min, got min={self.min_val}, max={self.max_val}")


def minmax_scale(frame, params: ScalingParams) -> np.ndarray:
    return (np.asarray(frame, dtype=np.float64) - params.min_val) / (params.max_val - params.min_val)


def inverse_minmax(scaled, params: ScalingParams) -> np.ndarray:
    return np.asarray(scaled, dtype=np.float64) * (params.max_val - params.min_val) + params.min_val


def qualifies(frame, threshold_mm_per_h: float = RAIN_THRESHOLD_MM_PER_H,
              min_fraction: float = 0.5) -> bool:
    """True iff the fraction of pixels at or above the threshold exceeds ``min_fraction``."""
    frame = np.asarray(frame)
    wet = np.count_nonzero(frame >= mm_per_h_to_mm_per_5min(threshold_mm_per_h))
    return wet / frame.size > min_fraction


# ---------------------------------------------------------------------------
# container


@dataclass
class Container:
    frames: np.ndarray  # [n, H, W] float32, mm/5min
    first_timestamp: int = 0
    step_minutes: int = STEP_MINUTES

    @property
    def timestamps(self) -> np.ndarray:
        return self.first_timestamp + self.step_minutes * np.arange(len(self.frames), dtype=np.int64)


def save_container(frames, path, first_timestamp: int = 0) -> None:
    frames = np.asarray(frames, dtype="<f4")
    if frames.size == 0 and frames.ndim < 3:
        frames = frames.reshape(0, 0, 0)
    if frames.ndim == 2:
        frames = frames[None]
    if frames.ndim != 3:
        raise DataError(f"frames must be [n, H, W], got {frames.shape}")
    n, h, w = frames.shape
    if first_timestamp % STEP_MINUTES:
        raise DataError(f"first timestamp {first_timestamp} is not a multiple of {STEP_MINUTES} minutes")
    payload = np.ascontiguousarray(frames).tobytes()
    header = HEADER.pack(MAGIC, VERSION, h, w, n, int(first_timestamp), STEP_MINUTES, 0)
    Path(path).write_bytes(header + payload + CHECKSUM.pack(fnv1a64(payload)))


def load_container(path) -> Container:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a radar container (bad magic)")
    if len(raw) < HEADER.size:
        raise TruncatedError(f"{path}: header truncated")
    _, version, h, w, n, first_ts, step, _ = HEADER.unpack_from(raw)
    if version != VERSION:
        raise DataError(f"{path}: unsupported container version {version}")
    n_bytes = n * h * w * 4
    if len(raw) < HEADER.size + n_bytes + CHECKSUM.size:
        raise TruncatedError(f"{path}: payload truncated ({len(raw)} bytes, header promises {n} frames)")
    payload = raw[HEADER.size:HEADER.size + n_bytes]
    (stored,) = CHECKSUM.unpack_from(raw, HEADER.size + n_bytes)
    if stored != fnv1a64(payload):
        raise ChecksumError(f"{path}: payload checksum mismatch")
    frames = np.frombuffer(payload, dtype="<f4").reshape(n, h, w).copy()
    return Container(frames, first_ts, step)


# ---------------------------------------------------------------------------
# manifests and sequences


@dataclass
class DatasetManifest:
    path: str
    n_frames: int
    height: int
    width: int
    scaling: ScalingParams
    split: str
    start: int  # first container index of this split
    stop: int  # one past the last index
    qualifying: List[int] = field(default_factory=list)  # container indices of qualifying frames

    def __post_init__(self):
        q = self.qualifying
        if any(b <= a for a, b in zip(q, q[1:])):
            raise DataError("qualifying indices must be strictly increasing")
        if q and (q[0] < self.start or q[-1] >= self.stop):
            raise DataError("qualifying index outside the split range")


@dataclass
class SequenceSample:
    input: np.ndarray  # [T, H, W] scaled
    target: np.ndarray  # [T, H, W] scaled
    anchor_timestamp: int
    index: int  # container index of the first input frame


def split_manifests(path, container: Container, train_fraction: float = 0.8,
                    threshold_mm_per_h: float = RAIN_THRESHOLD_MM_PER_H, min_fraction: float = 0.5,
                    scaling: Optional[ScalingParams] = None) -> Tuple[DatasetManifest, DatasetManifest]:
    """Chronological train/test partition; scaling max comes from the training split only."""
    frames = container.frames
    n = len(frames)
    if not 0.0 <= train_fraction <= 1.0:
        raise DataError(f"train fraction must lie in [0, 1], got {train_fraction}")
    cut = int(np.floor(n * train_fraction))
    if scaling is None:
        if cut == 0:
            raise DataError("training split is empty; cannot derive scaling")
        scaling = ScalingParams(0.0, float(frames[:cut].max()))
    ok = [i for i in range(n) if qualifies(frames[i], threshold_mm_per_h, min_fraction)]
    _, h, w = frames.shape if n else (0, 0, 0)
    make = lambda split, a, b: DatasetManifest(str(path), n, h, w, scaling, split, a, b,
                                               [i for i in ok if a <= i < b])
    return make("train", 0, cut), make("test", cut, n)


def build_sequences(manifest: DatasetManifest, T: int, stride: int = 1,
                    container: Optional[Container] = None) -> List[SequenceSample]:
    """Windows of 2T contiguous, qualifying frames inside the split, ordered by anchor time."""
    if T < 1 or stride < 1:
        raise ValueError(f"T and stride must be >= 1, got T={T}, stride={stride}")
    if container is None:
        container = load_container(manifest.path)
    ts = container.timestamps
    good = np.zeros(manifest.n_frames, dtype=bool)
    good[manifest.qualifying] = True
    out = []
    for s in range(manifest.start, manifest.stop - 2 * T + 1, stride):
        window = slice(s, s + 2 * T)
        if not good[window].all():
            continue
        if np.any(np.diff(ts[window]) != STEP_MINUTES):
            continue
        seq = minmax_scale(container.frames[window], manifest.scaling)
        out.append(SequenceSample(seq[:T], seq[T:], int(ts[s]), s))
    return out


def stack_batch(samples: Sequence[SequenceSample]) -> Tuple[np.ndarray, np.ndarray]:
    return (np.stack([s.input for s in samples]), np.stack([s.target for s in samples]))


# ---------------------------------------------------------------------------
# synthetic rain


@dataclass(frozen=True)
class SynthConfig:
    n_frames: int = 200
    height: int = 128
    width: int = 128
    n_cells: int = 30
    velocity: Tuple[float, float] = (1.0, 0.5)  # px/frame (x, y)
    cell_sigma: float = 60.0  # px
    intensity: float = 0.6  # peak mm/5min
    noise_sigma: float = 0.002  # mm/5min
    velocity_jitter: float = 0.0  # px/frame, per-cell
    first_timestamp: int = 0


def synth_generate(cfg: SynthConfig, seed: int) -> np.ndarray:
    """Sum of isotropic Gaussian cells advected by a shared velocity, plus clipped noise.

    Cells are scattered over the region swept upwind of the frame during the
    run, so rain keeps entering the domain at a steady rate.
    """
    if cfg.height % 32 or cfg.width % 32:
        raise DataError(f"H, W must be divisible by 32; got {cfg.height}x{cfg.width}")
    rng = np.random.default_rng(seed)
    n, h, w = cfg.n_frames, cfg.height, cfg.width
    vx, vy = cfg.velocity
    margin = 3.0 * cfg.cell_sigma
    span = lambda v, size: (min(0.0, -v * n) - margin, max(size, size - v * n) + margin)
    x0 = rng.uniform(*span(vx, w), size=cfg.n_cells)
    y0 = rng.uniform(*span(vy, h), size=cfg.n_cells)
    amp = cfg.intensity * rng.uniform(0.5, 1.0, size=cfg.n_cells)
    sig = cfg.cell_sigma * rng.uniform(0.7, 1.3, size=cfg.n_cells)
    jx = cfg.velocity_jitter * rng.standard_normal(cfg.n_cells)
    jy = cfg.velocity_jitter * rng.standard_normal(cfg.n_cells)
    xs = np.arange(w, dtype=np.float64)
    ys = np.arange(h, dtype=np.float64)
    frames = np.zeros((n, h, w))
    for k in range(n):
        cx = x0 + (vx + jx) * k
        cy = y0 + (vy + jy) * k
        gx = np.exp(-0.5 * ((xs[None, :] - cx[:, None]) / sig[:, None]) ** 2)  # [cells, W]
        gy = np.exp(-0.5 * ((ys[None, :] - cy[:, None]) / sig[:, None]) ** 2)  # [cells, H]
        frames[k] = np.einsum("c,ch,cw->hw", amp, gy, gx)
    if cfg.noise_sigma > 0:
        frames = np.maximum(frames + cfg.noise_sigma * rng.standard_normal(frames.shape), 0.0)
    return frames
