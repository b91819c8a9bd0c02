"""Procedural moving-shape videos, frame samplers, and the TVDS file format."""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SHAPES = ("circle", "square")
DIRECTIONS = ("right", "left", "up", "down")
CLASS_NAMES = tuple(f"{s}-{d}" for s in SHAPES for d in DIRECTIONS)
NUM_CLASSES = len(CLASS_NAMES)
FRAME_SIZE = 32
CHANNELS = 3
DEFAULT_T = 16

_VELOCITY = {"right": (1.0, 0.0), "left": (-1.0, 0.0), "up": (0.0, -1.0), "down": (0.0, 1.0)}


@dataclass
class VideoClip:
    frames: np.ndarray  # (T, C, H, W) float32 in [0, 1]
    label: int


class Pathway(str, enum.Enum):
    GLOBAL = "global"
    LOCAL = "local"


@dataclass
class SampledClip:
    frames: np.ndarray  # (K, C, H, W)
    source_indices: np.ndarray
    pathway: Pathway


@dataclass
class LabeledDataset:
    clips: np.ndarray  # (N, T, C, H, W) float32
    labels: np.ndarray  # (N,) int64

    def __post_init__(self):
        self.clips = np.ascontiguousarray(self.clips, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.clips.ndim != 5 or len(self.clips) != len(self.labels):
            raise ValueError(f"clips {self.clips.shape} and labels {self.labels.shape} disagree")

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i) -> VideoClip:
        return VideoClip(self.clips[i], int(self.labels[i]))

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.clips[idx], self.labels[idx])

    @property
    def num_frames(self) -> int:
        return self.clips.shape[1]


# ---------------------------------------------------------------- rendering


@dataclass
class ClipParams:
    shape: str
    direction: str
    radius: float
    speed: float
    start: tuple  # (x, y) centre at frame 0
    color: np.ndarray  # (C,)
    background: np.ndarray  # (C, H, W)


def _smooth_noise(rng, grid: int, size: int) -> np.ndarray:
    coarse = rng.random((grid + 1, grid + 1))
    pos = np.linspace(0, grid, size)
    i0 = np.minimum(pos.astype(int), grid - 1)
    f = pos - i0
    rows = coarse[i0] * (1 - f)[:, None] + coarse[i0 + 1] * f[:, None]
    return rows[:, i0] * (1 - f)[None, :] + rows[:, i0 + 1] * f[None, :]


def sample_params(rng: np.random.Generator, label: int, T: int = DEFAULT_T) -> ClipParams:
    shape = SHAPES[label // len(DIRECTIONS)]
    direction = DIRECTIONS[label % len(DIRECTIONS)]
    radius = rng.uniform(5.0, 8.0)
    speed = rng.uniform(1.0, 2.0)
    travel = speed * (T - 1)
    # keep the whole path inside the frame when it fits, otherwise centre it
    lo, hi = radius, FRAME_SIZE - 1 - radius - travel
    if hi < lo:
        lo = hi = (FRAME_SIZE - 1 - travel) / 2
    along = rng.uniform(lo, hi)
    across = rng.uniform(radius, FRAME_SIZE - 1 - radius)
    vx, vy = _VELOCITY[direction]
    if vx > 0 or vy > 0:
        a0 = along
    else:
        a0 = FRAME_SIZE - 1 - along
    start = (a0, across) if vx != 0 else (across, a0)
    base = rng.uniform(0.25, 0.65, size=CHANNELS)
    texture = np.stack([_smooth_noise(rng, 4, FRAME_SIZE) for _ in range(CHANNELS)])
    background = np.clip(base[:, None, None] + 0.25 * (texture - 0.5), 0, 1)
    color = np.clip(base + rng.uniform(0.3, 0.45, size=CHANNELS), 0, 1)
    return ClipParams(shape, direction, radius, speed, start, color, background)


def render(params: ClipParams, T: int = DEFAULT_T, with_shape: bool = True) -> np.ndarray:
    """Render ``T`` frames (T, C, H, W); the background is static."""
    frames = np.repeat(params.background[None], T, axis=0)
    if not with_shape:
        return frames.astype(np.float32)
    ys, xs = np.mgrid[0:FRAME_SIZE, 0:FRAME_SIZE].astype(np.float64)
    vx, vy = _VELOCITY[params.direction]
    r = params.radius
    for t in range(T):
        cx = params.start[0] + vx * params.speed * t
        cy = params.start[1] + vy * params.speed * t
        if params.shape == "circle":
            cov = np.clip(r + 0.5 - np.hypot(xs - cx, ys - cy), 0, 1)
        else:
            cov = np.clip(r + 0.5 - np.abs(xs - cx), 0, 1) * np.clip(r + 0.5 - np.abs(ys - cy), 0, 1)
        frames[t] = frames[t] * (1 - cov) + params.color[:, None, None] * cov
    return np.clip(frames, 0, 1).astype(np.float32)


def generate_dataset(
    num_classes: int = NUM_CLASSES, clips_per_class: int = 100, T: int = DEFAULT_T, seed: int = 0
) -> LabeledDataset:
    """Deterministic balanced dataset; clip ``j`` of class ``c`` depends only on (seed, c, j)."""
    if clips_per_class < 1:
        raise ValueError("clips_per_class must be >= 1")
    if not 1 <= num_classes <= NUM_CLASSES:
        raise ValueError(f"num_classes must be in [1, {NUM_CLASSES}]")
    clips = np.empty((num_classes * clips_per_class, T, CHANNELS, FRAME_SIZE, FRAME_SIZE), dtype=np.float32)
    labels = np.empty(num_classes * clips_per_class, dtype=np.int64)
    k = 0
    for j in range(clips_per_class):
        for c in range(num_classes):
            rng = np.random.default_rng([seed, c, j])
            clips[k] = render(sample_params(rng, c, T), T)
            labels[k] = c
            k += 1
    return LabeledDataset(clips, labels)


def train_test_split(ds: LabeledDataset, test_fraction: float, seed: int = 0):
    """Stratified split; returns ``(train, test)``."""
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in np.unique(ds.labels):
        idx = rng.permutation(np.flatnonzero(ds.labels == c))
        n_test = int(round(len(idx) * test_fraction))
        test_idx.extend(idx[:n_test])
        train_idx.extend(idx[n_test:])
    return ds.subset(np.sort(train_idx)), ds.subset(np.sort(test_idx))


# ----------------------------------------------------------------- sampling


def uniform_indices(T: int, K: int, deterministic: bool, rng=None) -> np.ndarray:
    if K > T:
        raise ValueError(f"cannot take {K} frames from a {T}-frame clip")
    s = np.arange(K)
    starts = (s * T) // K
    ends = ((s + 1) * T) // K
    if deterministic:
        return starts + (ends - starts) // 2
    return rng.integers(starts, ends)


def dense_indices(T: int, K: int, stride: int, deterministic: bool, rng=None) -> np.ndarray:
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if K * stride > T:
        raise ValueError(f"K*stride = {K * stride} exceeds clip length {T}")
    room = T - K * stride
    start = room // 2 if deterministic else int(rng.integers(0, room + 1))
    return start + stride * np.arange(K)


def uniform_sample(clip: VideoClip, K: int, deterministic: bool = True, seed=None) -> SampledClip:
    rng = None if deterministic else np.random.default_rng(seed)
    idx = uniform_indices(len(clip.frames), K, deterministic, rng)
    return SampledClip(clip.frames[idx], idx, Pathway.GLOBAL)


def dense_sample(clip: VideoClip, K: int, stride: int = 1, deterministic: bool = True, seed=None) -> SampledClip:
    rng = None if deterministic else np.random.default_rng(seed)
    idx = dense_indices(len(clip.frames), K, stride, deterministic, rng)
    return SampledClip(clip.frames[idx], idx, Pathway.LOCAL)


def to_batch(frames: np.ndarray) -> np.ndarray:
    """(B, K, C, H, W) -> model layout (B, C, K, H, W)."""
    return np.ascontiguousarray(frames.transpose(0, 2, 1, 3, 4))


def sample_batch(
    clips: np.ndarray, K: int, pathway: Pathway | str = Pathway.GLOBAL, deterministic: bool = True,
    rng=None, stride: int = 1,
) -> np.ndarray:
    """Sample every clip of a (B, T, C, H, W) array into a model-ready batch."""
    pathway = Pathway(pathway)
    T = clips.shape[1]
    out = np.empty((len(clips), K) + clips.shape[2:], dtype=clips.dtype)
    for b in range(len(clips)):
        if pathway is Pathway.GLOBAL:
            idx = uniform_indices(T, K, deterministic, rng)
        else:
            idx = dense_indices(T, K, stride, deterministic, rng)
        out[b] = clips[b, idx]
    return to_batch(out)


# ------------------------------------------------------------- augmentation

_HFLIP = {"right": "left", "left": "right", "up": "up", "down": "down"}


def hflip_label(label: int) -> int:
    shape, direction = CLASS_NAMES[label].split("-")
    return CLASS_NAMES.index(f"{shape}-{_HFLIP[direction]}")


def augment(batch: np.ndarray, labels: np.ndarray, rng: np.random.Generator, pad: int = 2):
    """Random horizontal flip (with direction-label swap) and pad-then-crop translation."""
    batch = batch.copy()
    labels = labels.copy()
    flip = rng.random(len(batch)) < 0.5
    for b in np.flatnonzero(flip):
        batch[b] = batch[b, ..., ::-1]
        labels[b] = hflip_label(int(labels[b]))
    h, w = batch.shape[-2:]
    padded = np.pad(batch, ((0, 0),) * (batch.ndim - 2) + ((pad, pad), (pad, pad)), mode="edge")
    offs = rng.integers(0, 2 * pad + 1, size=(len(batch), 2))
    for b, (dy, dx) in enumerate(offs):
        batch[b] = padded[b, ..., dy:dy + h, dx:dx + w]
    return batch, labels


# ------------------------------------------------------------ TVDS file I/O

TVDS_MAGIC = b"TVDS"
TVDS_VERSION = 1


class DatasetFormatError(ValueError):
    pass


def save_dataset(ds: LabeledDataset, path) -> None:
    n, T, C, H, W = ds.clips.shape
    with open(path, "wb") as f:
        f.write(TVDS_MAGIC)
        f.write(struct.pack("<II", TVDS_VERSION, n))
        for i in range(n):
            f.write(struct.pack("<IIIII", int(ds.labels[i]), T, C, H, W))
            f.write(ds.clips[i].astype("<f4").tobytes())


def load_dataset(path) -> LabeledDataset:
    buf = Path(path).read_bytes()
    if buf[:4] != TVDS_MAGIC:
        raise DatasetFormatError("bad magic")
    if len(buf) < 12:
        raise DatasetFormatError("truncated file")
    version, n = struct.unpack_from("<II", buf, 4)
    if version != TVDS_VERSION:
        raise DatasetFormatError(f"version mismatch: {version}")
    off = 12
    clips, labels = [], []
    for _ in range(n):
        if off + 20 > len(buf):
            raise DatasetFormatError("truncated file")
        label, T, C, H, W = struct.unpack_from("<IIIII", buf, off)
        off += 20
        size = T * C * H * W * 4
        if off + size > len(buf):
            raise DatasetFormatError("truncated file")
        clips.append(np.frombuffer(buf, dtype="<f4", count=T * C * H * W, offset=off).reshape(T, C, H, W))
        labels.append(label)
        off += size
    if not clips:
        return LabeledDataset(np.zeros((0, DEFAULT_T, CHANNELS, FRAME_SIZE, FRAME_SIZE), np.float32), np.zeros(0))
    return LabeledDataset(np.stack(clips), np.array(labels))
