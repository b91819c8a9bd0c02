"""Nine video corruptions at five severities each.

Severity 0 is the identity. Randomness comes from a per-(kind, severity, clip)
sub-seed, so any one cell can be regenerated in isolation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .data import LabeledDataset, VideoClip, _smooth_noise

KINDS = (
    "gaussian_noise",
    "shot_noise",
    "motion_blur",
    "contrast",
    "saturate",
    "fog",
    "rain",
    "frame_rate",
    "bit_error",
)
SEVERITIES = (1, 2, 3, 4, 5)

SEVERITY_TABLE = {
    "gaussian_noise": (0.04, 0.08, 0.12, 0.18, 0.26),
    "shot_noise": (60, 25, 12, 5, 3),
    "motion_blur": (2, 3, 4, 6, 8),
    "contrast": (0.75, 0.5, 0.4, 0.3, 0.15),
    "saturate": (0.2, 0.4, 0.6, 0.8, 1.0),
    "fog": (0.1, 0.2, 0.3, 0.45, 0.6),
    "rain": (5, 10, 20, 35, 60),
    "frame_rate": (Fraction(4, 3), Fraction(2), Fraction(8, 3), Fraction(4), Fraction(8)),
    "bit_error": (4, 8, 16, 32, 64),
}


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown corruption kind {self.kind!r}")
        if not isinstance(self.severity, (int, np.integer)) or not 0 <= self.severity <= 5:
            raise ValueError(f"severity must be an integer in 0..5, got {self.severity!r}")

    @property
    def level(self):
        return SEVERITY_TABLE[self.kind][self.severity - 1]


def _gaussian_noise(x, sigma, rng):
    return x + rng.normal(0.0, sigma, size=x.shape).astype(np.float32)


def _shot_noise(x, photons, rng):
    return (rng.poisson(np.clip(x, 0, 1) * photons) / photons).astype(np.float32)


def _motion_blur(x, window, rng):
    n = len(x)
    csum = np.concatenate([np.zeros_like(x[:1], dtype=np.float64), np.cumsum(x, axis=0, dtype=np.float64)])
    out = np.empty_like(x)
    back = (window - 1) // 2
    for t in range(n):
        lo, hi = max(0, t - back), min(n, t - back + window)
        out[t] = (csum[hi] - csum[lo]) / (hi - lo)
    return out


def _contrast(x, factor, rng):
    m = x.mean(dtype=np.float64)
    return (m + factor * (x - m)).astype(np.float32)


def _saturate(x, strength, rng):
    gray = x.mean(axis=1, keepdims=True)
    return x + np.float32(strength) * (gray - x)


def _fog(x, intensity, rng):
    h, w = x.shape[-2:]
    field = 0.5 + 0.5 * _smooth_noise(rng, 3, h)
    haze = (intensity * field).astype(np.float32)[None, None]
    return x * (1 - haze) + haze


def _rain(x, density, rng):
    out = x.copy()
    n_t, _, h, w = x.shape
    length = 6
    steps = np.arange(length)
    for t in range(n_t):
        x0 = rng.integers(0, w, size=density)
        y0 = rng.integers(-length, h, size=density)
        ys = y0[:, None] + steps[None, :]
        xs = x0[:, None] + steps[None, :] // 3
        ok = (ys >= 0) & (ys < h) & (xs < w)
        ys, xs = ys[ok], xs[ok]
        out[t, :, ys, xs] = 0.7 * out[t, :, ys, xs] + 0.3 * 0.95
    return out


def _frame_rate(x, factor, rng):
    n = len(x)
    kept = [math.floor(k * factor) for k in range(n) if k * factor < n]
    out = np.empty_like(x)
    for t in range(n):
        k = min(math.floor(Fraction(t) / factor + Fraction(1, 2)), len(kept) - 1)
        out[t] = x[kept[k]]
    return out


def _bit_error(x, blocks, rng, span):
    n_t, _, h, w = x.shape
    mask = np.zeros((n_t, h, w), dtype=bool)
    for _ in range(blocks):
        t = int(rng.integers(0, n_t))
        r = int(rng.integers(0, h - 3))
        c = int(rng.integers(0, w - 3))
        mask[t:t + span + 1, r:r + 4, c:c + 4] = True
    return np.where(mask[:, None], 1 - x, x)


_KERNELS = {
    "gaussian_noise": _gaussian_noise,
    "shot_noise": _shot_noise,
    "motion_blur": _motion_blur,
    "contrast": _contrast,
    "saturate": _saturate,
    "fog": _fog,
    "rain": _rain,
    "frame_rate": _frame_rate,
}


def corrupt_frames(frames: np.ndarray, spec: CorruptionSpec) -> np.ndarray:
    """Corrupt a (T, C, H, W) array; output stays in [0, 1]."""
    if spec.severity == 0:
        return frames.copy()
    rng = np.random.default_rng(spec.seed)
    x = np.asarray(frames, dtype=np.float32)
    if spec.kind == "bit_error":
        out = _bit_error(x, spec.level, rng, span=spec.severity)
    else:
        out = _KERNELS[spec.kind](x, spec.level, rng)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def apply(spec: CorruptionSpec, clip: VideoClip) -> VideoClip:
    return VideoClip(corrupt_frames(clip.frames, spec), clip.label)


def cell_seed(seed: int, kind: str, severity: int, index: int) -> int:
    ss = np.random.SeedSequence([seed, KINDS.index(kind), severity, index])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def corrupt_cell(dataset: LabeledDataset, kind: str, severity: int, seed: int = 0) -> LabeledDataset:
    out = np.empty_like(dataset.clips)
    for i in range(len(dataset)):
        out[i] = corrupt_frames(dataset.clips[i], CorruptionSpec(kind, severity, cell_seed(seed, kind, severity, i)))
    return LabeledDataset(out, dataset.labels.copy())


def corrupt_dataset(dataset: LabeledDataset, kinds=KINDS, severities=SEVERITIES, seed: int = 0) -> dict:
    """Map ``(kind, severity)`` to a corrupted copy; the input is not modified."""
    return {(k, s): corrupt_cell(dataset, k, s, seed) for k in kinds for s in severities}
