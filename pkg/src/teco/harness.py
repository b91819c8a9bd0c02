"""Evaluation, mPC reports, feature-coherence measurement and checkpoint I/O."""

from __future__ import annotations

import csv
import io
import json
import logging
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import data as D
from . import tensor as T
from .adapt import AdaptationConfig, Method, adapt_offline, coherence
from .corruption import KINDS, SEVERITIES, corrupt_cell
from .model import VideoClassifier, predict

log = logging.getLogger(__name__)

CSV_HEADER = ("method", "kind", "severity", "accuracy", "seed")
SWEEP_HEADER = ("method", "alpha", "beta", "iterations", "mpc", "seed")


def evaluate(model, dataset: D.LabeledDataset, k_global: int = 8, batch_size: int = 64) -> float:
    """Top-1 accuracy with deterministic uniform sampling and frozen statistics."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    correct = 0
    with T.no_grad():
        for i in range(0, len(dataset), batch_size):
            batch = D.sample_batch(dataset.clips[i:i + batch_size], k_global, D.Pathway.GLOBAL, deterministic=True)
            logits = model.forward_global(batch)
            logits = logits.data if isinstance(logits, T.Tensor) else np.asarray(logits)
            correct += int((logits.argmax(axis=1) == dataset.labels[i:i + batch_size]).sum())
    return correct / len(dataset)


def compute_mpc(ca) -> float:
    """Mean accuracy over every (corruption, severity) cell, correctly rounded.

    The sum is taken exactly so the result does not depend on cell order.
    """
    arr = np.asarray(ca, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("empty accuracy matrix")
    return float(sum(map(Fraction, arr.ravel().tolist())) / arr.size)


@dataclass
class EvalReport:
    method: str
    clean_acc: float
    kinds: tuple
    severities: tuple
    ca: np.ndarray  # (len(kinds), len(severities))
    seed: int = 0
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        self.ca = np.asarray(self.ca, dtype=np.float64)
        if np.any((self.ca < 0) | (self.ca > 1)):
            raise ValueError("accuracies must lie in [0, 1]")

    @property
    def mpc(self) -> float:
        return compute_mpc(self.ca)

    def rows(self) -> list:
        rows = [(self.method, "clean", "0", f"{self.clean_acc:.6f}", str(self.seed))]
        for i, k in enumerate(self.kinds):
            for j, s in enumerate(self.severities):
                rows.append((self.method, k, str(s), f"{self.ca[i, j]:.6f}", str(self.seed)))
        rows.append((self.method, "mpc", "all", f"{self.mpc:.6f}", str(self.seed)))
        return rows

    def to_csv(self, header: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if header:
            w.writerow(CSV_HEADER)
        w.writerows(self.rows())
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(
            {
                "method": self.method,
                "clean_acc": self.clean_acc,
                "mpc": self.mpc,
                "kinds": list(self.kinds),
                "severities": list(self.severities),
                "ca": self.ca.tolist(),
                "seed": self.seed,
                "config": self.config,
            },
            indent=2,
            sort_keys=True,
        )


def read_report_csv(text: str) -> dict:
    """Parse report CSV text into ``{method: {"mpc": float, "cells": {(kind, sev): acc}}}``."""
    out: dict = {}
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != CSV_HEADER:
        raise ValueError(f"unexpected CSV header {reader.fieldnames}")
    for row in reader:
        entry = out.setdefault(row["method"], {"cells": {}, "mpc": None, "clean": None})
        acc = float(row["accuracy"])
        if row["kind"] == "mpc":
            entry["mpc"] = acc
        elif row["kind"] == "clean":
            entry["clean"] = acc
        else:
            entry["cells"][(row["kind"], int(row["severity"]))] = acc
    for entry in out.values():
        if entry["mpc"] is None and entry["cells"]:
            entry["mpc"] = compute_mpc(list(entry["cells"].values()))
    return out


def run_benchmark(
    model: VideoClassifier,
    test_set: D.LabeledDataset,
    cfg: AdaptationConfig,
    kinds=KINDS,
    severities=SEVERITIES,
    seed: int = 0,
    corrupted: dict | None = None,
) -> EvalReport:
    """Adapt a fresh copy of ``model`` to every corrupted cell and evaluate it."""
    kinds, severities = tuple(kinds), tuple(severities)
    ca = np.zeros((len(kinds), len(severities)))
    for i, k in enumerate(kinds):
        for j, s in enumerate(severities):
            cell = corrupted[(k, s)] if corrupted is not None else corrupt_cell(test_set, k, s, seed)
            adapted = adapt_offline(model, cell, cfg)
            ca[i, j] = evaluate(adapted, cell, cfg.k_global)
            log.debug("%s %s/%d acc=%.3f", cfg.method.value, k, s, ca[i, j])
    clean = evaluate(model, test_set, cfg.k_global)
    return EvalReport(cfg.method.value, clean, kinds, severities, ca, seed, cfg.as_dict())


# --------------------------------------------------------- feature coherence


@dataclass
class CoherenceReport:
    per_clip: np.ndarray
    time_gap: int
    stage: int

    @property
    def aggregate(self) -> float:
        return float(self.per_clip.mean()) if len(self.per_clip) else 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("clip", "stage", "time_gap", "coherence"))
        for i, v in enumerate(self.per_clip):
            w.writerow((i, self.stage, self.time_gap, f"{v:.6f}"))
        w.writerow(("mean", self.stage, self.time_gap, f"{self.aggregate:.6f}"))
        return buf.getvalue()


def feature_coherence_report(
    model: VideoClassifier, dataset: D.LabeledDataset, time_gap: int = 1, stage: int | None = None,
    k_local: int = 8, batch_size: int = 32,
) -> CoherenceReport:
    """Per-clip temporal L1 variation of the raw tap features on centred dense samples."""
    stage = model.coherence_stage if stage is None else stage
    vals = []
    with T.no_grad():
        for i in range(0, len(dataset), batch_size):
            batch = D.sample_batch(dataset.clips[i:i + batch_size], k_local, D.Pathway.LOCAL, deterministic=True)
            tap = model.features(T.Tensor(batch), stage)
            if not 1 <= time_gap < tap.shape[2]:
                raise ValueError(f"time gap {time_gap} out of range for {tap.shape[2]} time steps")
            for b in range(tap.shape[0]):
                vals.append(coherence(T.Tensor(tap.data[b:b + 1]), time_gap).item())
    return CoherenceReport(np.array(vals), time_gap, stage)


# -------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"TECO"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    def __init__(self):
        super().__init__("bad magic")


class TruncatedFileError(CheckpointError):
    def __init__(self):
        super().__init__("truncated file")


class VersionMismatchError(CheckpointError):
    def __init__(self, version):
        super().__init__(f"version mismatch: file has {version}, expected {CKPT_VERSION}")


def write_tensors(tensors: dict, path) -> None:
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_tensors(path) -> dict:
    buf = Path(path).read_bytes()
    if len(buf) < 4:
        raise TruncatedFileError()
    if buf[:4] != CKPT_MAGIC:
        raise BadMagicError()
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise TruncatedFileError()
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    version, count = take("<II")
    if version != CKPT_VERSION:
        raise VersionMismatchError(version)
    out = {}
    for _ in range(count):
        (nlen,) = take("<H")
        if pos + nlen > len(buf):
            raise TruncatedFileError()
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = take("<B")
        dims = take(f"<{ndim}I") if ndim else ()
        n = int(np.prod(dims)) if ndim else 1
        if pos + 4 * n > len(buf):
            raise TruncatedFileError()
        out[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(dims).astype(np.float32)
        pos += 4 * n
    return out


_CONFIG_KEYS = ("num_classes", "frames", "split_index", "coherence_stage")


def save_checkpoint(model: VideoClassifier, path) -> None:
    tensors = {f"config.{k}": np.array([getattr(model, k)], np.float32) for k in _CONFIG_KEYS}
    tensors["config.widths"] = np.array(model.widths, np.float32)
    tensors.update(model.state_dict())
    write_tensors(tensors, path)


def load_checkpoint(path) -> VideoClassifier:
    tensors = read_tensors(path)
    try:
        cfg = {k: int(tensors.pop(f"config.{k}")[0]) for k in _CONFIG_KEYS}
        widths = tuple(int(w) for w in tensors.pop("config.widths"))
    except KeyError as exc:
        raise CheckpointError(f"missing config tensor {exc}") from None
    model = VideoClassifier(widths=widths, **cfg)
    model.load_state_dict(tensors)
    model.requires_grad_(False)
    return model


# -------------------------------------------------------------------- sweep


def sweep(
    model: VideoClassifier,
    test_set: D.LabeledDataset,
    methods=("teco",),
    alphas=(None,),
    betas=(None,),
    iterations=(None,),
    kinds=KINDS,
    severities=SEVERITIES,
    seed: int = 0,
    base: dict | None = None,
) -> list:
    """Grid over method x alpha x beta x iteration budget; one mPC per cell."""
    corrupted = {(k, s): corrupt_cell(test_set, k, s, seed) for k in kinds for s in severities}
    rows = []
    for method in methods:
        m = Method(method)
        for a in alphas:
            for b in betas:
                for it in iterations:
                    over = dict(base or {})
                    if a is not None:
                        over["alpha"] = a
                    if b is not None:
                        over["beta"] = b
                    if it is not None:
                        over["max_steps"] = it
                    cfg = AdaptationConfig.for_method(m, seed=seed, **over)
                    rep = run_benchmark(model, test_set, cfg, kinds, severities, seed, corrupted)
                    rows.append(
                        (
                            m.value,
                            f"{cfg.alpha:g}",
                            f"{cfg.beta:g}",
                            "all" if it is None else str(it),
                            f"{rep.mpc:.6f}",
                            str(seed),
                        )
                    )
    return rows


def rows_to_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()
