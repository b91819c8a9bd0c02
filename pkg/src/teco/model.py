"""Toy 3-D residual video classifier and its clean (source) training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import data as D
from . import tensor as T
from .nn import Conv3d, Linear, Module, ModuleList, Norm, StatMode, TemporalNonLocal

log = logging.getLogger(__name__)

WIDTHS = (8, 16, 32, 64)
STEM_STRIDE = (1, 2, 2)


class Stem(Module):
    def __init__(self, cout: int, rng):
        super().__init__()
        self.conv = Conv3d(D.CHANNELS, cout, kernel=(1, 3, 3), stride=STEM_STRIDE, rng=rng)
        self.norm = Norm(cout)

    def __call__(self, x):
        return T.relu(self.norm(self.conv(x)))


class ResBlock(Module):
    """conv-norm-relu-conv-norm with a strided 1x1x1 projection shortcut.

    ``t_kernel=1`` makes the block act on every frame independently.
    """

    def __init__(self, cin: int, cout: int, t_stride: int, rng, t_kernel: int = 3):
        super().__init__()
        stride = (t_stride, 2, 2)
        kernel = (t_kernel, 3, 3)
        self.conv1 = Conv3d(cin, cout, kernel, stride=stride, rng=rng)
        self.norm1 = Norm(cout)
        self.conv2 = Conv3d(cout, cout, kernel, rng=rng)
        self.norm2 = Norm(cout)
        self.proj = Conv3d(cin, cout, 1, stride=stride, rng=rng)
        self.proj_norm = Norm(cout)

    def __call__(self, x):
        y = T.relu(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return T.relu(T.add(y, self.proj_norm(self.proj(x))))


class VideoClassifier(Module):
    """Stem, four residual blocks and a pooled linear head.

    The stem and blocks 1-2 are frame-wise (temporal kernel 1) and keep the
    temporal resolution; blocks 3-4 mix and halve time. Every block halves the
    spatial size. ``coherence_stage`` k taps the output of block k
    for the local pathway.
    """

    def __init__(
        self,
        num_classes: int = D.NUM_CLASSES,
        frames: int = 8,
        widths=WIDTHS,
        split_index: int = 2,
        coherence_stage: int = 2,
        seed: int = 0,
        zero_head: bool = False,
    ):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.num_classes = num_classes
        self.frames = frames
        self.widths = tuple(widths)
        self.split_index = split_index
        self.coherence_stage = coherence_stage
        self.stem = Stem(self.widths[0], rng)
        blocks = []
        cin = self.widths[0]
        for i, cout in enumerate(self.widths):
            early = i < 2
            blocks.append(ResBlock(cin, cout, 1 if early else 2, rng, t_kernel=1 if early else 3))
            cin = cout
        self.blocks = ModuleList(blocks)
        self.head = Linear(self.widths[-1], num_classes, rng=rng, zero=zero_head)

    def norms(self) -> list:
        return [m for _, m in self.named_modules() if isinstance(m, Norm)]

    def set_stat_mode(self, mode, alpha: float | None = None) -> None:
        for m in self.norms():
            m.set_mode(mode, alpha)

    def check_input(self, x: T.Tensor) -> None:
        if x.ndim != 5 or x.shape[1] != D.CHANNELS or x.shape[3:] != (D.FRAME_SIZE, D.FRAME_SIZE):
            raise T.ShapeError(f"expected (B, 3, K, 32, 32), got {x.shape}")
        if x.shape[2] != self.frames:
            raise T.ShapeError(f"model is configured for {self.frames} frames, got {x.shape[2]}")

    def features(self, x: T.Tensor, stage: int) -> T.Tensor:
        """Output of block ``stage`` (1-based); stage 0 is the stem output."""
        if not 0 <= stage <= len(self.blocks):
            raise ValueError(f"stage must be in [0, {len(self.blocks)}], got {stage}")
        y = self.stem(x)
        for b in self.blocks[:stage]:
            y = b(y)
        return y

    def forward_global(self, x) -> T.Tensor:
        x = x if isinstance(x, T.Tensor) else T.Tensor(x)
        self.check_input(x)
        y = self.features(x, len(self.blocks))
        pooled = T.mean(y, axes=(2, 3, 4))
        return self.head(pooled)

    __call__ = forward_global

    def forward_local_features(self, x, attention: TemporalNonLocal | None = None, stage: int | None = None) -> T.Tensor:
        x = x if isinstance(x, T.Tensor) else T.Tensor(x)
        self.check_input(x)
        tap = self.features(x, self.coherence_stage if stage is None else stage)
        if tap.shape[2] < 2:
            raise T.ShapeError(f"feature tap has {tap.shape[2]} time steps; need at least 2")
        return tap if attention is None else attention(tap)

    def tap_channels(self, stage: int | None = None) -> int:
        stage = self.coherence_stage if stage is None else stage
        return self.widths[stage - 1] if stage > 0 else self.widths[0]


def forward_global(model: VideoClassifier, batch) -> T.Tensor:
    return model.forward_global(batch)


def forward_local_features(model: VideoClassifier, batch, attention=None) -> T.Tensor:
    return model.forward_local_features(batch, attention)


def cross_entropy(logits: T.Tensor, labels: np.ndarray) -> T.Tensor:
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(len(labels)), labels] = 1
    picked = T.sum(T.mul(T.log_softmax(logits, axis=1), T.Tensor(onehot, dtype=logits.dtype)), axes=1)
    return T.neg(T.mean(picked))


def predict(model: VideoClassifier, clips: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Logits for deterministic uniform samples of every clip."""
    out = []
    with T.no_grad():
        for i in range(0, len(clips), batch_size):
            batch = D.sample_batch(clips[i:i + batch_size], model.frames, D.Pathway.GLOBAL, deterministic=True)
            out.append(model.forward_global(batch).data)
    return np.concatenate(out) if out else np.zeros((0, model.num_classes), np.float32)


@dataclass
class TrainResult:
    model: VideoClassifier
    epoch_loss: list = field(default_factory=list)
    epoch_acc: list = field(default_factory=list)
    test_acc: float | None = None


def train_clean(
    model: VideoClassifier,
    dataset: D.LabeledDataset,
    epochs: int = 12,
    lr: float = 0.05,
    momentum: float = 0.9,
    seed: int = 0,
    batch_size: int = 16,
    test_set: D.LabeledDataset | None = None,
    augment: bool = True,
) -> TrainResult:
    """Cross-entropy training with SGD momentum and a cosine learning-rate schedule.

    Source statistics are tracked as running averages and the model is left in
    source-statistics mode afterwards.
    """
    from .adapt import SGD

    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    rng = np.random.default_rng(seed)
    model.set_stat_mode(StatMode.TRAIN)
    model.requires_grad_(True)
    params = model.parameters()
    opt = SGD(params, lr=lr, momentum=momentum)
    n = len(dataset)
    steps_per_epoch = max(1, math.ceil(n / batch_size))
    total = epochs * steps_per_epoch
    result = TrainResult(model)
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(n)
        loss_sum, correct = 0.0, 0
        for i in range(0, n, batch_size):
            idx = order[i:i + batch_size]
            if len(idx) < 2:
                continue
            x = D.sample_batch(dataset.clips[idx], model.frames, D.Pathway.GLOBAL, deterministic=False, rng=rng)
            y = dataset.labels[idx]
            if augment:
                x, y = D.augment(x, y, rng)
            logits = model.forward_global(x)
            loss = cross_entropy(logits, y)
            model.zero_grad()
            loss.backward()
            opt.lr = 0.5 * lr * (1 + math.cos(math.pi * step / total))
            opt.step()
            step += 1
            loss_sum += loss.item() * len(idx)
            correct += int((logits.data.argmax(1) == y).sum())
        result.epoch_loss.append(loss_sum / n)
        result.epoch_acc.append(correct / n)
        log.info("epoch %d loss %.4f acc %.3f", epoch, result.epoch_loss[-1], result.epoch_acc[-1])
    model.set_stat_mode(StatMode.SOURCE)
    model.requires_grad_(False)
    model.zero_grad()
    if test_set is not None and len(test_set):
        result.test_acc = float((predict(model, test_set.clips).argmax(1) == test_set.labels).mean())
    return result
