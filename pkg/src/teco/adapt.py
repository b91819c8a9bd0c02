"""Test-time optimization: BN, Tent, SHOT and the temporal-coherent TeCo method."""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import data as D
from . import tensor as T
from .model import VideoClassifier
from .nn import GroupTag, StatMode, TemporalNonLocal, partition_parameters

log = logging.getLogger(__name__)


class Method(str, enum.Enum):
    STANDARD = "standard"
    BN = "bn"
    TENT = "tent"
    SHOT = "shot"
    TECO = "teco"


class Distance(str, enum.Enum):
    L1 = "l1"
    L2 = "l2"


class LocalSampling(str, enum.Enum):
    DENSE = "dense"
    UNIFORM = "uniform"
    NONE = "none"


@dataclass(frozen=True)
class AdaptationConfig:
    method: Method = Method.TECO
    alpha: float = 0.4
    beta: float = 1.0
    lam: float = 0.3
    lr: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 16
    epochs: int = 1
    time_gap: int = 1
    distance: Distance = Distance.L1
    coherence_stage: int = 2
    split_index: int = 2
    k_global: int = 8
    k_local: int = 8
    stride_local: int = 1
    local_sampling: LocalSampling = LocalSampling.DENSE
    max_steps: int | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        object.__setattr__(self, "distance", Distance(self.distance))
        object.__setattr__(self, "local_sampling", LocalSampling(self.local_sampling))
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        for name in ("beta", "lam", "lr", "momentum"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 1 <= self.time_gap < self.k_local:
            raise ValueError(f"time_gap must satisfy 1 <= i < k_local, got {self.time_gap}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    @classmethod
    def for_method(cls, method, **overrides) -> "AdaptationConfig":
        """Per-method defaults (BN's statistic weight differs from TeCo's)."""
        method = Method(method)
        base = {"method": method}
        if method is Method.BN:
            base["alpha"] = 0.5
        base.update(overrides)
        return cls(**base)

    def with_(self, **changes) -> "AdaptationConfig":
        return replace(self, **changes)

    def as_dict(self) -> dict:
        out = asdict(self)
        for k, v in out.items():
            if isinstance(v, enum.Enum):
                out[k] = v.value
        return out

    @property
    def uses_local_path(self) -> bool:
        return self.method is Method.TECO and self.local_sampling is not LocalSampling.NONE and self.beta > 0


# ------------------------------------------------------------------ losses


def entropy(probs) -> T.Tensor:
    """Mean Shannon entropy (nats) of the probability rows."""
    probs = probs if isinstance(probs, T.Tensor) else T.Tensor(probs)
    if np.any(probs.data < 0):
        raise ValueError("probabilities must be non-negative")
    tiny = T.Tensor(np.full(probs.shape, np.finfo(probs.dtype).tiny, dtype=probs.dtype))
    plogp = T.mul(probs, T.log(T.add(probs, tiny)))
    return T.neg(T.mean(T.sum(plogp, axes=1)))


def softmax_entropy(logits: T.Tensor) -> T.Tensor:
    """Mean entropy of softmax(logits), computed through log-softmax."""
    logp = T.log_softmax(logits, axis=1)
    p = T.softmax(logits, axis=1)
    return T.neg(T.mean(T.sum(T.mul(p, logp), axes=1)))


def loss_ent(model: VideoClassifier, batch_global) -> T.Tensor:
    return softmax_entropy(model.forward_global(batch_global))


def coherence(z: T.Tensor, time_gap: int, distance=Distance.L1) -> T.Tensor:
    """Sum over t >= i of the mean per-element distance between slices t and t - i."""
    distance = Distance(distance)
    n_t = z.shape[2]
    if not 1 <= time_gap < n_t:
        raise ValueError(f"time gap {time_gap} needs more than {n_t} time steps")
    diff = T.sub(T.slice_axis(z, 2, time_gap, n_t), T.slice_axis(z, 2, 0, n_t - time_gap))
    d = T.abs(diff) if distance is Distance.L1 else T.mul(diff, diff)
    per_slice = z.size // n_t
    return T.scale(T.sum(d), 1.0 / per_slice)


def loss_att_co(model: VideoClassifier, batch_local, time_gap: int, distance=Distance.L1, attention=None) -> T.Tensor:
    z = model.forward_local_features(batch_local, attention)
    if time_gap >= z.shape[2]:
        raise ValueError(f"time gap {time_gap} >= feature length {z.shape[2]}")
    return coherence(z, time_gap, distance)


def combine(l_ent: T.Tensor, l_co: T.Tensor | None, beta: float) -> T.Tensor:
    if l_co is None or beta == 0:
        return l_ent
    return T.add(l_ent, T.scale(l_co, beta))


def total_loss(model, batch_global, batch_local, cfg: AdaptationConfig, attention=None) -> T.Tensor:
    if cfg.method is not Method.TECO:
        raise ValueError("total_loss is defined for the TeCo method")
    l_ent = loss_ent(model, batch_global)
    if batch_local is None or cfg.beta == 0:
        return l_ent
    return combine(l_ent, loss_att_co(model, batch_local, cfg.time_gap, cfg.distance, attention), cfg.beta)


def shot_pseudo_labels(probs) -> np.ndarray:
    """Hard argmax per row; ties go to the lowest class index."""
    p = probs.data if isinstance(probs, T.Tensor) else np.asarray(probs)
    return np.argmax(p, axis=1)


# --------------------------------------------------------------- optimizer


class MissingGradError(RuntimeError):
    pass


class SGD:
    """SGD with heavy-ball momentum: ``v <- m v + g``; ``w <- w - lr v``."""

    def __init__(self, params, lr: float, momentum: float = 0.9):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [None] * len(self.params)

    def step(self) -> None:
        sgd_momentum_step(self, self.params, [p.grad for p in self.params], self.lr)


def sgd_momentum_step(state: SGD, params, grads, lr: float) -> None:
    m = state.momentum
    for k, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            raise MissingGradError(f"parameter {k} of shape {p.shape} has no gradient")
        v = state.velocity[k]
        v = g.copy() if v is None else p.dtype.type(m) * v + g
        state.velocity[k] = v
        p.data = p.data - p.dtype.type(lr) * v


# -------------------------------------------------------------- adaptation


def updatable_parameters(model: VideoClassifier, cfg: AdaptationConfig, attention=None) -> dict:
    """Names and tensors each method may change."""
    if cfg.method in (Method.STANDARD, Method.BN):
        return {}
    if cfg.method in (Method.TENT, Method.SHOT):
        return dict(partition_parameters(model, 0)[GroupTag.DEEP_NORM_AFFINE].params)
    groups = partition_parameters(model, cfg.split_index, attention)
    out = dict(groups[GroupTag.SHALLOW_ALL].params)
    out.update(groups[GroupTag.DEEP_NORM_AFFINE].params)
    return out


def _batches(n: int, batch_size: int, order: np.ndarray) -> list:
    chunks = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


def _stat_mode(cfg: AdaptationConfig):
    if cfg.method is Method.STANDARD:
        return StatMode.SOURCE, None
    if cfg.method is Method.TENT:
        return StatMode.TEST, None
    return StatMode.BLENDED, cfg.alpha


def _recalibrate(model: VideoClassifier, dataset: D.LabeledDataset, cfg: AdaptationConfig, rng) -> None:
    """Re-estimate the frozen test statistics with the final parameters."""
    norms = model.norms()
    for m in norms:
        m.start_collecting()
    with T.no_grad():
        for idx in _batches(len(dataset), cfg.batch_size, np.arange(len(dataset))):
            model.forward_global(D.sample_batch(dataset.clips[idx], cfg.k_global, D.Pathway.GLOBAL, True))
    for m in norms:
        m.freeze()


def adapt_offline(model: VideoClassifier, dataset: D.LabeledDataset, cfg: AdaptationConfig, history: list | None = None):
    """Adapt a copy of ``model`` to an unlabeled test set in one offline pass.

    Batches follow a seed-shuffled order. After the last step the test
    statistics are re-estimated in one deterministic pass with the final
    parameters and frozen for evaluation. ``history``, when given, receives
    one dict per optimization step.
    """
    if len(dataset) == 0:
        raise ValueError("cannot adapt on an empty test set")
    model = model.clone()
    model.requires_grad_(False)
    model.zero_grad()
    if cfg.method is Method.STANDARD:
        model.set_stat_mode(StatMode.SOURCE)
        return model
    if cfg.batch_size < 2 or len(dataset) < 2:
        raise ValueError("test-statistic adaptation needs batches of at least 2 clips")
    model.coherence_stage = cfg.coherence_stage
    mode, alpha = _stat_mode(cfg)
    model.set_stat_mode(mode, alpha)

    ss = np.random.SeedSequence(cfg.seed)
    rng_order, rng_global, rng_local = (np.random.default_rng(s) for s in ss.spawn(3))
    attention = None
    if cfg.uses_local_path:
        attention = TemporalNonLocal(model.tap_channels(), rng=np.random.default_rng(ss.spawn(1)[0]))
    updatable = updatable_parameters(model, cfg, attention)
    for p in updatable.values():
        p.requires_grad = True
    params = list(updatable.values())
    opt = SGD(params, lr=cfg.lr, momentum=cfg.momentum)
    norms = model.norms()

    steps = 0
    n = len(dataset)
    for epoch in range(cfg.epochs):
        for m in norms:
            m.start_collecting()
        for idx in _batches(n, cfg.batch_size, rng_order.permutation(n)):
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
            clips = dataset.clips[idx]
            xg = D.sample_batch(clips, cfg.k_global, D.Pathway.GLOBAL, deterministic=False, rng=rng_global)
            if cfg.method is Method.BN:
                with T.no_grad():
                    model.forward_global(xg)
                steps += 1
                continue
            logits = model.forward_global(xg)
            l_ent = softmax_entropy(logits)
            loss, l_co = l_ent, None
            if cfg.method is Method.SHOT:
                from .model import cross_entropy

                pseudo = shot_pseudo_labels(logits)
                loss = T.add(l_ent, T.scale(cross_entropy(logits, pseudo), cfg.lam))
            elif cfg.uses_local_path:
                if cfg.local_sampling is LocalSampling.DENSE:
                    xl = D.sample_batch(
                        clips, cfg.k_local, D.Pathway.LOCAL, deterministic=False, rng=rng_local,
                        stride=cfg.stride_local,
                    )
                else:
                    xl = D.sample_batch(clips, cfg.k_local, D.Pathway.GLOBAL, deterministic=False, rng=rng_local)
                for m in norms:
                    m.collect = False
                z = model.forward_local_features(xl, attention)
                for m in norms:
                    m.collect = True
                l_co = coherence(z, cfg.time_gap, cfg.distance)
                loss = combine(l_ent, l_co, cfg.beta)
            if params:
                model.zero_grad()
                if attention is not None:
                    attention.zero_grad()
                loss.backward()
                opt.step()
            steps += 1
            if history is not None:
                history.append(
                    {
                        "step": steps,
                        "epoch": epoch,
                        "loss": loss.item(),
                        "loss_ent": l_ent.item(),
                        "loss_co": None if l_co is None else l_co.item(),
                    }
                )
        for m in norms:
            m.freeze()
    if steps:
        _recalibrate(model, dataset, cfg, rng_global)
    if cfg.epochs == 0:
        model.set_stat_mode(StatMode.SOURCE)
    model.requires_grad_(False)
    model.zero_grad()
    return model


def mean_entropy(model: VideoClassifier, dataset: D.LabeledDataset, batch_size: int = 64) -> float:
    from .model import predict

    logits = predict(model, dataset.clips, batch_size)
    with T.no_grad():
        return softmax_entropy(T.Tensor(logits)).item() if len(logits) else math.nan
