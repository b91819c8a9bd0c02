"""Layers: 3-D convolution, dual-statistics normalization, linear head, and
the temporal non-local attention used by the coherence pathway."""

from __future__ import annotations

import copy
import enum
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor

NORM_EPS = 1e-5
RUNNING_DECAY = 0.9


class Module:
    """Minimal container that registers parameters and child modules in order."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def named_modules(self, prefix: str = ""):
        yield prefix.rstrip("."), self
        for name, child in self._children.items():
            yield from child.named_modules(f"{prefix}{name}.")

    def clone(self):
        return copy.deepcopy(self)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def requires_grad_(self, flag: bool):
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def state_dict(self) -> dict:
        """Parameters and statistics as named numpy arrays."""
        out = {name: p.data for name, p in self.named_parameters()}
        for mname, m in self.named_modules():
            if isinstance(m, Norm):
                for key, arr in m.statistics().items():
                    out[f"{mname}.{key}"] = arr
        return out

    def load_state_dict(self, state: dict) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise T.ShapeError(f"{name}: expected {p.shape}, got {state[name].shape}")
            p.data = np.array(state[name], dtype=p.dtype)
        for mname, m in self.named_modules():
            if isinstance(m, Norm):
                m.load_statistics({k[len(mname) + 1:]: v for k, v in state.items() if k.startswith(mname + ".")})

    def to_dtype(self, dtype):
        """Cast parameters and statistics in place (float64 is used by gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        for _, m in self.named_modules():
            if isinstance(m, Norm):
                m.stats.cast(dtype)
        return self


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, m: Module) -> None:
        setattr(self, str(len(self._items)), m)
        self._items.append(m)

    def __getitem__(self, i):
        return self._items[i]

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(self._items)


class Conv3d(Module):
    def __init__(self, cin: int, cout: int, kernel=3, stride=1, pad=None, bias: bool = False, rng=None):
        super().__init__()
        rng = np.random.default_rng(0) if rng is None else rng
        kernel = T._triple(kernel)
        fan_in = cin * int(np.prod(kernel))
        w = rng.standard_normal((cout, cin) + kernel) * np.sqrt(2.0 / fan_in)
        self.weight = Parameter(w)
        if bias:
            self.bias = Parameter(np.zeros(cout))
        else:
            self.bias = None
        self.stride = T._triple(stride)
        self.pad = tuple(k // 2 for k in kernel) if pad is None else T._triple(pad)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv3d(x, self.weight, self.bias, self.stride, self.pad)


class Linear(Module):
    def __init__(self, din: int, dout: int, rng=None, zero: bool = False):
        super().__init__()
        rng = np.random.default_rng(0) if rng is None else rng
        w = np.zeros((din, dout)) if zero else rng.standard_normal((din, dout)) / np.sqrt(din)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(dout))

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return T.add(y, T.expand(T.reshape(self.bias, (1, -1)), y.shape))


# ------------------------------------------------------------- normalization


class StatMode(str, enum.Enum):
    TRAIN = "train"
    SOURCE = "source"
    TEST = "test"
    BLENDED = "blended"


@dataclass
class NormStats:
    """Per-channel source/test statistics, blend weight and affine parameters."""

    mu_s: np.ndarray
    var_s: np.ndarray
    gamma: Parameter
    shift: Parameter
    mu_t: np.ndarray | None = None
    var_t: np.ndarray | None = None
    alpha: float = 1.0
    eps: float = NORM_EPS

    @classmethod
    def init(cls, channels: int, dtype=np.float32) -> "NormStats":
        return cls(
            mu_s=np.zeros(channels, dtype=dtype),
            var_s=np.ones(channels, dtype=dtype),
            gamma=Parameter(np.ones(channels, dtype=dtype)),
            shift=Parameter(np.zeros(channels, dtype=dtype)),
        )

    def blended(self, alpha: float | None = None) -> tuple[np.ndarray, np.ndarray]:
        a = self.alpha if alpha is None else alpha
        if not 0.0 <= a <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {a}")
        dt = self.mu_s.dtype.type
        a, b = dt(a), dt(1.0) - dt(a)
        return a * self.mu_s + b * self.mu_t, a * self.var_s + b * self.var_t

    def cast(self, dtype) -> None:
        self.mu_s = self.mu_s.astype(dtype)
        self.var_s = self.var_s.astype(dtype)
        if self.mu_t is not None:
            self.mu_t = self.mu_t.astype(dtype)
            self.var_t = self.var_t.astype(dtype)
        self.gamma.data = self.gamma.data.astype(dtype)
        self.shift.data = self.shift.data.astype(dtype)


def _check_batch(x: Tensor) -> None:
    if x.data.size // x.shape[1] < 2:
        raise ValueError("test statistics need at least 2 elements per channel")


def norm_forward(x: Tensor, stats: NormStats, mode: StatMode | str) -> Tensor:
    """Normalize ``x`` with source, current-batch, or blended statistics.

    In ``test``/``blended`` mode the batch statistics are computed from ``x`` and
    stored in ``stats.mu_t``/``stats.var_t`` as constants (no gradient).
    """
    mode = StatMode(mode)
    if mode is StatMode.SOURCE:
        mu, var = stats.mu_s, stats.var_s
    elif mode in (StatMode.TEST, StatMode.BLENDED):
        _check_batch(x)
        stats.mu_t, stats.var_t = T.batch_stats(x.data)
        mu, var = stats.blended(0.0 if mode is StatMode.TEST else None)
    else:
        raise ValueError("norm_forward does not handle training mode; use Norm")
    return T.normalize(x, mu, var, stats.gamma, stats.shift, stats.eps)


class Norm(Module):
    """Batch normalization with source, test, and blended statistic modes.

    During adaptation (``collect=True``) the per-batch test statistics are
    averaged; :meth:`freeze` then pins that average for evaluation.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.stats = NormStats.init(channels)
        self.gamma = self.stats.gamma
        self.shift = self.stats.shift
        self.mode = StatMode.TRAIN
        self.frozen = False
        self.collect = False
        self._acc = None

    def set_mode(self, mode, alpha: float | None = None) -> None:
        self.mode = StatMode(mode)
        if alpha is not None:
            if not 0.0 <= alpha <= 1.0:
                raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
            self.stats.alpha = float(alpha)
        self.frozen = False

    def start_collecting(self) -> None:
        self.collect = True
        self.frozen = False
        self._acc = None

    def freeze(self) -> None:
        """Pin the averaged test statistics gathered since ``start_collecting``."""
        self.collect = False
        if self.mode in (StatMode.TEST, StatMode.BLENDED) and self._acc is not None:
            mu_sum, var_sum, n = self._acc
            dt = mu_sum.dtype.type
            self.stats.mu_t = mu_sum / dt(n)
            self.stats.var_t = var_sum / dt(n)
            self.frozen = True
        elif self.mode in (StatMode.TEST, StatMode.BLENDED):
            # nothing observed: fall back to the source statistics
            self.mode = StatMode.SOURCE
            self.frozen = False
        self._acc = None

    def __call__(self, x: Tensor) -> Tensor:
        s = self.stats
        if self.mode is StatMode.TRAIN:
            y, mu, var = T.batch_norm(x, s.gamma, s.shift, s.eps)
            d = s.mu_s.dtype.type(RUNNING_DECAY)
            s.mu_s = d * s.mu_s + (1 - d) * mu
            s.var_s = d * s.var_s + (1 - d) * var
            return y
        if self.frozen and self.mode is not StatMode.SOURCE:
            alpha = 0.0 if self.mode is StatMode.TEST else None
            mu, var = s.blended(alpha)
            return T.normalize(x, mu, var, s.gamma, s.shift, s.eps)
        y = norm_forward(x, s, self.mode)
        if self.collect and self.mode is not StatMode.SOURCE:
            if self._acc is None:
                self._acc = [s.mu_t.copy(), s.var_t.copy(), 1]
            else:
                self._acc[0] += s.mu_t
                self._acc[1] += s.var_t
                self._acc[2] += 1
        return y

    def statistics(self) -> dict:
        out = {"mu_s": self.stats.mu_s, "var_s": self.stats.var_s}
        if self.frozen and self.mode is not StatMode.SOURCE:
            alpha = 0.0 if self.mode is StatMode.TEST else self.stats.alpha
            out["mu_t"] = self.stats.mu_t
            out["var_t"] = self.stats.var_t
            out["alpha"] = np.array([alpha], dtype=self.stats.mu_s.dtype)
        return out

    def load_statistics(self, stats: dict) -> None:
        self.stats.mu_s = np.array(stats["mu_s"], dtype=np.float32)
        self.stats.var_s = np.array(stats["var_s"], dtype=np.float32)
        if "mu_t" in stats:
            self.stats.mu_t = np.array(stats["mu_t"], dtype=np.float32)
            self.stats.var_t = np.array(stats["var_t"], dtype=np.float32)
            self.stats.alpha = float(stats["alpha"][0])
            self.mode = StatMode.BLENDED
            self.frozen = True
        else:
            self.mode = StatMode.SOURCE
            self.frozen = False


# -------------------------------------------------------- temporal attention


class TemporalNonLocal(Module):
    """Non-local attention over the time axis only, in residual form.

    Features are average-pooled over space, attended across time steps, and the
    attended values are added back to every spatial position. ``proj_g`` starts
    at zero so a fresh module is the identity map.
    """

    def __init__(self, channels: int, rng=None, init_std: float = 0.01, scale: float | None = None):
        super().__init__()
        rng = np.random.default_rng(0) if rng is None else rng
        self.proj_theta = Parameter(rng.standard_normal((channels, channels)) * init_std)
        self.proj_phi = Parameter(rng.standard_normal((channels, channels)) * init_std)
        self.proj_g = Parameter(np.zeros((channels, channels)))
        self.scale = 1.0 / np.sqrt(channels) if scale is None else float(scale)

    def attention(self, x: Tensor) -> tuple[Tensor, Tensor]:
        n, c, t = x.shape[:3]
        u = T.transpose(T.mean(x, axes=(3, 4)), (0, 2, 1))
        flat = T.reshape(u, (n * t, c))
        q = T.reshape(T.matmul(flat, self.proj_theta), (n, t, c))
        k = T.reshape(T.matmul(flat, self.proj_phi), (n, t, c))
        v = T.reshape(T.matmul(flat, self.proj_g), (n, t, c))
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 2, 1))), self.scale)
        return T.softmax(scores, axis=2), v

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 5:
            raise T.ShapeError(f"temporal non-local expects (N,C,T,H,W), got {x.shape}")
        n, c, t = x.shape[:3]
        if t < 2:
            raise T.ShapeError(f"temporal non-local needs at least 2 time steps, got {t}")
        a, v = self.attention(x)
        out = T.transpose(T.matmul(a, v), (0, 2, 1))
        out = T.expand(T.reshape(out, (n, c, t, 1, 1)), x.shape)
        return T.add(x, out)


def temporal_nonlocal_forward(x: Tensor, m: TemporalNonLocal) -> Tensor:
    return m(x)


# ----------------------------------------------------------- param partition


class GroupTag(str, enum.Enum):
    SHALLOW_ALL = "ShallowAll"
    DEEP_NORM_AFFINE = "DeepNormAffine"
    FROZEN = "Frozen"


@dataclass
class ParamGroup:
    tag: GroupTag
    params: dict = field(default_factory=dict)

    def __iter__(self):
        return iter(self.params.values())

    def __len__(self) -> int:
        return len(self.params)

    def names(self) -> set:
        return set(self.params)


def _norm_param_names(module: Module, prefix: str) -> set:
    names = set()
    for mname, m in module.named_modules(prefix):
        if isinstance(m, Norm):
            names.update({f"{mname}.gamma", f"{mname}.shift"})
    return names


def partition_parameters(model, split_index: int, attention: TemporalNonLocal | None = None) -> dict:
    """Split parameters into fully-trainable shallow layers, norm-affine-only deep
    layers, and frozen ones.

    The stem belongs to the shallow part whenever ``split_index >= 1``; blocks
    ``[0, split_index)`` are shallow. The classifier head is always frozen and
    the attention module, when given, is always shallow.
    """
    nblocks = len(model.blocks)
    if not 0 <= split_index <= nblocks:
        raise ValueError(f"split_index must be in [0, {nblocks}], got {split_index}")
    groups = {tag: ParamGroup(tag) for tag in GroupTag}
    units = [("stem.", model.stem, split_index >= 1)]
    units += [(f"blocks.{i}.", b, i < split_index) for i, b in enumerate(model.blocks)]
    for prefix, unit, shallow in units:
        norm_names = _norm_param_names(unit, prefix)
        for name, p in unit.named_parameters(prefix):
            if shallow:
                tag = GroupTag.SHALLOW_ALL
            elif name in norm_names:
                tag = GroupTag.DEEP_NORM_AFFINE
            else:
                tag = GroupTag.FROZEN
            groups[tag].params[name] = p
    for name, p in model.head.named_parameters("head."):
        groups[GroupTag.FROZEN].params[name] = p
    if attention is not None:
        for name, p in attention.named_parameters("attention."):
            groups[GroupTag.SHALLOW_ALL].params[name] = p
    return groups
