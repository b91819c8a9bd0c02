"""Test-time adaptation for video classifiers with a temporal-coherence objective.

The package bundles a small reverse-mode autodiff engine, a 3-D residual
classifier, a synthetic moving-shape video benchmark with graded corruptions,
and the adaptation methods compared on it.
"""

from .adapt import AdaptationConfig, Distance, LocalSampling, Method, adapt_offline
from .harness import EvalReport, compute_mpc, evaluate, load_checkpoint, run_benchmark, save_checkpoint
from .kernels import BACKEND
from .model import VideoClassifier, train_clean

__version__ = "0.1.0"

__all__ = [
    "AdaptationConfig",
    "BACKEND",
    "Distance",
    "EvalReport",
    "LocalSampling",
    "Method",
    "VideoClassifier",
    "adapt_offline",
    "compute_mpc",
    "evaluate",
    "load_checkpoint",
    "run_benchmark",
    "save_checkpoint",
    "train_clean",
]
