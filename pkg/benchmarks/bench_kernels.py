"""Compare the compiled im2col/col2im kernels against the numpy fallback.

Run with ``python benchmarks/bench_kernels.py``. Kernel timings call both
modules directly; the end-to-end row times one training step of the default
classifier in a subprocess per backend (selected through TECO_PURE_PYTHON).
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from teco import _kernels_py

try:
    from teco import _kernels
except ImportError:
    _kernels = None

# (input shape, kernel, stride, pad) for layers of the default model
CASES = {
    "stem": ((16, 3, 8, 32, 32), (1, 3, 3), (1, 2, 2), (0, 1, 1)),
    "block1": ((16, 8, 8, 16, 16), (1, 3, 3), (1, 1, 1), (0, 1, 1)),
    "block3": ((16, 16, 8, 8, 8), (3, 3, 3), (2, 2, 2), (1, 1, 1)),
}

STEP = """
import numpy as np
from teco import data as D, tensor as T
from teco.model import VideoClassifier, cross_entropy
from teco.nn import StatMode
m = VideoClassifier(); m.set_stat_mode(StatMode.TRAIN); m.requires_grad_(True)
x = np.random.default_rng(0).random((16, 3, 8, 32, 32), dtype=np.float32)
y = np.arange(16) % 8
def step():
    m.zero_grad(); cross_entropy(m.forward_global(x), y).backward()
"""


def geometry(shape, kernel, stride, pad):
    padded = tuple(s + 2 * p for s, p in zip(shape[2:], pad))
    out = tuple((s - k) // st + 1 for s, k, st in zip(padded, kernel, stride))
    return shape[:2] + padded, out


def time_kernels(module, repeat: int) -> dict:
    rng = np.random.default_rng(0)
    out = {}
    for name, (shape, kernel, stride, pad) in CASES.items():
        pshape, osize = geometry(shape, kernel, stride, pad)
        xpad = np.ascontiguousarray(rng.random(pshape, dtype=np.float32))
        cols = np.ascontiguousarray(module.im2col3d(xpad, kernel, stride, osize))
        fwd = min(timeit.repeat(lambda: module.im2col3d(xpad, kernel, stride, osize), number=5, repeat=repeat)) / 5
        bwd = min(timeit.repeat(lambda: module.col2im3d(cols, pshape, kernel, stride, osize), number=5, repeat=repeat)) / 5
        out[name] = (fwd, bwd)
    return out


def time_step(pure: bool, repeat: int) -> float:
    env = dict(os.environ, TECO_PURE_PYTHON="1" if pure else "0")
    code = STEP + f"import timeit\nprint(min(timeit.repeat(step, number=1, repeat={repeat})))"
    res = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    return float(res.stdout.strip())


def check_agreement() -> bool:
    if _kernels is None:
        return True
    rng = np.random.default_rng(1)
    for shape, kernel, stride, pad in CASES.values():
        pshape, osize = geometry(shape, kernel, stride, pad)
        xpad = rng.random(pshape, dtype=np.float32)
        a, b = _kernels.im2col3d(xpad, kernel, stride, osize), _kernels_py.im2col3d(xpad, kernel, stride, osize)
        if not np.array_equal(a, b):
            return False
        cols = np.ascontiguousarray(a)
        if not np.array_equal(_kernels.col2im3d(cols, pshape, kernel, stride, osize),
                              _kernels_py.col2im3d(cols, pshape, kernel, stride, osize)):
            return False
    return True


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--no-step", action="store_true", help="skip the end-to-end training-step timing")
    args = ap.parse_args(argv)

    backends = {"python": _kernels_py}
    if _kernels is not None:
        backends["compiled"] = _kernels
    else:
        print("compiled extension not built; timing the fallback only")
    results = {name: time_kernels(mod, args.repeat) for name, mod in backends.items()}

    print(f"{'layer':8s} {'op':8s} " + " ".join(f"{b:>12s}" for b in backends) + ("  speedup" if len(backends) > 1 else ""))
    for layer in CASES:
        for i, op in enumerate(("im2col", "col2im")):
            ts = [results[b][layer][i] for b in backends]
            row = f"{layer:8s} {op:8s} " + " ".join(f"{t * 1e3:10.3f}ms" for t in ts)
            if len(ts) > 1:
                row += f"  {ts[0] / ts[1]:6.2f}x"
            print(row)
    if not args.no_step:
        ts = [time_step(b == "python", args.repeat) for b in backends]
        row = f"{'model':8s} {'step':8s} " + " ".join(f"{t * 1e3:10.1f}ms" for t in ts)
        if len(ts) > 1:
            row += f"  {ts[0] / ts[1]:6.2f}x"
        print(row)
    print("backends agree bitwise:", check_agreement())
    return 0


if __name__ == "__main__":
    sys.exit(main())
