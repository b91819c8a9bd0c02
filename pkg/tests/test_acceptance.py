"""End-to-end acceptance checks; each test prints one PASS/FAIL line.

The robustness criteria share one cached benchmark: for each of three seeds a
dataset is generated, a classifier trained on it, and every method adapted to
all 45 corrupted cells of the held-out split.
"""

import os
import re
import subprocess
import sys
import time
from collections import Counter
from pathlib import Path

import numpy as np
import pytest

from oracles import brute_mean
from teco import corruption as C
from teco import data as D
from teco.adapt import AdaptationConfig, LocalSampling, adapt_offline, mean_entropy, updatable_parameters
from teco.harness import compute_mpc, feature_coherence_report, run_benchmark
from teco.model import VideoClassifier, train_clean

ROOT = Path(__file__).resolve().parents[1]
SEEDS = (0, 1, 2)
CLIPS_PER_CLASS = 125
TRAIN_EPOCHS = 30
ADAPT_LR = 1e-3
BENCH_BUDGET_S = 30 * 60
NOISE_CELL = ("gaussian_noise", 3)

METHODS = {
    "standard": AdaptationConfig.for_method("standard"),
    "bn": AdaptationConfig.for_method("bn"),
    "tent": AdaptationConfig.for_method("tent", lr=ADAPT_LR),
    "teco": AdaptationConfig.for_method("teco", lr=ADAPT_LR),
    "teco_no_local": AdaptationConfig.for_method("teco", lr=ADAPT_LR, local_sampling=LocalSampling.NONE),
}


def report(capsys, n: int, title: str, ok: bool, detail: str = "") -> None:
    with capsys.disabled():
        print(f"\n[criterion {n:2d}] {'PASS' if ok else 'FAIL'}  {title}  {detail}".rstrip())
    assert ok, f"criterion {n} failed: {detail}"


def setup_seed(seed: int):
    ds = D.generate_dataset(clips_per_class=CLIPS_PER_CLASS, seed=seed)
    train, test = D.train_test_split(ds, 0.2, seed=seed)
    res = train_clean(VideoClassifier(seed=seed), train, epochs=TRAIN_EPOCHS, lr=0.05, seed=seed, test_set=test)
    return res.model, test, res.test_acc


@pytest.fixture(scope="module")
def bench():
    start = time.perf_counter()
    runs = []
    for seed in SEEDS:
        model, test, clean = setup_seed(seed)
        corrupted = C.corrupt_dataset(test, seed=seed)
        mpc = {}
        for name, cfg in METHODS.items():
            rep = run_benchmark(model, test, cfg.with_(seed=seed), seed=seed, corrupted=corrupted)
            mpc[name] = rep.mpc
        runs.append({"seed": seed, "model": model, "test": test, "clean": clean, "corrupted": corrupted, "mpc": mpc})
    return {"runs": runs, "elapsed": time.perf_counter() - start}


@pytest.fixture(scope="module")
def small_setup():
    ds = D.generate_dataset(clips_per_class=6, seed=7)
    train, test = D.train_test_split(ds, 0.5, seed=7)
    model = train_clean(VideoClassifier(seed=7), train, epochs=3, seed=7).model
    return model, C.corrupt_cell(test, "fog", 3, seed=7)


# ------------------------------------------------------------------ 1


def test_criterion_01_gradient_suite(capsys):
    files = ["tests/test_tensor.py", "tests/test_nn.py", "tests/test_model.py"]
    base = [sys.executable, "-m", "pytest", *files, "-k", "grad", "-p", "no:cacheprovider"]
    collected = subprocess.run(base + ["--collect-only", "-q"], cwd=ROOT, capture_output=True, text=True).stdout
    cases = Counter(re.sub(r"\[.*", "", line) for line in collected.splitlines() if "::" in line)
    checks = {k: v for k, v in cases.items() if k.endswith("_grad")}
    t0 = time.perf_counter()
    run = subprocess.run(base + ["-q"], cwd=ROOT, capture_output=True, text=True)
    elapsed = time.perf_counter() - t0
    thin = {k: v for k, v in checks.items() if v < 20}
    ok = run.returncode == 0 and not thin and len(checks) >= 15 and elapsed < 60
    report(capsys, 1, "finite-difference gradient suite", ok,
           f"{len(checks)} checks, {sum(checks.values())} cases, min {min(checks.values())}/check, {elapsed:.1f}s"
           + (f", thin: {sorted(thin)}" if thin else "") + ("" if run.returncode == 0 else "\n" + run.stdout[-2000:]))


# ------------------------------------------------------------------ 2


def test_criterion_02_noop_chain(small_setup, capsys):
    model, cell = small_setup
    x = D.sample_batch(cell.clips, 8)

    def same(a, b):
        sa, sb = a.state_dict(), b.state_dict()
        params = sa.keys() == sb.keys() and all(sa[k].tobytes() == sb[k].tobytes() for k in sa)
        return params and a.forward_global(x).data.tobytes() == b.forward_global(x).data.tobytes()

    standard = adapt_offline(model, cell, AdaptationConfig.for_method("standard"))
    bn = adapt_offline(model, cell, AdaptationConfig.for_method("bn", alpha=0.4))
    teco0 = adapt_offline(model, cell, AdaptationConfig(alpha=0.4, lr=0.0))
    raw = adapt_offline(model, cell, AdaptationConfig(alpha=1.0, lr=0.0, epochs=0))
    checks = {"standard==input": same(standard, model), "teco(lr=0)==bn": same(teco0, bn),
              "teco(alpha=1,0 steps)==input": same(raw, model)}
    report(capsys, 2, "exact no-op chain", all(checks.values()), str(checks))


# ------------------------------------------------------------------ 3


def test_criterion_03_partition_safety(small_setup, capsys):
    model, cell = small_setup
    before = {k: p.data.copy() for k, p in model.named_parameters()}
    bad = {}
    for method in ("standard", "bn", "tent", "shot", "teco"):
        cfg = AdaptationConfig.for_method(method, lr=0.05)
        out = adapt_offline(model, cell, cfg)
        allowed = set(updatable_parameters(out, cfg))
        after = dict(out.named_parameters())
        changed = {k for k in before if before[k].tobytes() != after[k].data.tobytes()}
        if after.keys() != before.keys() or changed - allowed:
            bad[method] = sorted(changed - allowed)
    report(capsys, 3, "partition safety (full parameter diff)", not bad, str(bad) if bad else "5 methods clean")


# ------------------------------------------------------------------ 4


def test_criterion_04_mpc_oracle(capsys):
    rng = np.random.default_rng(4)
    mism = 0
    for _ in range(100):
        ca = rng.random((9, 5)) if rng.random() < 0.5 else rng.random((int(rng.integers(1, 12)), int(rng.integers(1, 6))))
        mism += compute_mpc(ca) != brute_mean(ca)
    report(capsys, 4, "mPC equals independent summation", mism == 0, f"{mism}/100 mismatches")


# ------------------------------------------------------------------ 5


def test_criterion_05_corruption_suite(capsys):
    clips = D.generate_dataset(clips_per_class=7, seed=5).subset(np.arange(50))
    problems = []
    for kind in C.KINDS:
        if C.corrupt_frames(clips.clips[0], C.CorruptionSpec(kind, 0, 1)).tobytes() != clips.clips[0].tobytes():
            problems.append(f"{kind}: severity 0 not identity")
        dist = []
        for s in C.SEVERITIES:
            out = C.corrupt_cell(clips, kind, s, seed=0).clips
            if out.min() < 0 or out.max() > 1:
                problems.append(f"{kind}/{s}: out of range")
            dist.append(float(np.abs(out - clips.clips).mean()))
        if any(b < a for a, b in zip(dist, dist[1:])):
            problems.append(f"{kind}: distortion not monotone {np.round(dist, 4).tolist()}")
    flat = np.full((16, 3, 32, 32), 0.5, np.float32)
    sigma = float((C.corrupt_frames(flat, C.CorruptionSpec("gaussian_noise", 3, seed=3)) - flat).std())
    if abs(sigma - 0.12) > 0.012:
        problems.append(f"gaussian sigma {sigma:.4f}")
    report(capsys, 5, "corruption suite", not problems, "; ".join(problems) or f"9 kinds, sigma={sigma:.4f}")


# ------------------------------------------------------------------ 6


def test_criterion_06_robustness_ordering(bench, capsys):
    runs = bench["runs"]
    mean = {m: float(np.mean([r["mpc"][m] for r in runs])) for m in METHODS}
    clean = [r["clean"] for r in runs]
    ok = (
        min(clean) >= 0.9
        and mean["teco"] - mean["standard"] >= 0.02
        and mean["teco"] >= mean["bn"]
        and mean["teco"] >= mean["tent"]
        and bench["elapsed"] <= BENCH_BUDGET_S
    )
    per_seed = "; ".join(
        f"seed {r['seed']}: " + " ".join(f"{m}={v:.4f}" for m, v in r["mpc"].items()) for r in runs
    )
    detail = (
        f"mean mPC teco={mean['teco']:.4f} standard={mean['standard']:.4f} bn={mean['bn']:.4f} "
        f"tent={mean['tent']:.4f}; clean={np.round(clean, 3).tolist()}; {bench['elapsed']:.0f}s\n    {per_seed}"
    )
    report(capsys, 6, "robustness ordering over 3 seeds", ok, detail)


# ------------------------------------------------------------------ 7


def test_criterion_07_ablation_direction(bench, capsys):
    wins = [r["mpc"]["teco"] >= r["mpc"]["teco_no_local"] for r in bench["runs"]]
    detail = ", ".join(f"{r['mpc']['teco']:.4f} vs {r['mpc']['teco_no_local']:.4f}" for r in bench["runs"])
    report(capsys, 7, "TeCo >= TeCo without local path on >= 2/3 seeds", sum(wins) >= 2, f"{sum(wins)}/3 ({detail})")


# ------------------------------------------------------------------ 8


def test_criterion_08_coherence_effect(bench, capsys):
    pairs = []
    for r in bench["runs"]:
        cell = r["corrupted"][NOISE_CELL]
        adapted = adapt_offline(r["model"], cell, METHODS["teco"].with_(seed=r["seed"]))
        pairs.append((feature_coherence_report(r["model"], cell).aggregate, feature_coherence_report(adapted, cell).aggregate))
    ok = all(after < before for before, after in pairs)
    detail = ", ".join(f"{b:.4f} -> {a:.4f}" for b, a in pairs)
    report(capsys, 8, "TeCo lowers tap-feature temporal variation on noisy data, 3/3", ok, detail)


# ------------------------------------------------------------------ 9


def test_criterion_09_entropy_descent(bench, capsys):
    pairs = []
    for r in bench["runs"]:
        cell = r["corrupted"][NOISE_CELL]
        cfg = METHODS["teco"].with_(seed=r["seed"])
        # iteration 0: same statistics pathway, no parameter update yet
        start = mean_entropy(adapt_offline(r["model"], cell, cfg.with_(lr=0.0)), cell)
        end = mean_entropy(adapt_offline(r["model"], cell, cfg), cell)
        pairs.append((start, end))
    ok = all(end < start for start, end in pairs)
    report(capsys, 9, "mean prediction entropy falls over the epoch, 3/3", ok,
           ", ".join(f"{s:.4f} -> {e:.4f}" for s, e in pairs))


# ----------------------------------------------------------------- 10


def run_pipeline(workdir: Path) -> bytes:
    env = dict(os.environ, OMP_NUM_THREADS="1", OPENBLAS_NUM_THREADS="1", MKL_NUM_THREADS="1")
    env["PYTHONPATH"] = str(ROOT / "src") + os.pathsep + env.get("PYTHONPATH", "")
    cli = [sys.executable, "-m", "teco.cli"]
    steps = [
        ["gen-data", "--out", str(workdir), "--clips-per-class", "4", "--seed", "3"],
        ["train", "--in", str(workdir / "train.tvds"), "--out", str(workdir / "m.teco"), "--epochs", "2", "--seed", "3"],
        ["eval", "--in", str(workdir / "m.teco"), "--data", str(workdir / "test.tvds"), "--method", "teco",
         "--kinds", "gaussian_noise,fog,frame_rate", "--seed", "3", "--out", str(workdir / "report.csv")],
    ]
    for args in steps:
        subprocess.run(cli + args, check=True, env=env, capture_output=True)
    return (workdir / "report.csv").read_bytes()


def test_criterion_10_determinism(tmp_path, capsys):
    a = run_pipeline(tmp_path / "a")
    b = run_pipeline(tmp_path / "b")
    report(capsys, 10, "byte-identical CSV from two pipeline runs", a == b and len(a) > 0,
           f"{len(a.splitlines())} lines, {len(a)} bytes")
