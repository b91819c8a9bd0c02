"""Command-line pipeline: data generation, training, corruption, adaptation, evaluation."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import harness as H
from .adapt import AdaptationConfig, Distance, Method, adapt_offline
from .corruption import KINDS, SEVERITIES, corrupt_cell
from .model import VideoClassifier, train_clean

log = logging.getLogger("teco")


def _csv_list(kind=str):
    def parse(text: str):
        items = [t.strip() for t in text.split(",") if t.strip()]
        try:
            return tuple(kind(t) for t in items)
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None

    return parse


def _kinds(text: str):
    kinds = _csv_list()(text)
    bad = [k for k in kinds if k not in KINDS]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown corruption kind(s): {', '.join(bad)}")
    return kinds


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--in", dest="inp", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _adapt_flags(multi: bool = False) -> argparse.ArgumentParser:
    """Adaptation hyper-parameters; sweep takes comma lists for method/alpha/beta."""
    p = argparse.ArgumentParser(add_help=False)
    if multi:
        p.add_argument("--method", type=_csv_list(), default=("teco",))
        p.add_argument("--alpha", type=_csv_list(float), default=(None,))
        p.add_argument("--beta", type=_csv_list(float), default=(None,))
        p.add_argument("--iterations", type=_csv_list(int), default=(None,))
    else:
        p.add_argument("--method", choices=[m.value for m in Method], default="teco")
        p.add_argument("--alpha", type=float)
        p.add_argument("--beta", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--time-gap", type=int)
    p.add_argument("--distance", choices=[d.value for d in Distance])
    p.add_argument("--stage", type=int)
    p.add_argument("--split", type=int)
    return p


def _grid_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--kinds", type=_kinds, default=KINDS)
    p.add_argument("--severities", type=_csv_list(int), default=SEVERITIES)
    p.add_argument("--data", type=Path, help="dataset (TVDS) to evaluate on")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="teco", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    g = sub.add_parser("gen-data", parents=[common], help="generate train/test TVDS files into --out DIR")
    g.add_argument("--clips-per-class", type=int, default=125)
    g.add_argument("--test-fraction", type=float, default=0.2)
    g.add_argument("--frames", type=int, default=D.DEFAULT_T)

    t = sub.add_parser("train", parents=[common], help="train the classifier on --in, write checkpoint to --out")
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--lr", type=float, default=0.05)
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--batch-size", type=int, default=16)
    t.add_argument("--test", type=Path, help="held-out TVDS for clean accuracy")
    t.add_argument("--split", type=int, default=2)
    t.add_argument("--stage", type=int, default=2)

    c = sub.add_parser("corrupt", parents=[common], help="write one corrupted TVDS per cell into --out DIR")
    c.add_argument("--kinds", type=_kinds, default=KINDS)
    c.add_argument("--severities", type=_csv_list(int), default=SEVERITIES)

    a = sub.add_parser("adapt", parents=[common, _adapt_flags()], help="adapt checkpoint --in to --data")
    a.add_argument("--data", type=Path, required=True)

    e = sub.add_parser(
        "eval", parents=[common, _adapt_flags(), _grid_flags()],
        help="clean accuracy, corruption benchmark, or feature coherence of checkpoint --in",
    )
    e.add_argument("--clean-only", action="store_true", help="skip corruption; report accuracy on --data")
    e.add_argument("--coherence", action="store_true", help="emit the per-clip feature coherence report")

    s = sub.add_parser("sweep", parents=[common, _adapt_flags(multi=True), _grid_flags()], help="mPC over a grid")

    r = sub.add_parser("report", parents=[common], help="compare report CSVs: mPC per method and delta")
    r.add_argument("reports", nargs="+", type=Path)
    for p in (g, t, c, a, e, s, r):
        p.set_defaults(parser=p)
    return parser


def _config(args) -> AdaptationConfig:
    over = {}
    for flag, key in (
        ("alpha", "alpha"), ("beta", "beta"), ("lam", "lam"), ("lr", "lr"), ("momentum", "momentum"),
        ("batch_size", "batch_size"), ("epochs", "epochs"), ("time_gap", "time_gap"), ("distance", "distance"),
        ("stage", "coherence_stage"), ("split", "split_index"),
    ):
        v = getattr(args, flag, None)
        if v is not None:
            over[key] = v
    return AdaptationConfig.for_method(args.method, seed=args.seed, **over)


def _emit(args, text: str) -> None:
    if args.out is None:
        sys.stdout.write(text)
    else:
        args.out.write_text(text)


def _need(args, *names) -> None:
    missing = [f"--{n.replace('_', '-')}" if n != "inp" else "--in" for n in names if getattr(args, n) is None]
    if missing:
        args.parser.error(f"missing required option(s): {', '.join(missing)}")


def cmd_gen_data(args) -> int:
    _need(args, "out")
    ds = D.generate_dataset(clips_per_class=args.clips_per_class, T=args.frames, seed=args.seed)
    train, test = D.train_test_split(ds, args.test_fraction, seed=args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    D.save_dataset(train, args.out / "train.tvds")
    D.save_dataset(test, args.out / "test.tvds")
    print(f"wrote {len(train)} train / {len(test)} test clips to {args.out}")
    return 0


def cmd_train(args) -> int:
    _need(args, "inp", "out")
    train = D.load_dataset(args.inp)
    test = D.load_dataset(args.test) if args.test else None
    model = VideoClassifier(split_index=args.split, coherence_stage=args.stage, seed=args.seed)
    res = train_clean(
        model, train, epochs=args.epochs, lr=args.lr, momentum=args.momentum, seed=args.seed,
        batch_size=args.batch_size, test_set=test,
    )
    H.save_checkpoint(res.model, args.out)
    msg = f"train accuracy {res.epoch_acc[-1]:.4f}"
    if res.test_acc is not None:
        msg += f", clean test accuracy {res.test_acc:.4f}"
    print(msg)
    return 0


def cmd_corrupt(args) -> int:
    _need(args, "inp", "out")
    ds = D.load_dataset(args.inp)
    args.out.mkdir(parents=True, exist_ok=True)
    for k in args.kinds:
        for s in args.severities:
            D.save_dataset(corrupt_cell(ds, k, s, args.seed), args.out / f"{k}-{s}.tvds")
    print(f"wrote {len(args.kinds) * len(args.severities)} corrupted sets to {args.out}")
    return 0


def cmd_adapt(args) -> int:
    _need(args, "inp", "out")
    model = H.load_checkpoint(args.inp)
    history: list = []
    adapted = adapt_offline(model, D.load_dataset(args.data), _config(args), history)
    H.save_checkpoint(adapted, args.out)
    print(f"{len(history)} adaptation steps; wrote {args.out}")
    return 0


def cmd_eval(args) -> int:
    _need(args, "inp", "data")
    model = H.load_checkpoint(args.inp)
    ds = D.load_dataset(args.data)
    cfg = _config(args)
    if args.coherence:
        rep = H.feature_coherence_report(model, ds, cfg.time_gap, cfg.coherence_stage, cfg.k_local)
        if args.format == "json":
            text = json.dumps({"per_clip": rep.per_clip.tolist(), "aggregate": rep.aggregate,
                               "time_gap": rep.time_gap, "stage": rep.stage}, indent=2) + "\n"
        else:
            text = rep.to_csv()
        _emit(args, text)
        return 0
    if args.clean_only:
        acc = H.evaluate(adapt_offline(model, ds, cfg), ds, cfg.k_global)
        if args.format == "json":
            text = json.dumps({"method": cfg.method.value, "accuracy": acc, "seed": args.seed}) + "\n"
        else:
            text = H.rows_to_csv(H.CSV_HEADER, [(cfg.method.value, "clean", "0", f"{acc:.6f}", str(args.seed))])
        _emit(args, text)
        return 0
    rep = H.run_benchmark(model, ds, cfg, args.kinds, args.severities, args.seed)
    _emit(args, rep.to_csv() if args.format == "csv" else rep.to_json() + "\n")
    return 0


def cmd_sweep(args) -> int:
    _need(args, "inp", "data")
    for m in args.method:
        Method(m)
    base = {}
    for flag, key in (
        ("lam", "lam"), ("lr", "lr"), ("momentum", "momentum"), ("batch_size", "batch_size"),
        ("epochs", "epochs"), ("time_gap", "time_gap"), ("distance", "distance"),
        ("stage", "coherence_stage"), ("split", "split_index"),
    ):
        v = getattr(args, flag)
        if v is not None:
            base[key] = v
    rows = H.sweep(
        H.load_checkpoint(args.inp), D.load_dataset(args.data), args.method, args.alpha, args.beta,
        args.iterations, args.kinds, args.severities, args.seed, base,
    )
    if args.format == "json":
        text = json.dumps([dict(zip(H.SWEEP_HEADER, r)) for r in rows], indent=2) + "\n"
    else:
        text = H.rows_to_csv(H.SWEEP_HEADER, rows)
    _emit(args, text)
    return 0


def report_summary(paths) -> dict:
    """mPC per method and file, plus the delta of every method against the first file."""
    runs = [(str(p), H.read_report_csv(Path(p).read_text())) for p in paths]
    out = {"runs": [{"file": f, "mpc": {m: e["mpc"] for m, e in r.items()}} for f, r in runs], "delta": []}
    base_file, base = runs[0]
    for f, r in runs[1:]:
        for m, e in r.items():
            ref = base.get(m) or next(iter(base.values()))
            out["delta"].append({"file": f, "method": m, "baseline": base_file, "delta": e["mpc"] - ref["mpc"]})
    # a single file with several methods: deltas against its first method
    if len(runs) == 1 and len(base) > 1:
        names = list(base)
        for m in names[1:]:
            out["delta"].append({"file": base_file, "method": m, "baseline": names[0],
                                 "delta": base[m]["mpc"] - base[names[0]]["mpc"]})
    return out


def cmd_report(args) -> int:
    summary = report_summary(args.reports)
    if args.format == "json":
        text = json.dumps(summary, indent=2, sort_keys=True) + "\n"
    else:
        rows = [(r["file"], m, "mpc", f"{v:.6f}") for r in summary["runs"] for m, v in r["mpc"].items()]
        rows += [(d["file"], d["method"], f"delta_vs:{d['baseline']}", f"{d['delta']:+.6f}") for d in summary["delta"]]
        text = H.rows_to_csv(("file", "method", "metric", "value"), rows)
    _emit(args, text)
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "corrupt": cmd_corrupt,
    "adapt": cmd_adapt,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ValueError, OSError) as exc:
        print(f"teco {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
