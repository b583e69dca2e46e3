"""Command-line entry point: generate, train, detect, eval, sweep."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import data as data_mod
from . import pipeline as P
from . import plots
from .errors import TsadcError
from .graph import adjacency_rows
from .numerics import no_grad
from .s4 import cached_kernels
from .scoring import average_precision, energy_scores, metrics, threshold_search, write_kv

log = logging.getLogger("tsadc")


def resolve_config(args):
    cfg = config_mod.load(args.config) if args.config else config_mod.Config()
    overrides = dict(config_mod.parse_override(item) for item in args.set or [])
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "variant", None):
        overrides["variant"] = args.variant
    return cfg.update_checked(overrides)


def _out(args, default):
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_generate(args):
    cfg = resolve_config(args)
    out = _out(args, "data")
    splits = data_mod.generate_synthetic(config_mod.synthetic_config(cfg), cfg["seed"])
    summary = {}
    for name, ds in splits.items():
        data_mod.save_dataset(ds, out / f"{name}.tsdc")
        if args.csv:
            data_mod.save_csv(ds, out / f"{name}.csv")
        rep = data_mod.contamination_report(ds)
        summary[f"{name}.n"] = rep["n"]
        summary[f"{name}.abnormal"] = rep["abnormal"]
        summary[f"{name}.rate"] = rep["rate"]
        for t, c in rep["per_type"].items():
            summary[f"{name}.{t}"] = c
    write_kv(out / "contamination.txt", summary)
    print(f"wrote {', '.join(splits)} to {out}")


def _train(cfg, out, splits):
    result = P.fit(cfg, splits["train"], splits["valid"],
                   progress=lambda r: log.info("epoch %d  train %.4f  valid %.4f",
                                               r["epoch"], r["train_total"], r["valid_total"]))
    K, L = splits["train"].K, splits["train"].L
    P.save_models(result.models, cfg, out / "checkpoint.npz", extra={"K": K, "L": L})
    P.write_history(result.history, out / "loss_curve.csv")
    cfg.save(out / "config.toml")
    plots.loss_curve(result.history, out / "loss_curve.png")
    write_kv(out / "train_summary.txt", {
        "epochs_run": len(result.history),
        "best_epoch": result.best_epoch,
        "stopped_early": result.stopped_early,
        "seconds": round(result.seconds, 3),
    })
    return result


def cmd_train(args):
    cfg = resolve_config(args)
    out = _out(args, "run")
    splits = P.load_splits(cfg)
    result = _train(cfg, out, splits)
    print(f"trained {len(result.history)} epochs (best {result.best_epoch}); artifacts in {out}")


def _load_for_scoring(args, out):
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "checkpoint.npz"
    if args.config:
        cfg = resolve_config(args)
        models, _ = P.load_models(ckpt, cfg)
    else:
        # reuse the configuration stored with the checkpoint
        models, cfg = P.load_models(ckpt)
        overrides = dict(config_mod.parse_override(item) for item in args.set or [])
        if args.seed is not None:
            overrides["seed"] = args.seed
        if getattr(args, "variant", None):
            overrides["variant"] = args.variant
        cfg.update_checked(overrides)
    return cfg, models


def export_adjacency(models, x, path, observation=0):
    with no_grad(), cached_kernels():
        _, _, _, A = models.graph(x[observation:observation + 1])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["observation", "interval", "source", "target", "weight"])
        for row in adjacency_rows(A.data[0], observation):
            w.writerow(row[:4] + (repr(row[4]),))


def cmd_detect(args):
    out = _out(args, "run")
    cfg, models = _load_for_scoring(args, out)
    splits = P.load_splits(cfg)
    report = P.detect(models, splits["valid"], splits["test"], cfg, cfg["variant"])
    report.write_csv(out / "scores.csv")
    report.write_metrics(out / "metrics.txt", {"variant": cfg["variant"]})
    plots.score_panels(report, out / "scores.png")
    export_adjacency(models, splits["test"].values, out / "adjacency.csv")
    m = report.metrics
    print(f"variant {cfg['variant']}: F1 {m['F1']:.4f}  Rec {m['Rec']:.4f}  APR {m['APR']:.4f}")


def cmd_eval(args):
    """All three score variants from one checkpoint, next to the energy baseline."""
    out = _out(args, "run")
    cfg, models = _load_for_scoring(args, out)
    splits = P.load_splits(cfg)
    valid, test = splits["valid"], splits["test"]
    reports = P.evaluate_variants(models, valid, test, cfg)
    ref = splits["train"].values
    sv, st = energy_scores(valid.values, ref), energy_scores(test.values, ref)
    tau, _, _ = threshold_search(sv, valid.labels)
    rows = [{"variant": v, **r.metrics, "tau": r.tau} for v, r in reports.items()]
    rows.append({"variant": "energy", **metrics(st, test.labels, tau), "tau": tau})
    # per-type AP against normal observations
    for row, s in zip(rows, [r.s for r in reports.values()] + [st]):
        for t in data_mod.ANOMALY_TYPES:
            keep = (test.labels == 0) | (test.labels == data_mod.type_id(t))
            if np.any(test.labels[keep] > 0):
                row[f"APR.{t}"] = average_precision(s[keep], test.labels[keep])
    P.write_rows(rows, out / "eval.csv")
    for v, r in reports.items():
        r.write_csv(out / f"scores_variant{v}.csv")
    for row in rows:
        print(f"{row['variant']:>7}: F1 {row['F1']:.4f}  Rec {row['Rec']:.4f}  APR {row['APR']:.4f}")


def cmd_sweep(args):
    cfg = resolve_config(args)
    out = _out(args, "sweep")
    values = None
    if args.values:
        raw = [v.strip() for v in args.values.split(",") if v.strip()]
        values = raw if args.axis == "masking-strategy" else [
            int(v) if args.axis == "anomaly-types-n" else float(v) for v in raw]
    rows = P.sweep(cfg, args.axis, values,
                   progress=lambda r: log.info("%s=%s  F1 %.4f  APR %.4f",
                                               args.axis, r["value"], r["F1"], r["APR"]))
    name = args.axis.replace("-", "_")
    P.write_rows(rows, out / f"sweep_{name}.csv", ["value", "F1", "Rec", "APR"])
    plots.sweep_plot(rows, args.axis, out / f"sweep_{name}.png")
    cfg.save(out / "config.toml")
    for r in rows:
        print(f"{r['value']}: F1 {r['F1']:.4f}  Rec {r['Rec']:.4f}  APR {r['APR']:.4f}")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config file with dotted keys")
    common.add_argument("--seed", type=int, help="run seed (overrides the config)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")

    parser = argparse.ArgumentParser(prog="tsadc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="write synthetic train/valid/test files")
    p.add_argument("--csv", action="store_true", help="also write CSV copies")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", parents=[common], help="train and save a checkpoint")
    p.set_defaults(func=cmd_train)

    for name, func, text in (("detect", cmd_detect, "score the test split with one variant"),
                             ("eval", cmd_eval, "compare all variants and the energy baseline")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--checkpoint", help="checkpoint path (default OUT/checkpoint.npz)")
        p.add_argument("--variant", choices=["1", "2", "12"])
        p.set_defaults(func=func)

    p = sub.add_parser("sweep", parents=[common], help="sensitivity sweep over one axis")
    p.add_argument("--axis", required=True, choices=P.SWEEP_AXES)
    p.add_argument("--values", help="comma-separated values (default: the axis' standard grid)")
    p.add_argument("--variant", choices=["1", "2", "12"])
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s", datefmt="%H:%M:%S")
    try:
        args.func(args)
    except TsadcError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
