"""Command-line driver: ``uaretain {gen,train,sweep,eval,idk,attn}``."""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import calib, data, infer
from .retain import Variant
from .train import SWEEP_GRID, TrainConfig, load_checkpoint, save_checkpoint, sweep, train

OUT_ENV = "UARETAIN_OUT"


class CliError(Exception):
    pass


@dataclass
class RunConfig:
    synth: data.SynthConfig = field(default_factory=data.SynthConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    variant: str = "ua"
    samples: int = infer.DEFAULT_SAMPLES
    n_bins: int = 10
    thresholds: list[float] | None = None
    split_seed: int = 1
    seed: int = 0
    append_mask: bool = False
    attention_threshold: float = 0.01
    target_correct: float = 0.7

    def validate(self) -> None:
        self.synth.validate()
        self.train.validate()
        Variant.parse(self.variant)
        if self.samples < 1:
            raise ValueError("samples must be >= 1")
        if self.n_bins < 1:
            raise ValueError("n_bins must be >= 1")
        if self.thresholds is not None:
            if not self.thresholds:
                raise ValueError("threshold list is empty")
            if any(t < 0 for t in self.thresholds):
                raise ValueError("thresholds must be >= 0")
        if self.attention_threshold < 0:
            raise ValueError("attention_threshold must be >= 0")
        if not 0.0 <= self.target_correct <= 1.0:
            raise ValueError("target_correct must lie in [0, 1]")

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        doc = dict(doc)
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        synth = data.SynthConfig(**doc.pop("synth", {}))
        tr = TrainConfig.from_dict(doc.pop("train", {}))
        return cls(synth=synth, train=tr, **doc)


def load_run_config(args) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {args.config}: {exc}") from None
        cfg = RunConfig.from_dict(doc)
    if args.seed is not None:
        cfg.seed = cfg.synth.seed = cfg.train.seed = args.seed
    if getattr(args, "variant", None):
        cfg.variant = args.variant
    if getattr(args, "samples", None) is not None:
        cfg.samples = args.samples
    if getattr(args, "bins", None) is not None:
        cfg.n_bins = args.bins
    cfg.validate()
    return cfg


def out_dir(args) -> Path:
    path = Path(args.out or os.environ.get(OUT_ENV) or ".")
    path.mkdir(parents=True, exist_ok=True)
    return path


def sidecars(csv_path: Path) -> tuple[Path, Path]:
    stem = csv_path.with_suffix("")
    return Path(f"{stem}.features.txt"), Path(f"{stem}.relevance.csv")


def read_dataset(path) -> data.Dataset:
    path = Path(path)
    if not path.is_file():
        raise CliError(f"no such data file: {path}")
    features, relevance = sidecars(path)
    names = data.read_feature_list(features) if features.is_file() else None
    ds = data.load_csv(path, names)
    if relevance.is_file():
        ds = data.read_relevance(ds, relevance)
    return ds


def write_document(path_stem: Path, doc: dict) -> None:
    """``key: value`` text plus a JSON mirror."""
    lines = [f"{k}: {_text(v)}" for k, v in doc.items()]
    Path(f"{path_stem}.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    Path(f"{path_stem}.json").write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def _text(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _prepared(ds: data.Dataset, split_seed: int, append_mask: bool, standardizer=None) -> data.Dataset:
    sp = data.split(ds, split_seed)
    out = data.preprocess(ds, sp.train, standardizer=standardizer, append_mask=append_mask)
    out.split = sp
    return out


# ------------------------------------------------------------------- commands

def cmd_gen(cfg: RunConfig, out: Path) -> Path:
    ds = data.gen_synthetic(cfg.synth)
    target = out / "data.csv"
    features, relevance = sidecars(target)
    data.write_csv(ds, target)
    data.write_feature_list(ds.feature_names, features)
    data.write_relevance(ds, relevance)
    return target


def cmd_train(cfg: RunConfig, data_path, out: Path) -> Path:
    variant = Variant.parse(cfg.variant)
    ds = _prepared(read_dataset(data_path), cfg.split_seed, cfg.append_mask)
    res = train(ds, variant, cfg.train)
    extra = {
        "feature_names": ds.feature_names,
        "standardizer_mean": [float(v) for v in ds.standardizer.mean],
        "standardizer_sd": [float(v) for v in ds.standardizer.sd],
        "split_seed": cfg.split_seed,
        "append_mask": cfg.append_mask,
        "n_records": len(ds),
        "best_epoch": res.best_epoch,
        "best_val_auroc": res.best_val_auroc,
    }
    ckpt = out / "checkpoint.json"
    save_checkpoint(ckpt, res.params, cfg.train, extra)
    with (out / "history.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("epoch", "steps", "train_loss", "val_auroc"))
        for h in res.history:
            w.writerow((h["epoch"], h["steps"], repr(h["train_loss"]),
                        "" if h["val_auroc"] is None else repr(h["val_auroc"])))
    return ckpt


def cmd_sweep(cfg: RunConfig, data_path, out: Path, grid: dict | None = None) -> dict:
    variant = Variant.parse(cfg.variant)
    ds = _prepared(read_dataset(data_path), cfg.split_seed, cfg.append_mask)
    grid = grid or SWEEP_GRID
    rows = sweep(ds, variant, cfg.train, grid)
    keys = sorted(grid)
    with (out / "sweep.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow((*keys, "best_val_auroc", "best_epoch"))
        for r in rows:
            w.writerow((*(r[k] for k in keys), "" if r["best_val_auroc"] is None else repr(r["best_val_auroc"]),
                        r["best_epoch"]))
    scored = [r for r in rows if r["best_val_auroc"] is not None]
    best = max(scored, key=lambda r: r["best_val_auroc"]) if scored else rows[0]
    summary = {"variant": variant.value, "n_cells": len(rows), **{f"best_{k}": best[k] for k in keys},
               "best_val_auroc": best["best_val_auroc"]}
    write_document(out / "sweep_best", summary)
    return summary


def _load_for_eval(ckpt_path, data_path):
    ckpt = load_checkpoint(ckpt_path)
    extra = ckpt.extra
    std = data.Standardizer(np.array(extra["standardizer_mean"]), np.array(extra["standardizer_sd"]))
    raw = read_dataset(data_path)
    if extra.get("n_records") is not None and len(raw) != extra["n_records"]:
        raise CliError(f"dataset has {len(raw)} records, checkpoint was trained on {extra['n_records']}")
    ds = _prepared(raw, extra["split_seed"], extra.get("append_mask", False), std)
    if ds.n_features != ckpt.params.dims.n_features:
        raise CliError(f"dataset has {ds.n_features} features, model expects {ckpt.params.dims.n_features}")
    return ckpt, ds


def _split_records(ds: data.Dataset, which: str) -> list[data.Record]:
    if which == "all":
        return list(ds.records)
    ids = {"train": ds.split.train, "validation": ds.split.validation, "test": ds.split.test}[which]
    return ds.subset(ids).records


def cmd_eval(cfg: RunConfig, ckpt_path, data_path, out: Path, which: str = "test") -> dict:
    ckpt, ds = _load_for_eval(ckpt_path, data_path)
    records = _split_records(ds, which)
    dists = infer.mc_predict_many(records, ckpt.params, cfg.samples, seed=cfg.seed,
                                  dropout_rate=ckpt.config.dropout_rate)
    labels = [r.label for r in records]
    infer.write_predictions(out / "predictions.csv", [r.id for r in records], labels, dists)
    report = calib.calibration_report([d.mean for d in dists], labels, cfg.n_bins)
    calib.write_reliability_csv(report.bins, out / "reliability.csv")
    doc = {"auroc": report.auroc, "ece": report.ece, "n": len(records), "n_bins": cfg.n_bins,
           "variant": ckpt.params.variant.value, "S": cfg.samples, "seed": cfg.seed, "split": which}
    write_document(out / "metrics", doc)
    return doc


def cmd_idk(cfg: RunConfig, predictions_path, out: Path) -> dict:
    ids, labels, dists = infer.read_predictions(predictions_path)
    thresholds = cfg.thresholds if cfg.thresholds is not None else infer.default_thresholds(dists)
    points = infer.idk_curve(dists, labels, thresholds)
    with (out / "idk_curve.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("threshold", "correct_ratio", "incorrect_ratio", "idk_ratio",
                    "idk_fp", "idk_fn", "idk_tp", "idk_tn"))
        for p in points:
            b = infer.idk_breakdown(dists, labels, p.threshold)
            w.writerow((repr(p.threshold), repr(p.correct_ratio), repr(p.incorrect_ratio), repr(p.idk_ratio),
                        b["FP"], b["FN"], b["TP"], b["TN"]))
    chosen = infer.threshold_for_correct_ratio(points, cfg.target_correct)
    counts = infer.idk_breakdown(dists, labels, chosen.threshold)
    doc = {"n": len(ids), "target_correct": cfg.target_correct, "threshold": chosen.threshold,
           "correct_ratio": chosen.correct_ratio, "incorrect_ratio": chosen.incorrect_ratio,
           "idk_ratio": chosen.idk_ratio, **{f"idk_{k.lower()}": v for k, v in counts.items()}}
    write_document(out / "idk_breakdown", doc)
    return doc


def attention_reports(record: data.Record, params, S: int, seed: int, dropout_rate: float) -> dict:
    reports = infer.mc_attention(record, params, S, infer.record_rng(seed, record.id), dropout_rate)
    stack = lambda name: np.stack([getattr(r, name) for r in reports])  # noqa: E731
    p = np.array([r.p_hat for r in reports])
    return {
        "record_id": record.id,
        "label": record.label,
        "variant": params.variant.value,
        "S": S,
        "p_mean": float(p.mean()),
        "p_std": float(p.std()),
        "mean": {name: stack(name).mean(axis=0).tolist()
                 for name in ("mu_e", "sd_e", "mu_d", "sd_d", "alpha", "beta", "contribution")},
        "std": {name: stack(name).std(axis=0).tolist() for name in ("alpha", "beta", "contribution")},
        "samples": [
            {"p_hat": r.p_hat, "logit": r.logit, "base_logit": r.base_logit,
             "alpha": r.alpha.tolist(), "beta": r.beta.tolist(), "contribution": r.contribution.tolist()}
            for r in reports
        ],
    }


def cmd_attn(cfg: RunConfig, ckpt_path, data_path, out: Path, record_ids: list[str]) -> dict | None:
    ckpt, ds = _load_for_eval(ckpt_path, data_path)
    records = []
    for rid in record_ids:
        try:
            records.append(ds.by_id(rid))
        except KeyError as exc:
            raise CliError(str(exc.args[0])) from None
    contribs, truths = [], []
    for rec in records:
        doc = attention_reports(rec, ckpt.params, cfg.samples, cfg.seed, ckpt.config.dropout_rate)
        doc["b_out"] = float(ckpt.params["b_out"])
        doc["feature_names"] = ds.feature_names
        if rec.relevance is not None and rec.relevance.any() and not rec.relevance.all():
            mean_contrib = np.array(doc["mean"]["contribution"])
            sens, spec = calib.attention_match(mean_contrib, rec.relevance, cfg.attention_threshold)
            doc["attention_match"] = {"sensitivity": sens, "specificity": spec,
                                      "threshold": cfg.attention_threshold}
            contribs.append(mean_contrib)
            truths.append(rec.relevance)
        (out / f"attn_{rec.id}.json").write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
    if not contribs:
        return None
    summary = calib.attention_match_summary(contribs, truths, cfg.attention_threshold)
    summary["threshold"] = cfg.attention_threshold
    write_document(out / "attention_match", summary)
    return summary


# ----------------------------------------------------------------------- main

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        sys.stderr.write(f"error: usage: {message}\n")
        raise SystemExit(2)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help=f"output directory (default ${OUT_ENV} or .)")
    model = _Parser(add_help=False)
    model.add_argument("--variant", choices=[v.cli_name for v in Variant])
    mc = _Parser(add_help=False)
    mc.add_argument("--samples", type=int)
    mc.add_argument("--bins", type=int)

    parser = _Parser(prog="uaretain", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gen", parents=[common], help="write a synthetic dataset")
    p = sub.add_parser("train", parents=[common, model], help="train one model")
    p.add_argument("--data", required=True)
    p = sub.add_parser("sweep", parents=[common, model], help="grid search over hyperparameters")
    p.add_argument("--data", required=True)
    p.add_argument("--grid", help="JSON file mapping option name to a list of values")
    p = sub.add_parser("eval", parents=[common, mc], help="MC predictions and calibration metrics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=["train", "validation", "test", "all"])
    p = sub.add_parser("idk", parents=[common], help="IDK curve from a prediction dump")
    p.add_argument("--predictions", required=True)
    p.add_argument("--thresholds", help="comma-separated thresholds (default: every observed std)")
    p.add_argument("--target-correct", type=float)
    p = sub.add_parser("attn", parents=[common, mc], help="per-record attention reports")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--ids", required=True, help="comma-separated record ids")
    return parser


def _parse_thresholds(text: str) -> list[float]:
    parts = [t for t in (s.strip() for s in text.split(",")) if t]
    if not parts:
        raise CliError("empty threshold list")
    try:
        return [float(t) for t in parts]
    except ValueError:
        raise CliError(f"bad threshold list {text!r}") from None


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = load_run_config(args)
    out = out_dir(args)
    if args.command == "gen":
        cmd_gen(cfg, out)
    elif args.command == "train":
        cmd_train(cfg, args.data, out)
    elif args.command == "sweep":
        grid = None
        if args.grid:
            grid = json.loads(Path(args.grid).read_text(encoding="utf-8"))
            unknown = set(grid) - set(SWEEP_GRID)
            if unknown:
                raise CliError(f"unknown sweep options {sorted(unknown)}")
        cmd_sweep(cfg, args.data, out, grid)
    elif args.command == "eval":
        cmd_eval(cfg, args.checkpoint, args.data, out, args.split)
    elif args.command == "idk":
        if args.thresholds is not None:
            cfg.thresholds = _parse_thresholds(args.thresholds)
        if args.target_correct is not None:
            cfg.target_correct = args.target_correct
        cfg.validate()
        cmd_idk(cfg, args.predictions, out)
    elif args.command == "attn":
        ids = [i.strip() for i in args.ids.split(",") if i.strip()]
        if not ids:
            raise CliError("no record ids given")
        cmd_attn(cfg, args.checkpoint, args.data, out, ids)
    return 0


def main(argv=None) -> int:
    try:
        return run(argv)
    except SystemExit:
        raise
    except (CliError, ValueError, KeyError, OSError) as exc:
        msg = str(exc).replace("\n", " ")
        sys.stderr.write(f"error: {type(exc).__name__}: {msg}\n")
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
