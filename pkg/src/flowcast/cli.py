"""
``flowcast`` command line: synthetic data, training, evaluation, ablation,
baseline comparison, attention export and hyperparameter sweeps.

Exit codes: 0 success, 1 runtime/training failure, 2 usage or configuration error.
Run configuration is a JSON file with optional ``model``, ``train``, ``data``
and ``sweep`` sections; command-line flags override it.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import attention, dataflow, models, training
from .errors import (CheckpointError, ConfigurationError, DataError,
                     DimensionError, FlowcastError, UsageError)

logger = logging.getLogger("flowcast")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
_USAGE_ERRORS = (ConfigurationError, DataError, DimensionError, CheckpointError, UsageError)
DEFAULT_RATIOS = (0.7, 0.1, 0.2)


class StageError(Exception):
    def __init__(self, stage, exc):
        self.stage, self.exc = stage, exc
        super().__init__(f"{stage}: {exc}")


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except FlowcastError as exc:
        raise StageError(name, exc) from exc


def _default_seed():
    raw = os.environ.get("FLOWCAST_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ConfigurationError(f"FLOWCAST_SEED must be an integer, got {raw!r}") from None


def _digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json_atomic(path, doc):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _write_json(path, doc):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


# configuration ---------------------------------------------------------------------------

def _load_run_config(path):
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    if not isinstance(doc, dict) or set(doc) - {"model", "train", "data", "sweep"}:
        raise ConfigurationError(f"{path}: top-level keys must be among model/train/data/sweep")
    return doc


def _resolve(args):
    """Merge config file and flags into (arch, ModelConfig, TrainConfig, ratios)."""
    doc = _load_run_config(getattr(args, "config", None))
    mdict = dict(doc.get("model", {}))
    tdict = dict(doc.get("train", {}))
    arch = getattr(args, "model", None) or mdict.pop("arch", None) or "res-transformer"
    mdict.pop("arch", None)
    for flag, key in (("window", "L"), ("heads", "heads"), ("dmodel", "d"), ("layers", "n_layers")):
        v = getattr(args, flag, None)
        if v is not None:
            mdict[key] = v
    if getattr(args, "epochs", None) is not None:
        tdict["epochs"] = args.epochs
    if getattr(args, "batch", None) is not None:
        tdict["batch_size"] = args.batch
    seed = args.seed if args.seed is not None else tdict.get("seed", mdict.get("seed", _default_seed()))
    mdict["seed"] = tdict["seed"] = seed
    try:
        mcfg = models.ModelConfig.from_dict(mdict)
        tcfg = training.TrainConfig.from_dict(tdict)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from None
    ratios = tuple(doc.get("data", {}).get("ratios", DEFAULT_RATIOS))
    if arch not in models.ARCHITECTURES:
        raise ConfigurationError(f"unknown model {arch!r}; choose from {', '.join(models.ARCHITECTURES)}")
    return arch, mcfg, tcfg, ratios, doc


def _load_series(path):
    series = _stage("load", dataflow.load_csv, path)
    series = _stage("filter_weekdays", dataflow.filter_weekdays, series)
    return _stage("impute", dataflow.impute_missing, series)


def _train_one(arch, mcfg, tcfg, split):
    model = models.build_model(arch, mcfg)
    model, hist = _stage("train", training.train, model, split, tcfg)
    return model, hist


# commands --------------------------------------------------------------------------------------

def cmd_synth(args):
    cfg = dataflow.load_synth_config(args.config) if args.config else dataflow.SynthConfig()
    if args.days is not None:
        cfg.n_days = args.days
        cfg.validate()
    seed = args.seed if args.seed is not None else _default_seed()
    series = dataflow.synthesize(cfg, seed=seed)
    dataflow.write_csv(series, args.out)
    totals = series.values.sum(axis=1).mean(axis=0)
    for mode, t in zip(dataflow.MODES, totals):
        print(f"{mode}: mean daily total {t:.1f}")
    print(f"wrote {series.n_days * dataflow.SLOTS_PER_DAY} rows to {args.out}")
    return EXIT_OK


def cmd_train(args):
    t0 = time.perf_counter()
    arch, mcfg, tcfg, ratios, doc = _resolve(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    series = _load_series(args.data)
    split = _stage("prepare", dataflow.prepare_dataset, series, mcfg.L, ratios)
    model, hist = _train_one(arch, mcfg, tcfg, split)
    meta = {"norm": split.norm.to_dict(), "ratios": list(ratios), "train": dataclasses.asdict(tcfg)}
    ckpt = out / "model.ckpt"
    models.save_checkpoint(model, ckpt, meta=meta)
    hist.to_csv(out / "history.csv")
    report = training.evaluate(model, split.test, split.norm)
    _write_json(out / "metrics.json", _report_doc(model.name, report))
    outputs = [ckpt, out / "history.csv", out / "metrics.json"]
    _write_json_atomic(out / "manifest.json", {
        "command": "train", "argv": sys.argv[1:], "arch": arch,
        "model_config": mcfg.to_dict(), "train_config": dataclasses.asdict(tcfg),
        "ratios": list(ratios), "seeds": {"model": mcfg.seed, "train": tcfg.seed},
        "inputs": {str(args.data): _digest(args.data),
                   **({str(args.config): _digest(args.config)} if args.config else {})},
        "outputs": {str(p): _digest(p) for p in outputs},
        "timings": {"total_s": time.perf_counter() - t0, "epoch_s": hist.wall_time},
    })
    print(f"{model.name}: best epoch {hist.best_epoch}, test ALL RMSE {report['ALL'].rmse:.3f}")
    return EXIT_OK


def _report_doc(name, report):
    return {"model": name, "wmape_unit": "fraction",
            "rows": [{"mode": k, **dataclasses.asdict(v)} for k, v in report.rows.items()]}


def _checkpoint_split(model, data_path, window=None):
    if window is not None and window != model.L:
        raise DimensionError(f"checkpoint has L={model.L}, --window asks for {window}")
    meta = getattr(model, "meta", {})
    if "norm" not in meta:
        raise CheckpointError("checkpoint carries no normalization parameters")
    norm = dataflow.NormalizationParams.from_dict(meta["norm"])
    series = _load_series(data_path)
    return _stage("prepare", dataflow.prepare_dataset, series, model.L,
                  tuple(meta.get("ratios", DEFAULT_RATIOS)), norm=norm)


def cmd_evaluate(args):
    model = models.load_checkpoint(args.checkpoint)
    split = _checkpoint_split(model, args.data, args.window)
    report = training.evaluate(model, split.test, split.norm)
    _write_json(args.out, _report_doc(model.name, report))
    if args.percent:
        print(f"{'mode':8s} {'RMSE':>10s} {'MAE':>10s} {'WMAPE':>8s}")
        for k, v in report.rows.items():
            print(f"{k:8s} {v.rmse:10.2f} {v.mae:10.2f} {100 * v.wmape:7.2f}%")
    return EXIT_OK


def _metrics_columns():
    return [f"{m}_{k}" for m in (*dataflow.MODES, "ALL") for k in ("rmse", "mae", "wmape")]


def _run_table(args, archs, filename, label):
    _, mcfg, tcfg, ratios, _ = _resolve(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    series = _load_series(args.data)
    split = _stage("prepare", dataflow.prepare_dataset, series, mcfg.L, ratios)
    rows = []
    for arch in archs:
        row = {"model": label(arch), "status": "ok"}
        try:
            model, _ = _train_one(arch, mcfg, tcfg, split)
            row.update(training.evaluate(model, split.test, split.norm).flat())
        except (StageError, FlowcastError, FloatingPointError) as exc:
            logger.warning("%s failed: %s", arch, exc)
            row["status"] = f"failed: {exc}"
        rows.append(row)
        print(f"{row['model']}: {row['status']}" + (f" ALL RMSE {row['ALL_rmse']:.3f}" if "ALL_rmse" in row else ""))
    cols = ["model", "status", *_metrics_columns()]
    with open(out / filename, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(cols) + "\n")
        for row in rows:
            fh.write(",".join(repr(row[c]) if isinstance(row.get(c), float) else str(row.get(c, ""))
                              for c in cols) + "\n")
    return EXIT_OK if all(r["status"] == "ok" for r in rows) else EXIT_RUNTIME


def cmd_ablate(args):
    label = lambda a: "Res-Trans" if a == "res-transformer" else f"Res-Trans({a.upper()})"  # noqa: E731
    return _run_table(args, ["a", "b", "c", "d", "e", "res-transformer"], "ablation.csv", label)


def cmd_compare(args):
    return _run_table(args, [*models.BASELINES, "res-transformer"], "comparison.csv", lambda a: a)


def cmd_attention(args):
    model = models.load_checkpoint(args.checkpoint)
    split = _checkpoint_split(model, args.data)
    samples = split.train + split.validation + split.test
    if not 0 <= args.sample < len(samples):
        raise UsageError(f"sample index {args.sample} outside [0, {len(samples)})")
    scores = attention.extract_scores(model, samples[args.sample].X)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    attention.scores_to_csv(scores, out / "scores.csv")
    attention.scores_to_json(scores, out / "scores.json")
    print(f"exported {len(scores)} score matrices for sample {args.sample}")
    return EXIT_OK


def cmd_sweep(args):
    arch, mcfg, tcfg, ratios, doc = _resolve(args)
    spec = training.SweepSpec.from_dict(doc.get("sweep", {}))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    series = _load_series(args.data)
    objective = training.training_objective(series, mcfg, tcfg, arch=arch, ratios=ratios)
    base = {"d": mcfg.d, "heads": mcfg.heads, "L": mcfg.L, "batch": tcfg.batch_size}
    result = training.sweep(spec, base, objective, seed=tcfg.seed)
    result.log_to_csv(out / "sweep_log.csv")
    best_model = dict(mcfg.to_dict(), arch=arch, L=result.best["L"], d=result.best["d"],
                      heads=result.best["heads"])
    best_model.pop("seed")
    _write_json(out / "best_config.json", {
        "model": best_model,
        "train": dict({k: v for k, v in dataclasses.asdict(tcfg).items() if k != "seed"},
                      batch_size=result.best["batch"]),
        "data": {"ratios": list(ratios)},
    })
    print(f"{len(result.log)} trials; best {result.best}")
    return EXIT_OK


# parser -----------------------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="flowcast", description=__doc__.strip().split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def model_flags(sp, with_model=True):
        if with_model:
            sp.add_argument("--model", choices=models.ARCHITECTURES)
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--batch", type=int)
        sp.add_argument("--window", type=int)
        sp.add_argument("--heads", type=int)
        sp.add_argument("--dmodel", type=int)
        sp.add_argument("--layers", type=int)

    sp = sub.add_parser("synth", help="write a synthetic three-mode inflow CSV")
    sp.add_argument("--config", help="INI synthetic-profile file (default: hub profile)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--days", type=int, help="number of weekdays (overrides config)")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="preprocess, train and checkpoint one model")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    model_flags(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="test-split metrics of a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True, help="output JSON path")
    sp.add_argument("--window", type=int)
    sp.add_argument("--percent", action="store_true", help="also print a table with WMAPE in percent")
    sp.set_defaults(func=cmd_evaluate)

    for name, func, help_ in (("ablate", cmd_ablate, "train the full model and ablations A-E"),
                              ("compare", cmd_compare, "train the seven baselines and the full model")):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--data", required=True)
        sp.add_argument("--out", required=True)
        model_flags(sp, with_model=False)
        sp.set_defaults(func=func)

    sp = sub.add_parser("attention", help="export score matrices for one sample")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--sample", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_attention)

    sp = sub.add_parser("sweep", help="one-parameter-at-a-time hyperparameter search")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    model_flags(sp)
    sp.set_defaults(func=cmd_sweep)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except StageError as exc:
        code = EXIT_USAGE if isinstance(exc.exc, _USAGE_ERRORS) else EXIT_RUNTIME
        print(f"flowcast {args.command}: error in stage {exc.stage}: {exc.exc}", file=sys.stderr)
        return code
    except _USAGE_ERRORS as exc:
        print(f"flowcast {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"flowcast {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FlowcastError, FloatingPointError) as exc:
        print(f"flowcast {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
