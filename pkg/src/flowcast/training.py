"""
Loss, error metrics, mini-batch training with Adam, evaluation and the
one-parameter-at-a-time hyperparameter sweep.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .dataflow import MODES, denormalize, prepare_dataset, stack
from .errors import (ConfigurationError, DataError, DimensionError,
                     FlowcastError, TrainingError)
from .models import ModelConfig, build_model

logger = logging.getLogger(__name__)


def multitask_loss(pred, target):
    """Sum over the three modes of each mode's mean squared error."""
    pred, target = ad.as_tensor(pred), ad.as_tensor(target)
    if pred.shape != target.shape or pred.ndim != 2:
        raise DimensionError(f"multitask_loss: pred {pred.shape} vs target {target.shape}")
    diff = ad.sub(pred, target)
    return ad.mul_scalar(ad.tensor_sum(ad.mul(diff, diff)), 1.0 / pred.shape[0])


# metrics ----------------------------------------------------------------------------

@dataclass(frozen=True)
class ErrorMetrics:
    rmse: float
    mae: float
    wmape: float


def error_metrics(actual, pred) -> ErrorMetrics:
    """RMSE, MAE and WMAPE = sum|y - p| / sum y, with y the ground truth."""
    y = np.asarray(actual, dtype=np.float64).ravel()
    p = np.asarray(pred, dtype=np.float64).ravel()
    if y.shape != p.shape or y.size == 0:
        raise DimensionError(f"metrics need equal, non-empty inputs: {y.shape} vs {p.shape}")
    err = y - p
    total = y.sum()
    if total == 0:
        raise DataError("WMAPE undefined: ground truth sums to zero")
    return ErrorMetrics(rmse=float(np.sqrt(np.mean(err * err))),
                        mae=float(np.mean(np.abs(err))),
                        wmape=float(np.abs(err).sum() / total))


@dataclass
class MetricsReport:
    """Per-mode rows plus an ``ALL`` row pooled over every mode's values."""
    rows: dict

    def __getitem__(self, key):
        return self.rows[key]

    def to_dict(self):
        return {k: dataclasses.asdict(v) for k, v in self.rows.items()}

    def flat(self):
        out = {}
        for k, v in self.rows.items():
            for metric, value in dataclasses.asdict(v).items():
                out[f"{k}_{metric}"] = value
        return out


def metrics(pred, actual) -> MetricsReport:
    """Report for (n, 3) prediction/ground-truth arrays in passenger counts."""
    pred = np.asarray(pred, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    if pred.shape != actual.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise DimensionError(f"metrics expect matching (n, 3) arrays, got {pred.shape} / {actual.shape}")
    rows = {mode: error_metrics(actual[:, j], pred[:, j]) for j, mode in enumerate(MODES)}
    rows["ALL"] = error_metrics(actual, pred)
    return MetricsReport(rows)


# optimizer ---------------------------------------------------------------------------

class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# training ------------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 150
    batch_size: int = 4
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    shuffle: bool = True
    early_stop_patience: int | None = 20

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be at least 1")
        # zero is allowed: a frozen run is a useful sanity check
        if not self.learning_rate >= 0:
            raise ConfigurationError(f"learning_rate must be non-negative, got {self.learning_rate}")

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown train config keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    wall_time: list = field(default_factory=list, compare=False)
    best_epoch: int = -1

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss", "best"])
            for i, (tl, vl) in enumerate(zip(self.train_loss, self.val_loss)):
                w.writerow([i, repr(tl), repr(vl), int(i == self.best_epoch)])


def _dataset_loss(model, X, y, batch_size=256):
    if len(X) == 0:
        return float("nan")
    pred = model.predict(X, batch_size)
    return float(np.sum((pred - y) ** 2) / len(X))


def train(model, split, cfg: TrainConfig | None = None):
    """Mini-batch Adam on the multitask loss; keeps the best-validation parameters."""
    cfg = cfg or TrainConfig()
    if not split.train:
        raise DataError("training split is empty")
    if split.L != model.L:
        raise DimensionError(f"model window L={model.L} but data windows have L={split.L}")
    Xtr, ytr = stack(split.train)
    Xva, yva = stack(split.validation) if split.validation else (Xtr[:0], ytr[:0])
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.parameters(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    hist = TrainHistory()
    best_score, best_state, stale = math.inf, model.state_dict(), 0
    n = len(Xtr)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss = multitask_loss(model.forward(Xtr[idx]), ytr[idx])
            if not math.isfinite(loss.item()):
                raise TrainingError("training loss diverged", epoch=epoch)
            model.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        train_loss = total / n
        val_loss = _dataset_loss(model, Xva, yva)
        if len(Xva) and not math.isfinite(val_loss):
            raise TrainingError("validation loss diverged", epoch=epoch)
        hist.train_loss.append(train_loss)
        hist.val_loss.append(val_loss)
        hist.wall_time.append(time.perf_counter() - t0)
        score = val_loss if len(Xva) else train_loss
        if score < best_score:
            best_score, best_state, stale = score, model.state_dict(), 0
            hist.best_epoch = epoch
        else:
            stale += 1
        logger.debug("epoch %d train %.6f val %.6f", epoch, train_loss, val_loss)
        if cfg.early_stop_patience is not None and stale >= cfg.early_stop_patience:
            break
    model.load_state_dict(best_state)
    return model, hist


def evaluate(model, samples, norm, batch_size: int = 256) -> MetricsReport:
    """Predict, map predictions and targets back to passenger counts, score them."""
    if not samples:
        raise DataError("no samples to evaluate")
    X, y = stack(samples)
    if X.shape[2] != model.L:
        raise DimensionError(f"model window L={model.L} but samples have L={X.shape[2]}")
    pred = model.predict(X, batch_size)
    return metrics(denormalize(pred, norm), denormalize(y, norm))


# hyperparameter sweep ---------------------------------------------------------------------

SWEEP_PARAMS = ("batch", "d", "heads", "L")
SWEEP_LOG_COLUMNS = ("trial", "d", "heads", "L", "batch", "val_rmse", "val_mae", "status")


def _default_grids():
    return {"d": [4, 8, 12, 16, 20, 24, 28, 32], "heads": list(range(2, 11)),
            "L": list(range(5, 16)), "batch": [2, 4, 8, 16, 32, 64, 128]}


@dataclass
class SweepSpec:
    grids: dict = field(default_factory=_default_grids)
    order: tuple = SWEEP_PARAMS
    trials_per_point: int = 1
    selection: str = "rmse"

    def __post_init__(self):
        self.order = tuple(self.order)
        if sorted(self.order) != sorted(SWEEP_PARAMS):
            raise ConfigurationError(f"sweep order must be a permutation of {SWEEP_PARAMS}, got {self.order}")
        if set(self.grids) != set(SWEEP_PARAMS):
            raise ConfigurationError(f"sweep grids needed for exactly {SWEEP_PARAMS}")
        for k, g in self.grids.items():
            if not g or any(int(v) != v or v < 1 for v in g):
                raise ConfigurationError(f"grid {k} must be a non-empty list of positive integers")
        if self.trials_per_point < 1:
            raise ConfigurationError("trials_per_point must be at least 1")
        if self.selection not in ("rmse", "mae"):
            raise ConfigurationError("selection must be 'rmse' or 'mae'")

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown sweep keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class SweepResult:
    best: dict
    log: list

    def log_to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=SWEEP_LOG_COLUMNS, lineterminator="\n")
            w.writeheader()
            for row in self.log:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def training_objective(series, model_config: ModelConfig, train_cfg: TrainConfig,
                       arch="res-transformer", ratios=(0.7, 0.1, 0.2)):
    """Sweep objective: train on ``series`` at a point, return validation (RMSE, MAE) for ALL."""
    cache = {}

    def objective(point, seed):
        L = int(point["L"])
        if L not in cache:
            cache[L] = prepare_dataset(series, L, ratios)
        split = cache[L]
        mcfg = dataclasses.replace(model_config, L=L, d=int(point["d"]), heads=int(point["heads"]), seed=seed)
        tcfg = dataclasses.replace(train_cfg, batch_size=int(point["batch"]), seed=seed)
        model, _ = train(build_model(arch, mcfg), split, tcfg)
        rep = evaluate(model, split.validation, split.norm)["ALL"]
        return rep.rmse, rep.mae

    return objective


def sweep(spec: SweepSpec, base_point: dict, objective, seed: int = 0) -> SweepResult:
    """
    Coordinate search: walk ``spec.order``, try every value of one parameter
    with the others held at their current best, fix the winner and move on.
    Winners are picked by validation RMSE with MAE as tie-break (or the reverse
    when ``selection == "mae"``). Failed trials score +inf.
    """
    current = {k: int(base_point[k]) for k in SWEEP_PARAMS}
    log, trial = [], 0
    for param in spec.order:
        best_key, best_value = (math.inf, math.inf), current[param]
        for value in spec.grids[param]:
            point = dict(current, **{param: int(value)})
            status, rmse, mae = "ok", 0.0, 0.0
            try:
                for r in range(spec.trials_per_point):
                    a, b = objective(point, seed + trial * spec.trials_per_point + r)
                    rmse += a / spec.trials_per_point
                    mae += b / spec.trials_per_point
                if not (math.isfinite(rmse) and math.isfinite(mae)):
                    raise TrainingError("non-finite validation error")
            except (FlowcastError, FloatingPointError) as exc:
                logger.warning("sweep trial %d at %s failed: %s", trial, point, exc)
                status, rmse, mae = f"failed: {exc}", math.inf, math.inf
            log.append({"trial": trial, "d": point["d"], "heads": point["heads"], "L": point["L"],
                        "batch": point["batch"], "val_rmse": rmse, "val_mae": mae, "status": status})
            key = (rmse, mae) if spec.selection == "rmse" else (mae, rmse)
            if key < best_key:
                best_key, best_value = key, int(value)
            trial += 1
        current[param] = best_value
    return SweepResult(best=current, log=log)
