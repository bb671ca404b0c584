"""Adam, metrics, the training loop, evaluation and checkpoints."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import tensor as T
from .config import ModelConfig, TrainConfig, config_hash
from .data import TimeSeriesDataset
from .errors import ContractError, NumericError
from .forecaster import Forecaster
from .preprocess import SplitRanges, gather_windows, window_starts, zscore_stats
from .tensor import Tensor

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1


# -- optimizer ----------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray | None], state: AdamState,
              lr: float, betas=(0.9, 0.999), eps: float = 1e-8) -> AdamState:
    """Bias-corrected Adam update applied in place to ``params``.

    A missing gradient counts as zero (moments still decay).
    """
    b1, b2 = betas
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(p.shape)
        if g.shape != p.shape:
            raise ContractError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros(p.shape)
            state.v[name] = np.zeros(p.shape)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


class Adam:
    def __init__(self, named_params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = dict(named_params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def step(self) -> None:
        grads = {name: p.grad for name, p in self.params.items()}
        adam_step(self.params, grads, self.state, self.lr, self.betas, self.eps)

    def zero_grad(self) -> None:
        T.zero_grads(self.params.values())


# -- metrics ------------------------------------------------------------------

def compute_metrics(pred, truth) -> dict[str, float]:
    p = np.asarray(pred.data if isinstance(pred, Tensor) else pred, dtype=np.float64)
    y = np.asarray(truth.data if isinstance(truth, Tensor) else truth, dtype=np.float64)
    if p.shape != y.shape:
        raise ContractError(f"prediction shape {p.shape} != target shape {y.shape}")
    err = p - y
    return {"mse": float(np.mean(err * err)), "mae": float(np.mean(np.abs(err)))}


# -- data preparation -----------------------------------------------------------

@dataclass
class PreparedData:
    values: np.ndarray
    ranges: SplitRanges
    lookback: int
    horizon: int
    train_mean: np.ndarray

    def starts(self, split: str) -> np.ndarray:
        return window_starts(self.ranges, split, self.lookback, self.horizon)

    def batches(self, split: str, batch_size: int, starts: np.ndarray | None = None):
        starts = self.starts(split) if starts is None else starts
        for i in range(0, len(starts), batch_size):
            yield gather_windows(self.values, starts[i:i + batch_size], self.lookback, self.horizon)


def prepare(dataset: TimeSeriesDataset, lookback: int, horizon: int, zscore: bool = True,
            stats: tuple[np.ndarray, np.ndarray] | None = None) -> PreparedData:
    """Z-score with training-split statistics (or the given ``stats``) and index windows."""
    ranges = dataset.ranges()
    values = dataset.values
    if zscore:
        mu, sd = stats if stats is not None else zscore_stats(values, ranges.train)
        values = (values - mu) / sd
    train_mean = values[:, ranges.train[0]:ranges.train[1]].mean(axis=1)
    return PreparedData(values, ranges, lookback, horizon, train_mean)


def _subsample(starts: np.ndarray, limit: int) -> np.ndarray:
    if limit and len(starts) > limit:
        idx = np.linspace(0, len(starts) - 1, limit).round().astype(np.int64)
        return starts[idx]
    return starts


def predict_split(model: Forecaster, data: PreparedData, split: str, batch_size: int = 256,
                  limit: int = 0):
    starts = _subsample(data.starts(split), limit)
    preds, truths, lasts = [], [], []
    for x, y in data.batches(split, batch_size, starts):
        preds.append(model.predict(x))
        truths.append(y)
        lasts.append(x[..., -1:])
    if not preds:
        raise ContractError(f"{split} split has no windows")
    return np.concatenate(preds), np.concatenate(truths), np.concatenate(lasts)


# -- training -----------------------------------------------------------------------

@dataclass
class TrainResult:
    model: Forecaster
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_mse: float = math.inf


def train(model: Forecaster, dataset: TimeSeriesDataset | PreparedData, cfg: TrainConfig) -> TrainResult:
    """Mini-batch Adam on MSE; keeps the parameters with the best validation MSE."""
    cfg.validate()
    mc = model.config
    data = dataset if isinstance(dataset, PreparedData) else prepare(dataset, mc.lookback, mc.horizon,
                                                                      cfg.global_zscore)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.named_parameters(), cfg.learning_rate, (cfg.beta1, cfg.beta2), cfg.adam_eps)
    train_starts = data.starts("train")
    has_val = "val" not in data.ranges.empty
    result = TrainResult(model)
    best_state = None
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(train_starts)
        if cfg.max_train_windows:
            order = order[:cfg.max_train_windows]
        total, count = 0.0, 0
        for bi, (x, y) in enumerate(data.batches("train", cfg.batch_size, order)):
            opt.zero_grad()
            loss = T.mse_loss(model(x), y)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {bi}")
            T.backward(loss)
            opt.step()
            total += value * len(x)
            count += len(x)
            del loss
        entry = {"epoch": epoch, "train_loss": total / max(count, 1)}
        if has_val:
            pred, truth, _ = predict_split(model, data, "val", limit=cfg.max_eval_windows)
            entry["val_mse"] = compute_metrics(pred, truth)["mse"]
            if entry["val_mse"] < result.best_val_mse:
                result.best_val_mse = entry["val_mse"]
                result.best_epoch = epoch
                best_state = model.state_dict()
        result.history.append(entry)
        log.info("epoch %d %s", epoch, entry)
    if best_state is not None:
        model.load_state_dict(best_state)
    elif not has_val:
        result.best_epoch = cfg.epochs
    return result


def evaluate(models: Forecaster | Mapping[int, Forecaster], dataset: TimeSeriesDataset | PreparedData,
             horizons=None, zscore: bool = True, limit: int = 0) -> list[dict]:
    """Test-split metrics per horizon next to two naive baselines, plus an average row.

    ``models`` is either one model (its own horizon is evaluated) or a map
    horizon -> model, one independently trained model per horizon.
    """
    if isinstance(models, Forecaster):
        models = {models.config.horizon: models}
    horizons = sorted(models) if horizons is None else list(horizons)
    rows = []
    for h in horizons:
        model = models[h]
        lookback = model.config.lookback
        data = dataset if isinstance(dataset, PreparedData) else prepare(dataset, lookback, h, zscore)
        pred, truth, last = predict_split(model, data, "test", limit=limit)
        row = {"horizon": h}
        for key, value in compute_metrics(pred, truth).items():
            row[key] = value
        naive_last = np.broadcast_to(last, truth.shape)
        naive_mean = np.broadcast_to(data.train_mean[None, :, None], truth.shape)
        for label, guess in (("last", naive_last), ("mean", naive_mean)):
            for key, value in compute_metrics(guess, truth).items():
                row[f"{label}_{key}"] = value
        rows.append(row)
    if rows:
        avg = {"horizon": "avg"}
        for key in rows[0]:
            if key != "horizon":
                avg[key] = float(np.mean([r[key] for r in rows]))
        rows.append(avg)
    return rows


# -- checkpoints ------------------------------------------------------------------

def save_checkpoint(path, model: Forecaster, extra: dict | None = None) -> dict:
    """Write parameters plus a JSON manifest into one ``.npz`` blob."""
    cfg = model.config
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config": dataclasses.asdict(cfg),
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "shapes": {name: list(p.shape) for name, p in model.named_parameters()},
        "checksum": model.checksum(),
        **(extra or {}),
    }
    arrays = {f"param/{name}": p.data for name, p in model.named_parameters()}
    arrays["__manifest__"] = np.frombuffer(json.dumps(manifest, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return manifest


def load_checkpoint(path) -> tuple[Forecaster, dict]:
    from .baselines import build_model

    with np.load(path) as blob:
        manifest = json.loads(bytes(blob["__manifest__"]).decode())
        if manifest.get("format") != CHECKPOINT_FORMAT:
            raise ContractError(f"unsupported checkpoint format {manifest.get('format')}")
        state = {k[len("param/"):]: blob[k] for k in blob.files if k.startswith("param/")}
    model = build_model(ModelConfig(**manifest["config"]))
    model.load_state_dict(state)
    return model, manifest
