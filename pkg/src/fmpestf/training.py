"""Masked-MAE training with early stopping, plus the MAE/RMSE/MAPE metric suite."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import DatasetSplit, SampleWindow
from .model import ConfigError, FmpestfModel
from .tensor import NumericsError, Tensor

MAPE_FLOOR = 1e-3  # |y| at or below this never contributes to MAPE


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 300
    patience: int = 20
    mask_threshold: float = 0.0
    grad_clip: float | None = None
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.patience >= self.max_epochs:
            raise ConfigError(f"patience ({self.patience}) must be smaller than "
                              f"max_epochs ({self.max_epochs})")
        if self.mask_threshold < 0:
            raise ConfigError(f"mask_threshold must be >= 0, got {self.mask_threshold}")
        return self

    def to_dict(self) -> dict:
        return {"learning_rate": self.learning_rate, "batch_size": self.batch_size,
                "max_epochs": self.max_epochs, "patience": self.patience,
                "mask_threshold": self.mask_threshold, "grad_clip": self.grad_clip,
                "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


class Adam:
    """Adaptive-moment gradient descent over a fixed parameter list."""

    def __init__(self, params, learning_rate: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.learning_rate = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= self.learning_rate * (m / bias1) / (np.sqrt(v / bias2) + self.eps)


def clip_gradients(params, max_norm: float) -> float:
    """Scale all gradients down to a global L2 norm of ``max_norm``; returns the norm."""
    total = math.sqrt(sum(float((p.grad * p.grad).sum()) for p in params))
    if total > max_norm and total > 0.0:
        scale = max_norm / total
        for p in params:
            p.grad *= scale
    return total


def masked_mae_loss(pred: Tensor, target: np.ndarray, threshold: float = 0.0) -> Tensor:
    """Mean absolute error over entries whose ground truth exceeds ``threshold``."""
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise T.ShapeError(f"prediction shape {pred.shape} != target shape {target.shape}")
    mask = (np.abs(target) > threshold).astype(np.float64)
    count = mask.sum()
    if count == 0:
        return Tensor(0.0)
    err = T.absval(T.sub(pred, Tensor(target)))
    return T.tsum(T.mul(err, Tensor(mask))) * (1.0 / count)


@dataclass
class MetricReport:
    mae: float
    rmse: float
    mape: float
    per_horizon_mae: list[float]
    per_horizon_rmse: list[float]
    per_horizon_mape: list[float]
    masked_count: int

    def to_table(self) -> str:
        lines = ["horizon mae rmse mape_pct"]
        for h, (a, r, p) in enumerate(zip(self.per_horizon_mae, self.per_horizon_rmse,
                                          self.per_horizon_mape), start=1):
            lines.append(f"{h} {a!r} {r!r} {p!r}")
        lines.append(f"overall {self.mae!r} {self.rmse!r} {self.mape!r}")
        lines.append(f"masked_entries {self.masked_count}")
        return "\n".join(lines) + "\n"


def _masked_stats(err: np.ndarray, truth: np.ndarray, mask: np.ndarray,
                  threshold: float) -> tuple[float, float, float]:
    n = mask.sum()
    if n == 0:
        return 0.0, 0.0, 0.0
    mae = float(np.abs(err[mask]).sum() / n)
    rmse = float(math.sqrt((err[mask] ** 2).sum() / n))
    pmask = mask & (np.abs(truth) > max(threshold, MAPE_FLOOR))
    if pmask.sum() == 0:
        mape = 0.0
    else:
        mape = float((np.abs(err[pmask]) / np.abs(truth[pmask])).mean() * 100.0)
    return mae, rmse, mape


def compute_metrics(preds: np.ndarray, targets: np.ndarray,
                    threshold: float = 0.0) -> MetricReport:
    """MAE/RMSE/MAPE in raw units over ``[W, N, T']`` stacks, with per-horizon rows."""
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape:
        raise T.ShapeError(f"prediction stack {preds.shape} != target stack {targets.shape}")
    err = preds - targets
    mask = np.abs(targets) > threshold
    mae, rmse, mape = _masked_stats(err, targets, mask, threshold)
    horizon = preds.shape[-1]
    per = [_masked_stats(err[..., h], targets[..., h], mask[..., h], threshold)
           for h in range(horizon)]
    return MetricReport(
        mae=mae, rmse=rmse, mape=mape,
        per_horizon_mae=[p[0] for p in per],
        per_horizon_rmse=[p[1] for p in per],
        per_horizon_mape=[p[2] for p in per],
        masked_count=int(mask.size - mask.sum()),
    )


def _batch_arrays(windows: list[SampleWindow]):
    hist = np.stack([w.history for w in windows])
    slots = np.stack([w.slots for w in windows])
    dows = np.stack([w.dows for w in windows])
    targets = np.stack([w.target for w in windows])
    return hist, slots, dows, targets


def predict_windows(model: FmpestfModel, windows: list[SampleWindow],
                    a_prompt: np.ndarray | None, batch_size: int = 256,
                    collect_graphs: list | None = None) -> np.ndarray:
    """Raw-unit forecasts ``[W, N, T']`` for a window list; never touches gradients."""
    outputs = []
    with T.no_grad():
        for lo in range(0, len(windows), batch_size):
            chunk = windows[lo:lo + batch_size]
            hist, slots, dows, _ = _batch_arrays(chunk)
            collect = collect_graphs if lo == 0 else None
            outputs.append(model.forward(hist, slots, dows, a_prompt, collect).data)
    return np.concatenate(outputs, axis=0)


def evaluate(model: FmpestfModel, split: DatasetSplit, a_prompt: np.ndarray | None,
             threshold: float = 0.0, subset: str = "test",
             batch_size: int = 256) -> MetricReport:
    """Pure evaluation over one subset of a split, in raw units."""
    windows = getattr(split, subset)
    if not windows:
        raise ValueError(f"cannot evaluate on an empty {subset!r} subset")
    preds = predict_windows(model, windows, a_prompt, batch_size)
    targets = np.stack([w.target for w in windows])
    return compute_metrics(preds, targets, threshold)


@dataclass
class TrainResult:
    log: list[str] = field(default_factory=list)
    best_epoch: int = -1
    best_val_mae: float = math.inf
    epochs_run: int = 0


def train(model: FmpestfModel, split: DatasetSplit, cfg: TrainConfig,
          a_prompt: np.ndarray | None = None) -> TrainResult:
    """Adam training with per-epoch validation and early stopping.

    Keeps the parameters of the best validation epoch and restores them into
    the model before returning.  The log has one machine-readable line per
    epoch: ``epoch=<e> train_loss=<x> val_mae=<x> best=<bool>``.
    """
    cfg.validate()
    if not split.train or not split.val:
        raise ValueError("training needs non-empty train and val subsets")
    model.set_normalizer(split.normalizer)
    rng = np.random.default_rng(cfg.seed)
    optimizer = Adam(model.parameters(), cfg.learning_rate)
    result = TrainResult()
    best_state: dict[str, np.ndarray] = {}
    epochs_without_improvement = 0

    for epoch in range(cfg.max_epochs):
        order = rng.permutation(len(split.train))
        total_loss, batches = 0.0, 0
        for lo in range(0, len(order), cfg.batch_size):
            chunk = [split.train[i] for i in order[lo:lo + cfg.batch_size]]
            hist, slots, dows, targets = _batch_arrays(chunk)
            model.zero_grad()
            pred = model.forward(hist, slots, dows, a_prompt)
            loss = masked_mae_loss(pred, targets, cfg.mask_threshold)
            loss_value = loss.item()
            if not math.isfinite(loss_value):
                raise NumericsError(f"non-finite training loss at epoch {epoch}, "
                                    f"batch {batches}")
            loss.backward()
            if cfg.grad_clip is not None:
                clip_gradients(model.parameters(), cfg.grad_clip)
            optimizer.step()
            total_loss += loss_value
            batches += 1

        val = evaluate(model, split, a_prompt, cfg.mask_threshold, subset="val")
        improved = val.mae < result.best_val_mae
        if improved:
            result.best_val_mae = val.mae
            result.best_epoch = epoch
            best_state = {p.name: p.data.copy() for p in model.parameters()}
            epochs_without_improvement = 0
        else:
            epochs_without_improvement += 1
        result.log.append(f"epoch={epoch} train_loss={total_loss / batches!r} "
                          f"val_mae={val.mae!r} best={'true' if improved else 'false'}")
        result.epochs_run = epoch + 1
        if epochs_without_improvement >= cfg.patience:
            break

    for p in model.parameters():
        if p.name in best_state:
            p.data[...] = best_state[p.name]
    return result


# ---------------------------------------------------------------------------
# reference baselines for sanity experiments


def baseline_last_value(split: DatasetSplit) -> np.ndarray:
    """Repeat each test window's last valid raw observation across the horizon.

    Missing observations (zeros, the loop-detector convention) are skipped:
    the newest nonzero value per node is used, falling back to the final
    value when the whole window is dark.
    """
    preds = []
    std0 = split.normalizer.std[0]
    mean0 = split.normalizer.mean[0]
    for w in split.test:
        raw = w.history[0] * std0 + mean0                  # [N, T]
        pick = raw[:, -1].copy()
        for node in range(raw.shape[0]):
            valid = np.nonzero(np.abs(raw[node]) > 1e-9)[0]
            if valid.size:
                pick[node] = raw[node, valid[-1]]
        preds.append(np.tile(pick[:, None], (1, w.target.shape[1])))
    return np.stack(preds)


def baseline_historical_average(split: DatasetSplit) -> np.ndarray:
    """Per (node, time-of-day slot) mean of valid train targets, per horizon step.

    Zero targets are treated as missing and excluded from the averages, the
    same convention the masked metrics use.
    """
    spd = split.train[0].slots_per_day
    n_nodes, horizon = split.train[0].target.shape
    window = split.train[0].history.shape[-1]
    acc = np.zeros((n_nodes, spd))
    cnt = np.zeros((n_nodes, spd))
    for w in split.train:
        for h in range(horizon):
            slot = (w.start + window + h) % spd
            valid = np.abs(w.target[:, h]) > 1e-9
            acc[valid, slot] += w.target[valid, h]
            cnt[valid, slot] += 1.0
    node_mean = acc.sum(axis=1) / np.maximum(cnt.sum(axis=1), 1.0)
    with np.errstate(invalid="ignore"):
        table = np.where(cnt > 0, acc / np.maximum(cnt, 1.0), node_mean[:, None])

    preds = []
    for w in split.test:
        pred = np.empty((n_nodes, horizon))
        for h in range(horizon):
            slot = (w.start + window + h) % spd
            pred[:, h] = table[:, slot]
        preds.append(pred)
    return np.stack(preds)
