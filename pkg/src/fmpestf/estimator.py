"""Scikit-learn style wrapper: constructor params, ``fit``/``predict``/``score``.

The estimator follows the sklearn contract without depending on sklearn:
``__init__`` only stores hyperparameters, ``fit`` does all the work and sets
trailing-underscore attributes, and ``get_params``/``set_params`` make it
clonable and grid-searchable by any tool that speaks that protocol.
"""

from __future__ import annotations

import inspect

import numpy as np

from .data import (
    DataFormatError,
    make_windows,
    slots_per_day_for,
    split_chronological,
)
from .model import FmpestfModel, ModelConfig
from .tensor import no_grad
from .training import TrainConfig, compute_metrics, evaluate, predict_windows, train


class NotFittedError(RuntimeError):
    """The estimator method requires a successful ``fit`` first."""


def check_series(x) -> np.ndarray:
    """Coerce to a ``[D, N, T]`` float array; accepts ``[N, T]`` as one channel."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None, :, :]
    if arr.ndim != 3:
        raise DataFormatError(f"series must be [D,N,T] or [N,T], got shape {arr.shape}")
    if arr.shape[1] < 1 or arr.shape[2] < 1:
        raise DataFormatError(f"series has an empty axis: shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataFormatError("series contains non-finite values")
    return arr


def check_adjacency(a, n_nodes: int) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.shape != (n_nodes, n_nodes):
        raise DataFormatError(f"adjacency shape {arr.shape} != ({n_nodes}, {n_nodes})")
    if not np.all(np.isfinite(arr)) or np.any(arr < 0):
        raise DataFormatError("adjacency entries must be finite and nonnegative")
    return arr


class FmpestfForecaster:
    """Multi-step traffic forecaster over a fixed node set.

    ``fit`` takes the full historical series (plus the optional road-network
    adjacency used as the fusion prompt), windows it chronologically, trains
    with early stopping, and keeps the best-validation model.  ``predict``
    maps one raw history block to the next ``horizon`` steps for every node.
    """

    def __init__(self, window: int = 12, horizon: int = 12,
                 expand_channels: int = 32, embed_channels: int = 32,
                 kernel_sizes: tuple[int, int] = (7, 1), diffusion_steps: int = 2,
                 max_neighbors: int = 10, tree_depth: int = 2,
                 use_attention: bool = True, use_prompt: bool = True,
                 use_dynamic: bool = True, learning_rate: float = 1e-3,
                 batch_size: int = 64, max_epochs: int = 300, patience: int = 20,
                 mask_threshold: float = 0.0, grad_clip: float | None = None,
                 seed: int = 0):
        self.window = window
        self.horizon = horizon
        self.expand_channels = expand_channels
        self.embed_channels = embed_channels
        self.kernel_sizes = kernel_sizes
        self.diffusion_steps = diffusion_steps
        self.max_neighbors = max_neighbors
        self.tree_depth = tree_depth
        self.use_attention = use_attention
        self.use_prompt = use_prompt
        self.use_dynamic = use_dynamic
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.mask_threshold = mask_threshold
        self.grad_clip = grad_clip
        self.seed = seed

    @classmethod
    def _param_names(cls) -> list[str]:
        sig = inspect.signature(cls.__init__)
        return [name for name in sig.parameters if name != "self"]

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params) -> "FmpestfForecaster":
        valid = set(self._param_names())
        for key, value in params.items():
            if key not in valid:
                raise ValueError(f"invalid parameter {key!r} for {type(self).__name__}; "
                                 f"valid parameters are {sorted(valid)}")
            setattr(self, key, value)
        return self

    def _require_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError(f"this {type(self).__name__} instance is not fitted yet; "
                                 f"call fit() first")

    def fit(self, series, adjacency=None, *, interval_min: int = 5,
            start_step: int = 0) -> "FmpestfForecaster":
        """Train on a raw series ``[D,N,T]`` (or ``[N,T]``).

        ``start_step`` anchors the series on the absolute time axis so
        time-of-day and day-of-week codes line up with reality.
        """
        arr = check_series(series)
        n_nodes = arr.shape[1]
        adj = None
        if adjacency is not None:
            adj = check_adjacency(adjacency, n_nodes)
        spd = slots_per_day_for(interval_min)

        model_cfg = ModelConfig(
            n_nodes=n_nodes, in_channels=arr.shape[0], window=self.window,
            horizon=self.horizon, expand_channels=self.expand_channels,
            embed_channels=self.embed_channels, slots_per_day=spd,
            kernel_sizes=tuple(self.kernel_sizes), diffusion_steps=self.diffusion_steps,
            max_neighbors=self.max_neighbors, tree_depth=self.tree_depth,
            use_attention=self.use_attention, use_prompt=self.use_prompt,
            use_dynamic=self.use_dynamic, seed=self.seed)
        train_cfg = TrainConfig(
            learning_rate=self.learning_rate, batch_size=self.batch_size,
            max_epochs=self.max_epochs, patience=self.patience,
            mask_threshold=self.mask_threshold, grad_clip=self.grad_clip,
            seed=self.seed)

        windows = make_windows(arr, self.window, self.horizon, spd)
        if start_step:
            for w in windows:
                steps = np.arange(w.start + start_step, w.start + start_step + self.window)
                w.slots[...] = steps % spd
                w.dows[...] = (steps // spd) % 7
                w.start += start_step
        split = split_chronological(windows)

        model = FmpestfModel(model_cfg)
        result = train(model, split, train_cfg, adj)

        self.model_ = model
        self.config_ = model_cfg
        self.split_ = split
        self.adjacency_ = adj
        self.train_result_ = result
        self.n_nodes_ = n_nodes
        self.slots_per_day_ = spd
        return self

    def predict(self, history, *, start_step: int = 0) -> np.ndarray:
        """Forecast ``horizon`` steps from one raw history block ``[D,N,window]``."""
        self._require_fitted()
        arr = check_series(history)
        expected = (self.config_.in_channels, self.n_nodes_, self.window)
        if arr.shape != expected:
            raise DataFormatError(f"history shape {arr.shape} != expected {expected}")
        normalized = self.split_.normalizer.normalize(arr)
        steps = np.arange(start_step, start_step + self.window)
        slots = steps % self.slots_per_day_
        dows = (steps // self.slots_per_day_) % 7
        with no_grad():
            out = self.model_.forward(normalized, slots, dows, self.adjacency_)
        return out.data

    def forecast_next(self, series, *, start_step: int = 0) -> np.ndarray:
        """Forecast from the trailing window of a full raw series."""
        arr = check_series(series)
        tail_start = start_step + arr.shape[2] - self.window
        return self.predict(arr[:, :, -self.window:], start_step=tail_start)

    def score(self, series=None, adjacency=None, *, interval_min: int = 5) -> float:
        """Negative masked MAE (higher is better); on the fit's test split by default."""
        self._require_fitted()
        if series is None:
            report = evaluate(self.model_, self.split_, self.adjacency_,
                              self.mask_threshold)
            return -report.mae
        arr = check_series(series)
        adj = self.adjacency_ if adjacency is None else check_adjacency(adjacency, arr.shape[1])
        spd = slots_per_day_for(interval_min)
        windows = make_windows(arr, self.window, self.horizon, spd)
        for w in windows:
            w.history[...] = self.split_.normalizer.normalize(w.history)
        preds = predict_windows(self.model_, windows, adj)
        targets = np.stack([w.target for w in windows])
        return -compute_metrics(preds, targets, self.mask_threshold).mae
