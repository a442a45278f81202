"""Spatial-temporal traffic forecasting with fusion-matrix graph convolution.

The package couples attention-augmented temporal convolutions with a
dynamically generated, adjacency-prompted node-relation matrix inside an
interactive-learning encoder, and decodes all forecast horizons in one pass.
"""

from .data import (
    DataFormatError,
    DatasetSplit,
    Normalizer,
    SampleWindow,
    TrafficGraph,
    load_adjacency,
    load_series,
    make_windows,
    split_chronological,
    synth_series,
    write_adjacency,
    write_series,
)
from .estimator import FmpestfForecaster, NotFittedError, check_adjacency, check_series
from .model import (
    ConfigError,
    FmpestfModel,
    ModelConfig,
    apply_ablation,
    build_model,
    build_variant,
    expected_parameter_count,
    load_checkpoint,
    model_forward,
    save_checkpoint,
)
from .tensor import (
    GradCheckReport,
    NumericsError,
    Parameter,
    ShapeError,
    Tensor,
    grad_check,
    no_grad,
)
from .training import (
    Adam,
    MetricReport,
    TrainConfig,
    TrainResult,
    baseline_historical_average,
    baseline_last_value,
    compute_metrics,
    evaluate,
    masked_mae_loss,
    predict_windows,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "Adam", "ConfigError", "DataFormatError", "DatasetSplit", "FmpestfForecaster",
    "FmpestfModel", "GradCheckReport", "MetricReport", "ModelConfig", "Normalizer",
    "NotFittedError", "NumericsError", "Parameter", "SampleWindow", "ShapeError",
    "Tensor", "TrafficGraph", "TrainConfig", "TrainResult", "apply_ablation",
    "baseline_historical_average", "baseline_last_value", "build_model",
    "build_variant", "check_adjacency", "check_series", "compute_metrics",
    "evaluate", "expected_parameter_count", "grad_check", "load_adjacency",
    "load_checkpoint", "load_series", "make_windows", "masked_mae_loss",
    "model_forward", "no_grad", "predict_windows", "save_checkpoint",
    "split_chronological", "synth_series", "train", "write_adjacency",
    "write_series",
]
