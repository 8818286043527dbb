"""Comparator-ADC waveform data and a Crossformer/KAN surrogate model."""

from ._stiffnet import (
    CheckpointError,
    Dataset,
    DatasetFormatError,
    Model,
    ShapeError,
    TrainConfig,
    TrainingError,
    bspline_basis,
    build_dataset,
    build_model,
    channel_filter,
    channel_step_response,
    load_dataset,
    load_model,
    loss,
    nrmse_percent,
    prbs,
    train,
)

__all__ = [
    "CheckpointError",
    "Dataset",
    "DatasetFormatError",
    "Model",
    "ShapeError",
    "TrainConfig",
    "TrainingError",
    "bspline_basis",
    "build_dataset",
    "build_model",
    "channel_filter",
    "channel_step_response",
    "load_dataset",
    "load_model",
    "loss",
    "nrmse_percent",
    "prbs",
    "train",
]
