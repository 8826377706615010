"""Self-supervised PPG representation learning at desk scale.

Signal preparation and VMD, spectrogram masking, three pretext tasks,
dual-process transfer, bilinear fusion, least-squares ensembling and
evaluation metrics. Importing the package switches torch to float64.
"""
from . import nn as _nn  # noqa: F401  (sets the float64 default)
from .errors import CheckpointError, DataError, NumericalError, TS2TCError
from .fusion import FusionReport, ols_fit, ternary_predict
from .metrics import MetricSummary, bland_altman, clarke_zones, regression_metrics
from .pipeline import PipelineConfig, run_pipeline, sweep_gamma_T
from .signal import PpgRecord, derivatives, load_record, partition_paf, resample, synth_ppg, window_slide, zscore
from .spectrogram import StftConfig, patchify_and_mask, stft
from .vmd import ModeSet, VmdConfig, dilate, vmd_decompose

__version__ = "0.1.0"

__all__ = [
    "CheckpointError", "DataError", "FusionReport", "MetricSummary", "ModeSet", "NumericalError",
    "PipelineConfig", "PpgRecord", "StftConfig", "TS2TCError", "VmdConfig", "bland_altman",
    "clarke_zones", "derivatives", "dilate", "load_record", "ols_fit", "partition_paf",
    "patchify_and_mask", "regression_metrics", "resample", "run_pipeline", "stft", "sweep_gamma_T",
    "synth_ppg", "ternary_predict", "vmd_decompose", "window_slide", "zscore",
]
