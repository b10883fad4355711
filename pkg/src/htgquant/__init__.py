"""Timestep-grouped post-training quantization for diffusion transformer blocks."""

__version__ = "0.1.0"

from .quantizer import QuantParams, UniformQuantizer, error_metrics, fit_params
from .temporal_clustering import TemporalPlan, cluster_timesteps
from .toymodel import (
    BlockConfig,
    DiTBlock,
    QuantizedDiTBlock,
    calibrate_block,
    capture_trace,
    compare_paths,
    init_block,
)
from .trace_io import CalibrationTrace, SyntheticSpec, generate_trace, load_trace, save_trace
from .estimators import HTGQuantizer, HTGSmoother, TimestepGrouper

__all__ = [
    "BlockConfig",
    "CalibrationTrace",
    "DiTBlock",
    "HTGQuantizer",
    "HTGSmoother",
    "QuantParams",
    "QuantizedDiTBlock",
    "SyntheticSpec",
    "TemporalPlan",
    "TimestepGrouper",
    "UniformQuantizer",
    "calibrate_block",
    "capture_trace",
    "cluster_timesteps",
    "compare_paths",
    "error_metrics",
    "fit_params",
    "generate_trace",
    "init_block",
    "load_trace",
    "save_trace",
]
