"""Low-cost sensor calibration with logarithmic-binned attention.

A small numpy library: the calibration model and its linear / transformer
baselines with hand-written backward passes, a data pipeline for paired
low-cost/reference sensor CSVs, a seeded training loop, and analytical
FLOPs / memory profilers.
"""

from sensorcal.binning import BinLayout, apply_binning, bin_layout, binning_backward, uniform_layout
from sensorcal.model import CalibrationModel, ModelConfig
from sensorcal.numerics import AdamState, adam_step, finite_diff_grad, layer_norm, matmul, softmax_rows

__all__ = [
    "AdamState",
    "BinLayout",
    "CalibrationModel",
    "ModelConfig",
    "adam_step",
    "apply_binning",
    "bin_layout",
    "binning_backward",
    "finite_diff_grad",
    "layer_norm",
    "matmul",
    "softmax_rows",
    "uniform_layout",
]

__version__ = "0.1.0"
