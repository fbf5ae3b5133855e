"""Learned group convolutions on a small reverse-mode tensor engine.

Training discovers a group structure for every 1x1 convolution by
staged magnitude pruning; the finished model converts losslessly into
an index layer plus a standard disjoint-group convolution for cheap
inference. Everything runs on numpy, single process, deterministically.
"""

from .arch import (LgcNet, ModelConfig, PRESETS, build_model, preset)
from .checkpoint import load_checkpoint, restore_model, save_model
from .configfile import load_config, parse_config_text
from .connectivity import (ConnectivityReport, export_connectivity,
                           read_connectivity, write_connectivity)
from .convert import (ConvertedLgcNet, EquivalenceReport, convert_model,
                      default_tolerance, verify_equivalence)
from .data import Dataset, load_dataset, synthesize_digits
from .errors import (CondenseError, ConfigError, ConversionError, DataError,
                     ShapeError, TrainingDiverged)
from .lgc import (CondensationSchedule, LearnedGroupConv, cosine_lr,
                  group_lasso_penalty, keep_counts)
from .metrics import CostReport, conv_flops, count_flops, count_params
from .optim import SGDNesterov
from .tensor import Tensor, no_grad, tune_allocator
from .training import (EpochStats, TrainResult, TrainSettings, evaluate,
                       traditional_prune_baseline, train)

from ._version import __version__

__all__ = [
    "CondensationSchedule", "CondenseError", "ConfigError",
    "ConnectivityReport", "ConversionError", "ConvertedLgcNet", "CostReport",
    "DataError", "Dataset", "EpochStats", "EquivalenceReport",
    "LearnedGroupConv", "LgcNet", "ModelConfig", "PRESETS", "SGDNesterov",
    "ShapeError", "Tensor", "TrainResult", "TrainSettings",
    "TrainingDiverged", "build_model", "conv_flops", "convert_model",
    "cosine_lr", "count_flops", "count_params", "default_tolerance",
    "evaluate", "export_connectivity", "group_lasso_penalty", "keep_counts",
    "load_checkpoint", "load_config", "load_dataset", "no_grad",
    "parse_config_text", "preset", "read_connectivity", "restore_model",
    "save_model", "synthesize_digits", "traditional_prune_baseline", "train",
    "tune_allocator", "verify_equivalence", "write_connectivity",
]
