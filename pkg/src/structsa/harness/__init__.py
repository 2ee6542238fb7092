"""Run configuration, toy training task, benchmark sweeps, and the CLI."""

from .config import ConfigError, NumericGateError, RunConfig, build_params, init_params, parse_extents
from .toy import ToyBlockParams, make_shift_dataset, train_toy

__all__ = [
    "ConfigError",
    "NumericGateError",
    "RunConfig",
    "ToyBlockParams",
    "build_params",
    "init_params",
    "make_shift_dataset",
    "parse_extents",
    "train_toy",
]
