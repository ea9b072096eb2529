"""Differential verification of numerical-training runtimes."""

__version__ = "0.1.0"
# Stamped into every report; bump alongside __version__.
ENGINE_VERSION = __version__

from .contract import (  # noqa: E402
    BoundedConfig,
    ConfigError,
    Method,
    PrecisionProfile,
    ToleranceProfile,
    build_contract,
    config_from_dict,
    tolerance_for,
)
from .pipeline import VerificationReport, verify  # noqa: E402
from .report import aggregate, classify, write_report  # noqa: E402

__all__ = [
    "BoundedConfig",
    "ConfigError",
    "ENGINE_VERSION",
    "Method",
    "PrecisionProfile",
    "ToleranceProfile",
    "VerificationReport",
    "aggregate",
    "build_contract",
    "classify",
    "config_from_dict",
    "tolerance_for",
    "verify",
    "write_report",
]
