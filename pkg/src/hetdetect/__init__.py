"""Heterogeneity detection for divide-and-conquer M-estimation.

Each of K data blocks fits the same model locally; the per-block
estimates and sandwich variances are then compared dimension by
dimension with a re-normalized Wald statistic, an extreme contrast test
on split samples, and a weighted combination of the two.
"""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    ConfigError,
    DataError,
    DomainError,
    HetDetectError,
    NumericalError,
)
from .glm_core import BlockData, LocalFit, fit_block, fit_stack, sandwich_variance  # noqa: E402
from .inference import (  # noqa: E402
    HeterogeneityReport,
    combined_statistic,
    decide,
    ect_statistic,
    evaluate_dimensions,
    split_block,
    wald_statistic,
)

__all__ = [
    "__version__",
    "BlockData",
    "ConfigError",
    "DataError",
    "DomainError",
    "HeterogeneityReport",
    "HetDetectError",
    "LocalFit",
    "NumericalError",
    "combined_statistic",
    "decide",
    "ect_statistic",
    "evaluate_dimensions",
    "fit_block",
    "fit_stack",
    "sandwich_variance",
    "split_block",
    "wald_statistic",
]
