"""Causal feature learning for cross-sectional return prediction.

Modules: ``scm`` (synthetic structural causal models), ``data`` (real-panel
ingestion), ``model`` (feature extractors), ``discovery`` (invariant
feature training), ``ot`` (exact Wasserstein-1), ``evaluate`` (bound terms
and diagnostics), ``backtest`` (rank portfolios) and ``cli``.
"""

from ._common import ConfigError, NumericalError

__version__ = "0.1.0"

__all__ = ["ConfigError", "NumericalError", "__version__"]
