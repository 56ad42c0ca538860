"""
tfrcast - Global TFR forecasting

An endogenous global forecasting framework for the Total Fertility Rate:
harmonizes a multi-country fertility panel, trains a GRU encoder-decoder with
a multi-quantile loss across all countries jointly, ensembles it, benchmarks
it against a naive-drift baseline and emits forward projections.
"""

__version__ = "1.0.0"
__license__ = "MIT"
__description__ = "Global probabilistic TFR forecasting with a GRU encoder-decoder"

# Bumped whenever a file layout (CSV columns, checkpoint header) changes
SCHEMA_VERSION = "1"

# Package metadata
__all__ = [
    "__version__",
    "__license__",
    "__description__",
    "SCHEMA_VERSION",
]
