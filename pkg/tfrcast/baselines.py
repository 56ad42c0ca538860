"""Naive drift reference forecaster in natural TFR units."""

import logging
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from .harmonizer import HarmonizedPanel

logger = logging.getLogger(__name__)

DRIFT_FLOOR = 0.05
DRIFT_MODEL = "drift"


class DriftForecaster:
    """Random walk with drift: extends the line through the first and last observation."""

    def __init__(self, floor: float = DRIFT_FLOOR):
        self.floor = floor
        self.last_value: Optional[float] = None
        self.slope: Optional[float] = None

    def fit(self, y) -> "DriftForecaster":
        y = np.asarray(y, dtype=np.float64)
        if len(y) < 2:
            raise ValueError(f"Drift needs at least 2 observations, got {len(y)}")
        self.last_value = float(y[-1])
        self.slope = float((y[-1] - y[0]) / (len(y) - 1))
        return self

    def predict(self, horizon: int) -> np.ndarray:
        if self.last_value is None:
            raise RuntimeError("Must call fit() before predict().")
        steps = np.arange(1, horizon + 1)
        return np.maximum(self.last_value + steps * self.slope, self.floor)


def naive_drift(values, horizon: int, floor: float = DRIFT_FLOOR) -> np.ndarray:
    """
    Forecast ``horizon`` years past the last value of an annual series.

    Args:
        values: Contiguous annual observations ending at the origin.
        horizon: Number of years ahead.
        floor: Lower clamp in births per woman.

    Returns:
        y_T + h * d for h = 1..horizon, clamped below at ``floor``.
    """
    return DriftForecaster(floor).fit(values).predict(horizon)


@dataclass
class DriftForecast:
    country_code: str
    origin_year: int
    values: np.ndarray

    def __post_init__(self):
        if np.any(self.values <= 0):
            raise ValueError("Drift forecast values must be positive")

    @property
    def years(self) -> np.ndarray:
        return np.arange(self.origin_year + 1, self.origin_year + 1 + len(self.values))


def drift_forecasts(
    panel: HarmonizedPanel, origin_year: Optional[int], horizon: int
) -> Dict[str, DriftForecast]:
    """
    Drift forecast for every country from ``origin_year`` (or each series'
    last year). Countries with fewer than two observations up to the origin
    are skipped with a warning.
    """
    forecasts = {}
    for code in panel.country_codes:
        series = panel.series[code]
        if origin_year is not None:
            series = series.before(origin_year + 1)
        if series is None or len(series) < 2:
            logger.warning("%s: fewer than 2 observations up to %s, no drift forecast", code, origin_year)
            continue
        forecasts[code] = DriftForecast(
            country_code=code,
            origin_year=series.last_year,
            values=naive_drift(series.values, horizon),
        )
    return forecasts
