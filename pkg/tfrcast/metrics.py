"""
Point and probabilistic forecast metrics, the paired Wilcoxon signed-rank
test, and cross-country summaries.

All metrics work in natural TFR units. Interval metrics use the (q05, q95)
pair as the nominal 90% interval.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats

from .manifest import write_csv
from .model import QUANTILES

logger = logging.getLogger(__name__)

METRICS = ("rmse", "smape", "rmsse", "crps", "coverage90", "mpiw90", "mis90")
SCORE_COLUMNS = ["country", "model", *METRICS]
SUMMARY_COLUMNS = [
    "metric",
    "model",
    "n",
    "mean",
    "median",
    "q1",
    "q3",
    "rank",
    "compared_with",
    "p_value",
]
NOMINAL_COVERAGE = 90.0
INTERVAL_ALPHA = 0.10
EXACT_WILCOXON_MAX_N = 20
MIN_WILCOXON_N = 5


def _pair(actual, forecast) -> Tuple[np.ndarray, np.ndarray]:
    y = np.asarray(actual, dtype=np.float64)
    y_hat = np.asarray(forecast, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ValueError(f"Shape mismatch: actual {y.shape} vs forecast {y_hat.shape}")
    if y.size == 0:
        raise ValueError("No evaluation years")
    return y, y_hat


def rmse(actual, forecast) -> float:
    y, y_hat = _pair(actual, forecast)
    return float(np.sqrt(np.mean((y - y_hat) ** 2)))


def smape(actual, forecast) -> float:
    """Symmetric MAPE in percent, 0..200; a year where both values are 0 scores 0."""
    y, y_hat = _pair(actual, forecast)
    denom = np.abs(y) + np.abs(y_hat)
    ratio = np.divide(2.0 * np.abs(y - y_hat), denom, out=np.zeros_like(y), where=denom > 0)
    return float(100.0 * np.mean(ratio))


def rmsse(actual, forecast, training) -> float:
    """
    RMSE scaled by the in-sample RMS of one-step differences.

    Returns NaN (with a warning) when the training series has fewer than two
    values or is constant.
    """
    y, y_hat = _pair(actual, forecast)
    train = np.asarray(training, dtype=np.float64)
    if len(train) < 2:
        logger.warning("RMSSE undefined: training series has fewer than 2 values")
        return float("nan")
    scale = np.mean(np.diff(train) ** 2)
    if scale == 0:
        logger.warning("RMSSE undefined: constant training series")
        return float("nan")
    return float(np.sqrt(np.mean((y - y_hat) ** 2) / scale))


def crps_q(actual, quantiles, levels: Sequence[float] = QUANTILES) -> float:
    """
    Quantile approximation of CRPS: (2/|Q|) sum over levels of the pinball
    loss, averaged over years when several are given.

    Args:
        actual: Scalar or (years,) observations.
        quantiles: (Q,) or (years, Q) predicted quantiles.
        levels: Quantile levels matching the last axis.
    """
    y = np.atleast_1d(np.asarray(actual, dtype=np.float64))
    q = np.atleast_2d(np.asarray(quantiles, dtype=np.float64))
    tau = np.asarray(levels, dtype=np.float64)
    if q.shape != (len(y), len(tau)):
        raise ValueError(f"quantiles shape {q.shape} does not match {len(y)} years x {len(tau)} levels")
    diff = y[:, None] - q
    loss = np.maximum(tau * diff, (tau - 1.0) * diff)
    return float(np.mean(2.0 * loss.sum(axis=1) / len(tau)))


def coverage90(actual, lower, upper) -> float:
    """Percent of years with lower <= y <= upper."""
    y, lo = _pair(actual, lower)
    _, hi = _pair(actual, upper)
    return float(100.0 * np.mean((y >= lo) & (y <= hi)))


def mpiw90(lower, upper) -> float:
    lo, hi = _pair(lower, upper)
    return float(np.mean(hi - lo))


def mis90(actual, lower, upper, alpha: float = INTERVAL_ALPHA) -> float:
    """Mean interval score: width plus 2/alpha times the distance of each miss."""
    y, lo = _pair(actual, lower)
    _, hi = _pair(actual, upper)
    below = (2.0 / alpha) * (lo - y) * (y < lo)
    above = (2.0 / alpha) * (y - hi) * (y > hi)
    return float(np.mean((hi - lo) + below + above))


def _signed_rank_counts(doubled_ranks: np.ndarray) -> np.ndarray:
    """Number of sign assignments giving each value of the doubled positive-rank sum."""
    counts = np.zeros(int(doubled_ranks.sum()) + 1)
    counts[0] = 1.0
    for r in doubled_ranks.astype(np.int64):
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: len(counts) - r]
        counts = counts + shifted
    return counts


def wilcoxon_signed_rank(a, b) -> float:
    """
    Two-sided paired Wilcoxon signed-rank test of a against b.

    Zero differences are dropped and ties share average ranks. With up to 20
    non-zero pairs the p-value is exact, from the distribution of the
    positive-rank sum over all 2^n sign assignments (ties handled by working
    on doubled ranks, which are integers). Above that a normal approximation
    with tie and continuity corrections is used.

    Returns:
        The p-value; 1.0 when every difference is zero; NaN when fewer than
        five differences are non-zero.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("Paired samples must have the same length")
    d = a - b
    d = d[d != 0]
    n = len(d)
    if n == 0:
        logger.warning("Wilcoxon: all paired differences are zero, p = 1.0")
        return 1.0
    if n < MIN_WILCOXON_N:
        logger.warning("Wilcoxon: only %d non-zero differences (need %d), no test", n, MIN_WILCOXON_N)
        return float("nan")

    ranks = stats.rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())

    if n <= EXACT_WILCOXON_MAX_N:
        doubled = np.rint(2.0 * ranks)
        counts = _signed_rank_counts(doubled)
        total = counts.sum()
        t = int(round(2.0 * w_plus))
        lower = counts[: t + 1].sum() / total
        upper = counts[t:].sum() / total
        return float(min(1.0, 2.0 * min(lower, upper)))

    mean = n * (n + 1) / 4.0
    _, tie_sizes = np.unique(np.abs(d), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_sizes**3 - tie_sizes) / 48.0
    if var <= 0:
        return 1.0
    z = max(abs(w_plus - mean) - 0.5, 0.0) / math.sqrt(var)
    return float(min(1.0, 2.0 * stats.norm.sf(z)))


@dataclass
class CountryScores:
    country: str
    model: str
    rmse: float
    smape: float
    rmsse: float
    crps: float
    coverage90: float
    mpiw90: float
    mis90: float

    def value(self, metric: str) -> float:
        return getattr(self, metric)


def score_country(
    country: str,
    model: str,
    actual,
    grid,
    training,
    levels: Sequence[float] = QUANTILES,
) -> CountryScores:
    """
    All seven metrics for one country and model.

    Args:
        actual: (years,) observed values.
        grid: (years, Q) rearranged quantiles in natural units; the median
            column is the point forecast.
        training: The observed series up to the forecast origin.
    """
    grid = np.asarray(grid, dtype=np.float64)
    levels = tuple(levels)
    lo = grid[:, levels.index(0.05)]
    hi = grid[:, levels.index(0.95)]
    point = grid[:, levels.index(0.50)]
    return CountryScores(
        country=country,
        model=model,
        rmse=rmse(actual, point),
        smape=smape(actual, point),
        rmsse=rmsse(actual, point, training),
        crps=crps_q(actual, grid, levels),
        coverage90=coverage90(actual, lo, hi),
        mpiw90=mpiw90(lo, hi),
        mis90=mis90(actual, lo, hi),
    )


def scores_frame(scores: Sequence[CountryScores]) -> pd.DataFrame:
    return pd.DataFrame([asdict(s) for s in scores], columns=SCORE_COLUMNS)


def write_scores(scores: Sequence[CountryScores], path: str, manifest_id: Optional[str] = None):
    write_csv(scores_frame(scores), path, manifest_id)


@dataclass
class MetricSummary:
    metric: str
    model: str
    n: int
    mean: float
    median: float
    q1: float
    q3: float
    rank: int = 0
    compared_with: str = ""
    p_value: float = float("nan")


@dataclass
class MetricReport:
    summaries: List[MetricSummary] = field(default_factory=list)
    countries: Dict[str, List[str]] = field(default_factory=dict)

    def get(self, metric: str, model: str) -> MetricSummary:
        for s in self.summaries:
            if s.metric == metric and s.model == model:
                return s
        raise KeyError((metric, model))

    def best(self, metric: str) -> MetricSummary:
        return min((s for s in self.summaries if s.metric == metric), key=lambda s: s.rank)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(s) for s in self.summaries], columns=SUMMARY_COLUMNS)

    def write(self, path: str, manifest_id: Optional[str] = None):
        write_csv(self.to_frame(), path, manifest_id)


def _rank_key(metric: str, median: float) -> float:
    if metric == "coverage90":
        return abs(median - NOMINAL_COVERAGE)
    return median


def summarize(scores: Sequence[CountryScores]) -> MetricReport:
    """
    Cross-country distribution of every metric for every model.

    Each metric is summarized on the countries where every model has a
    finite value, so models are compared on identical samples. Models are
    ranked by median (coverage by distance of the median from 90), and the
    two best are compared with the Wilcoxon test on their paired values.
    """
    if not scores:
        raise ValueError("No scores to summarize")
    models = sorted({s.model for s in scores})
    table: Dict[str, Dict[str, CountryScores]] = {}
    for s in scores:
        table.setdefault(s.model, {})[s.country] = s

    report = MetricReport()
    for metric in METRICS:
        common = set.intersection(*(set(table[m]) for m in models))
        common = sorted(
            c for c in common if all(math.isfinite(table[m][c].value(metric)) for m in models)
        )
        report.countries[metric] = common
        if not common:
            logger.warning("No country has %s for every model", metric)
            continue

        rows = []
        for model in models:
            values = np.array([table[model][c].value(metric) for c in common])
            q1, median, q3 = np.percentile(values, [25, 50, 75])
            rows.append(
                MetricSummary(
                    metric=metric,
                    model=model,
                    n=len(values),
                    mean=float(values.mean()),
                    median=float(median),
                    q1=float(q1),
                    q3=float(q3),
                )
            )
        ordered = sorted(rows, key=lambda r: (_rank_key(metric, r.median), r.model))
        for rank, row in enumerate(ordered, start=1):
            row.rank = rank
        if len(ordered) >= 2 and len(common) >= 2:
            best, second = ordered[0], ordered[1]
            best.compared_with = second.model
            best.p_value = wilcoxon_signed_rank(
                [table[best.model][c].value(metric) for c in common],
                [table[second.model][c].value(metric) for c in common],
            )
        report.summaries.extend(rows)
    return report
