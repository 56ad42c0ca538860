import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from .baselines import DRIFT_MODEL, naive_drift
from .ensemble import LoadedEnsemble, ensemble_forecast
from .harmonizer import HarmonizedPanel
from .manifest import write_csv
from .metrics import CountryScores, MetricReport, score_country, summarize, write_scores
from .projection import (
    NEURAL_MODEL,
    ForecastRecord,
    grid_to_records,
    point_records,
    write_forecasts,
)
from .transform import DEFAULT_CUTOFF, forecast_origins, log_standardize

logger = logging.getLogger(__name__)

ACTUAL_COLUMNS = ["country_code", "year", "tfr"]


@dataclass
class BacktestResult:
    cutoff_year: int
    scores: List[CountryScores]
    report: MetricReport
    forecasts: List[ForecastRecord] = field(default_factory=list)
    actuals: pd.DataFrame = field(default_factory=lambda: pd.DataFrame(columns=ACTUAL_COLUMNS))

    def scores_for(self, model: str) -> List[CountryScores]:
        return [s for s in self.scores if s.model == model]

    def write(self, out_dir: str, manifest_id: Optional[str] = None) -> Dict[str, str]:
        """Write scores, summary, held-out trajectories and actuals into ``out_dir``."""
        paths = {
            "scores": os.path.join(out_dir, "scores.csv"),
            "summary": os.path.join(out_dir, "summary.csv"),
            "heldout_forecasts": os.path.join(out_dir, "heldout_forecasts.csv"),
            "actuals": os.path.join(out_dir, "actuals.csv"),
        }
        write_scores(self.scores, paths["scores"], manifest_id)
        self.report.write(paths["summary"], manifest_id)
        write_forecasts(self.forecasts, paths["heldout_forecasts"], manifest_id)
        write_csv(self.actuals, paths["actuals"], manifest_id)
        return paths


def _comparator_grid(
    records: Sequence[ForecastRecord], code: str, years: np.ndarray
) -> Optional[np.ndarray]:
    by_year = {r.year: r.quantiles for r in records if r.country_code == code}
    if not all(int(y) in by_year for y in years):
        return None
    return np.array([by_year[int(y)] for y in years])


def run_backtest(
    ensemble: LoadedEnsemble,
    panel: HarmonizedPanel,
    cutoff_year: int = DEFAULT_CUTOFF,
    comparators: Optional[Mapping[str, Sequence[ForecastRecord]]] = None,
) -> BacktestResult:
    """
    Score the ensemble, naive drift and any comparators on the held-out years.

    Every model forecasts from origin ``cutoff_year - 1`` for the ensemble's
    l_pred years (clipped to each country's last observation). Scores are in
    natural TFR units; drift and comparators only enter for countries the
    ensemble can forecast.

    Args:
        ensemble: Members trained on years < cutoff_year.
        panel: Harmonized panel in natural units (training and held-out years).
        cutoff_year: First held-out year.
        comparators: Externally supplied held-out forecasts by model tag.
    """
    comparators = comparators or {}
    scaler = ensemble.scaler
    index = ensemble.country_index
    known = {c: s for c, s in log_standardize(panel, scaler).items() if c in index}
    for code in sorted(set(panel.country_codes) - set(known)):
        logger.warning("%s: not in the ensemble's country table, not evaluated", code)

    origins = forecast_origins(known, index, ensemble.l_enc, origin_year=cutoff_year - 1)
    grid = scaler.invert(ensemble_forecast(ensemble, origins.encoder, origins.country_ids))

    scores: List[CountryScores] = []
    forecasts: List[ForecastRecord] = []
    actual_rows = []
    for row, code in enumerate(origins.country_codes):
        series = panel.series[code]
        last = min(cutoff_year + ensemble.l_pred - 1, series.last_year)
        if last < cutoff_year:
            logger.warning("%s: no observations from %d, not evaluated", code, cutoff_year)
            continue
        years = np.arange(cutoff_year, last + 1)
        actual = np.array([series.value_at(int(y)) for y in years])
        training = series.before(cutoff_year).values
        actual_rows.extend((code, int(y), float(v)) for y, v in zip(years, actual))

        neural = grid[row, : len(years)]
        scores.append(score_country(code, NEURAL_MODEL, actual, neural, training))
        forecasts.extend(grid_to_records(code, cutoff_year, neural, NEURAL_MODEL))

        drift = naive_drift(training, len(years))
        drift_grid = np.repeat(drift[:, None], neural.shape[1], axis=1)
        scores.append(score_country(code, DRIFT_MODEL, actual, drift_grid, training))
        forecasts.extend(point_records(code, cutoff_year, drift, DRIFT_MODEL))

        for model in sorted(comparators):
            comp = _comparator_grid(comparators[model], code, years)
            if comp is None:
                logger.warning("%s: %s lacks some held-out years, not scored", code, model)
                continue
            scores.append(score_country(code, model, actual, comp, training))
            forecasts.extend(grid_to_records(code, cutoff_year, comp, model))

    if not scores:
        raise ValueError(f"No country could be evaluated from cutoff {cutoff_year}")
    logger.info(
        "Backtest from %d: %d countries, %d models",
        cutoff_year,
        len({s.country for s in scores}),
        len({s.model for s in scores}),
    )
    return BacktestResult(
        cutoff_year=cutoff_year,
        scores=scores,
        report=summarize(scores),
        forecasts=forecasts,
        actuals=pd.DataFrame(actual_rows, columns=ACTUAL_COLUMNS),
    )
