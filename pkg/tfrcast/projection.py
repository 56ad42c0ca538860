"""
Forecast records, forward projection with re-anchoring, comparator loading,
and the aggregation reports (population-weighted TFR, threshold shares,
regional endpoint tables).
"""

import json
import logging
import math
import os
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np
import pandas as pd

from .ensemble import LoadedEnsemble, ensemble_forecast
from .harmonizer import HarmonizedPanel
from .manifest import read_csv, write_csv
from .model import QUANTILES
from .report_parser import read_source_lines
from .transform import MAX_LAG, encoder_input, log_standardize

logger = logging.getLogger(__name__)

QUANTILE_COLUMNS = ["q05", "q10", "q50", "q90", "q95"]
FORECAST_COLUMNS = ["country_code", "year", "model", *QUANTILE_COLUMNS]
NEURAL_MODEL = "neuraltfr"
DEFAULT_END_YEAR = 2040

REPLACEMENT, VERY_LOW, ULTRA_LOW = 2.1, 1.5, 1.3
THRESHOLDS = (ULTRA_LOW, VERY_LOW, REPLACEMENT)
SHARE_BINS = ("<1.3", "1.3-1.5", "1.5-2.1", ">=2.1")
BAND_LABELS = ("ultra-low", "very-low", "below-replacement", "replacement-or-above")
DEFAULT_INTERVALS = ((2025, 2029), (2030, 2034), (2035, 2039))


class ComparatorSchemaError(ValueError):
    """Raised for comparator rows that break the forecast schema."""

    def __init__(self, problems: List[Tuple[int, str]], source: str):
        self.lines = [line_no for line_no, _ in problems]
        self.problems = problems
        shown = "; ".join(f"line {n}: {msg}" for n, msg in problems[:10])
        more = f" (+{len(problems) - 10} more)" if len(problems) > 10 else ""
        super().__init__(f"{source}: {len(problems)} invalid rows: {shown}{more}")


@dataclass(frozen=True)
class ForecastRecord:
    country_code: str
    year: int
    model: str
    quantiles: Tuple[float, ...]

    def __post_init__(self):
        if len(self.quantiles) != len(QUANTILE_COLUMNS):
            raise ValueError(f"Expected {len(QUANTILE_COLUMNS)} quantiles, got {len(self.quantiles)}")
        if any(b < a for a, b in zip(self.quantiles, self.quantiles[1:])):
            raise ValueError(
                f"{self.country_code} {self.year} {self.model}: quantiles not monotone"
            )

    @property
    def q50(self) -> float:
        return self.quantiles[QUANTILES.index(0.50)]

    def to_row(self) -> list:
        return [self.country_code, self.year, self.model, *self.quantiles]


def records_frame(records: Iterable[ForecastRecord]) -> pd.DataFrame:
    return pd.DataFrame([r.to_row() for r in records], columns=FORECAST_COLUMNS)


def write_forecasts(
    records: Iterable[ForecastRecord], path: str, manifest_id: Optional[str] = None
):
    write_csv(records_frame(records), path, manifest_id)


def read_forecasts(path: str) -> List[ForecastRecord]:
    frame = read_csv(path, dtype={"country_code": str, "model": str})
    return [
        ForecastRecord(
            country_code=row.country_code,
            year=int(row.year),
            model=row.model,
            quantiles=tuple(float(getattr(row, c)) for c in QUANTILE_COLUMNS),
        )
        for row in frame.itertuples(index=False)
    ]


def grid_to_records(
    country_code: str, first_year: int, grid: np.ndarray, model: str
) -> List[ForecastRecord]:
    """Rows for a (steps, Q) natural-unit grid starting at ``first_year``."""
    return [
        ForecastRecord(country_code, first_year + k, model, tuple(float(v) for v in grid[k]))
        for k in range(len(grid))
    ]


def point_records(
    country_code: str, first_year: int, values: Sequence[float], model: str
) -> List[ForecastRecord]:
    """Point-only model rows: every quantile column carries the point value."""
    return [
        ForecastRecord(country_code, first_year + k, model, (float(v),) * len(QUANTILE_COLUMNS))
        for k, v in enumerate(values)
    ]


def forecast_forward(
    ensemble: LoadedEnsemble,
    panel: HarmonizedPanel,
    end_year: int = DEFAULT_END_YEAR,
    model: str = NEURAL_MODEL,
) -> List[ForecastRecord]:
    """
    Project every country from its last observed year to ``end_year``.

    Each decode pass covers l_pred years. When more are needed, the pass's
    medians are appended to the series as pseudo-observations and a new
    encoder window is built from the extended series. Quantiles are combined
    across members and rearranged in standardized units, then inverted to
    births per woman.

    Countries unknown to the ensemble or too short for one encoder window are
    skipped with a warning.
    """
    scaler = ensemble.scaler
    index = ensemble.country_index
    l_enc, l_pred = ensemble.l_enc, ensemble.l_pred
    zpanel = log_standardize(panel, scaler)

    extended: Dict[str, List[float]] = {}
    remaining: Dict[str, int] = {}
    next_year: Dict[str, int] = {}
    for code, series in zpanel.items():
        if code not in index:
            logger.warning("%s: not in the ensemble's country table, skipped", code)
            continue
        if len(series) < l_enc + MAX_LAG:
            logger.warning("%s: series too short for a %d-year encoder window, skipped", code, l_enc)
            continue
        horizon = end_year - series.last_year
        if horizon <= 0:
            continue
        extended[code] = list(series.values)
        remaining[code] = horizon
        next_year[code] = series.last_year + 1

    grids: Dict[str, List[np.ndarray]] = defaultdict(list)
    median_col = QUANTILES.index(0.50)
    n_pass = 0
    while remaining:
        codes = sorted(remaining)
        encoder = np.stack(
            [encoder_input(np.asarray(extended[c]), len(extended[c]) - 1, l_enc) for c in codes]
        )
        ids = np.array([index[c] for c in codes], dtype=np.int64)
        grid = ensemble_forecast(ensemble, encoder, ids, l_pred)
        for row, code in enumerate(codes):
            take = min(l_pred, remaining[code])
            grids[code].append(grid[row, :take])
            remaining[code] -= take
            if remaining[code] <= 0:
                del remaining[code]
            else:
                extended[code].extend(grid[row, :, median_col].tolist())
        n_pass += 1
    if n_pass:
        logger.info("Projected %d countries to %d in %d decode passes", len(grids), end_year, n_pass)

    records = []
    for code in sorted(grids):
        natural = scaler.invert(np.concatenate(grids[code], axis=0))
        first = next_year[code]
        records.extend(grid_to_records(code, first, natural, model))
    return records


def _parse_comparator_lines(lines: Sequence[str], source: str) -> List[ForecastRecord]:
    records, problems = [], []
    header_seen = False
    for line_no, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = [f.strip() for f in line.split(",")]
        if not header_seen:
            if fields != FORECAST_COLUMNS:
                raise ComparatorSchemaError(
                    [(line_no, f"header must be {','.join(FORECAST_COLUMNS)}")], source
                )
            header_seen = True
            continue
        if len(fields) != len(FORECAST_COLUMNS):
            problems.append((line_no, f"expected {len(FORECAST_COLUMNS)} fields, got {len(fields)}"))
            continue
        code, year, model, *qs = fields
        try:
            year_value = int(year)
            values = tuple(float(q) for q in qs)
        except ValueError:
            problems.append((line_no, "non-numeric year or quantile"))
            continue
        if not all(math.isfinite(v) and v > 0 for v in values):
            problems.append((line_no, "quantiles must be positive and finite"))
            continue
        if any(b < a for a, b in zip(values, values[1:])):
            problems.append((line_no, "quantiles are not monotone"))
            continue
        if not code or not model:
            problems.append((line_no, "empty country_code or model"))
            continue
        records.append(ForecastRecord(code, year_value, model, values))
    if not header_seen:
        raise ComparatorSchemaError([(0, "missing header")], source)
    if problems:
        raise ComparatorSchemaError(problems, source)
    return records


def load_comparators(sources: Sequence[str]) -> Dict[str, List[ForecastRecord]]:
    """
    Read comparator forecast files (paths or URLs) and group rows by model tag.

    Raises:
        ComparatorSchemaError: Listing every bad line of the first bad file.
    """
    grouped: Dict[str, List[ForecastRecord]] = defaultdict(list)
    for source in sources:
        records = _parse_comparator_lines(read_source_lines(source), os.path.basename(source) or source)
        for record in records:
            grouped[record.model].append(record)
        logger.info("Loaded %d comparator rows from %s", len(records), source)
    return dict(grouped)


def group_by_model(records: Iterable[ForecastRecord]) -> Dict[str, List[ForecastRecord]]:
    grouped: Dict[str, List[ForecastRecord]] = defaultdict(list)
    for record in records:
        grouped[record.model].append(record)
    return dict(grouped)


def _read_keyed(path: str, value_column: str) -> pd.DataFrame:
    frame = read_csv(path, dtype={"country_code": str})
    missing = {"country_code", value_column} - set(frame.columns)
    if missing:
        raise ValueError(f"{path}: missing columns {sorted(missing)}")
    if frame["country_code"].duplicated().any():
        raise ValueError(f"{path}: duplicate country codes")
    return frame


def load_weights(path: str) -> Dict[str, float]:
    """Population weights ``country_code,weight``; weights must be positive."""
    frame = _read_keyed(path, "weight")
    weights = dict(zip(frame["country_code"], frame["weight"].astype(float)))
    bad = sorted(code for code, w in weights.items() if not w > 0)
    if bad:
        raise ValueError(f"{path}: non-positive weights for {', '.join(bad)}")
    return weights


def load_regions(path: str) -> Dict[str, str]:
    frame = _read_keyed(path, "region")
    return dict(zip(frame["country_code"], frame["region"].astype(str)))


def write_weights(weights: Mapping[str, float], path: str, manifest_id: Optional[str] = None):
    frame = pd.DataFrame(sorted(weights.items()), columns=["country_code", "weight"])
    write_csv(frame, path, manifest_id)


def write_regions(regions: Mapping[str, str], path: str, manifest_id: Optional[str] = None):
    frame = pd.DataFrame(sorted(regions.items()), columns=["country_code", "region"])
    write_csv(frame, path, manifest_id)


def _medians_by_country(records: Iterable[ForecastRecord]) -> Dict[str, Dict[int, float]]:
    out: Dict[str, Dict[int, float]] = defaultdict(dict)
    for r in records:
        out[r.country_code][r.year] = r.q50
    return out


def weighted_tfr(
    records: Iterable[ForecastRecord],
    weights: Mapping[str, float],
    interval: Tuple[int, int],
) -> float:
    """
    Population-weighted mean of each country's average median over the
    interval (inclusive years). Countries without a weight are excluded with
    a warning; countries with no year in the interval do not contribute.
    """
    first, last = interval
    if last < first:
        raise ValueError(f"Empty interval {interval}")
    total_w, total = 0.0, 0.0
    for code, by_year in sorted(_medians_by_country(records).items()):
        values = [v for y, v in by_year.items() if first <= y <= last]
        if not values:
            continue
        if code not in weights:
            logger.warning("%s: no population weight, excluded from weighted TFR", code)
            continue
        total_w += weights[code]
        total += weights[code] * float(np.mean(values))
    return total / total_w if total_w > 0 else float("nan")


def endpoint_values(
    records: Iterable[ForecastRecord], end_year: int = DEFAULT_END_YEAR
) -> Dict[str, float]:
    """Median at ``end_year``, or at the last projected year before it."""
    endpoints = {}
    for code, by_year in _medians_by_country(records).items():
        years = [y for y in by_year if y <= end_year]
        if years:
            endpoints[code] = by_year[max(years)]
    return endpoints


def band_index(value: float) -> int:
    """0: < 1.3, 1: [1.3, 1.5), 2: [1.5, 2.1), 3: >= 2.1."""
    return int(np.digitize(value, THRESHOLDS, right=False))


def threshold_shares(
    records: Iterable[ForecastRecord], end_year: int = DEFAULT_END_YEAR
) -> Dict[str, float]:
    """Share of countries per fertility band at the endpoint; shares sum to 1."""
    endpoints = endpoint_values(records, end_year)
    counts = np.zeros(len(SHARE_BINS))
    for value in endpoints.values():
        counts[band_index(value)] += 1
    n = counts.sum()
    shares = counts / n if n else np.full(len(SHARE_BINS), float("nan"))
    return dict(zip(SHARE_BINS, shares.tolist()))


def intersection_sample(
    by_model: Mapping[str, Iterable[ForecastRecord]], end_year: int = DEFAULT_END_YEAR
) -> Set[str]:
    """Countries with an endpoint value in every model; dropped ones are logged."""
    present = {m: set(endpoint_values(recs, end_year)) for m, recs in by_model.items()}
    if not present:
        return set()
    common = set.intersection(*present.values())
    for model, codes in sorted(present.items()):
        dropped = sorted(codes - common)
        if dropped:
            logger.info("%s: %d countries outside the intersection sample: %s", model, len(dropped), ", ".join(dropped))
    return common


def regional_endpoint_table(
    by_model: Mapping[str, Iterable[ForecastRecord]],
    regions: Mapping[str, str],
    end_year: int = DEFAULT_END_YEAR,
) -> pd.DataFrame:
    """
    One row per country of the intersection sample, grouped by region, with
    each model's endpoint median and its threshold band.
    """
    by_model = {m: list(recs) for m, recs in by_model.items()}
    models = sorted(by_model)
    common = intersection_sample(by_model, end_year)
    endpoints = {m: endpoint_values(by_model[m], end_year) for m in models}

    rows = []
    for code in sorted(common):
        region = regions.get(code)
        if region is None:
            logger.warning("%s: no region, dropped from the regional table", code)
            continue
        row = {"region": region, "country_code": code}
        for m in models:
            value = endpoints[m][code]
            row[m] = value
            row[f"{m}_band"] = BAND_LABELS[band_index(value)]
        rows.append(row)
    columns = ["region", "country_code"] + [c for m in models for c in (m, f"{m}_band")]
    frame = pd.DataFrame(rows, columns=columns)
    return frame.sort_values(["region", "country_code"], kind="mergesort").reset_index(drop=True)


@dataclass
class AggregateReport:
    end_year: int
    intervals: List[Tuple[int, int]]
    weighted: Dict[str, Dict[str, float]] = field(default_factory=dict)
    shares: Dict[str, Dict[str, float]] = field(default_factory=dict)
    n_countries: int = 0

    @staticmethod
    def interval_label(interval: Tuple[int, int]) -> str:
        return f"{interval[0]}-{interval[1]}"

    def share_below(self, model: str, threshold: float = VERY_LOW) -> float:
        """Endpoint share of countries below 1.5 (or 1.3)."""
        shares = self.shares[model]
        bins = SHARE_BINS[:2] if threshold == VERY_LOW else SHARE_BINS[:1]
        return float(sum(shares[b] for b in bins))

    def to_dict(self) -> dict:
        return {
            "end_year": self.end_year,
            "n_countries": self.n_countries,
            "intervals": [self.interval_label(i) for i in self.intervals],
            "weighted_tfr": self.weighted,
            "threshold_shares": self.shares,
            "share_below_1_5": {m: self.share_below(m) for m in self.shares},
        }

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for model in sorted(self.shares):
            for label, value in self.weighted.get(model, {}).items():
                rows.append((model, "weighted_tfr", label, value))
            for label, value in self.shares[model].items():
                rows.append((model, "share", label, value))
            rows.append((model, "share_below_1.5", str(self.end_year), self.share_below(model)))
        return pd.DataFrame(rows, columns=["model", "measure", "group", "value"])

    def write(self, csv_path: str, json_path: Optional[str] = None, manifest_id: Optional[str] = None):
        write_csv(self.to_frame(), csv_path, manifest_id)
        if json_path:
            data = self.to_dict()
            data["manifest_id"] = manifest_id
            with open(json_path, "w", encoding="utf-8") as f:
                json.dump(data, f, indent=2, sort_keys=True)


def build_aggregate_report(
    by_model: Mapping[str, Iterable[ForecastRecord]],
    weights: Optional[Mapping[str, float]] = None,
    end_year: int = DEFAULT_END_YEAR,
    intervals: Sequence[Tuple[int, int]] = DEFAULT_INTERVALS,
) -> AggregateReport:
    """Weighted TFR per interval and endpoint band shares on the intersection sample."""
    by_model = {m: list(recs) for m, recs in by_model.items()}
    common = intersection_sample(by_model, end_year)
    report = AggregateReport(end_year=end_year, intervals=list(intervals), n_countries=len(common))
    for model in sorted(by_model):
        sample = [r for r in by_model[model] if r.country_code in common]
        if weights is not None:
            report.weighted[model] = {
                AggregateReport.interval_label(i): weighted_tfr(sample, weights, i) for i in intervals
            }
        report.shares[model] = threshold_shares(sample, end_year)
    return report
