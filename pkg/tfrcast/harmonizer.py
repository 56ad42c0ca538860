"""
Harmonization of raw reports into one annual TFR series per country.

Pipeline: drop modeled-only sources, take the median of same-year reports,
fill interior gaps linearly, compute the three series diagnostics, flag
outlying series and smooth the flagged ones with a bidirectional EWMA.
Diagnostics are frozen on the pre-smoothing series.
"""

import hashlib
import logging
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np
import pandas as pd

from .manifest import read_csv, write_csv
from .report_parser import RawReport

logger = logging.getLogger(__name__)

OBSERVED = "observed"
INTERPOLATED = "interpolated"

SMOOTHING_SPAN = 5
IQR_MULTIPLIER = 1.5
MIN_COUNTRIES_FOR_FLAGS = 4

PANEL_COLUMNS = ["country_code", "year", "tfr", "flag"]
DIAGNOSTIC_COLUMNS = [
    "country_code",
    "gap_fraction",
    "source_dispersion",
    "volatility",
    "flagged",
    "smoothed",
]


@dataclass(frozen=True, eq=False)
class AnnualSeries:
    """Contiguous annual TFR values for one country with per-year provenance."""

    country_code: str
    first_year: int
    values: np.ndarray
    flags: Tuple[str, ...]
    smoothed: bool = False

    def __post_init__(self):
        if len(self.values) == 0:
            raise ValueError(f"{self.country_code}: empty series")
        if len(self.flags) != len(self.values):
            raise ValueError(f"{self.country_code}: flags and values differ in length")

    @property
    def last_year(self) -> int:
        return self.first_year + len(self.values) - 1

    @property
    def years(self) -> np.ndarray:
        return np.arange(self.first_year, self.last_year + 1)

    @property
    def n_interpolated(self) -> int:
        return sum(1 for flag in self.flags if flag == INTERPOLATED)

    def __len__(self) -> int:
        return len(self.values)

    def before(self, cutoff_year: Optional[int]) -> Optional["AnnualSeries"]:
        """The part of the series with year < cutoff_year (None if nothing is left)."""
        if cutoff_year is None or cutoff_year > self.last_year:
            return self
        n = cutoff_year - self.first_year
        if n <= 0:
            return None
        return replace(self, values=self.values[:n], flags=self.flags[:n])

    def value_at(self, year: int) -> float:
        if not self.first_year <= year <= self.last_year:
            raise KeyError(f"{self.country_code}: no value for {year}")
        return float(self.values[year - self.first_year])


@dataclass(frozen=True)
class SeriesDiagnostics:
    gap_fraction: float
    source_dispersion: float
    volatility: float

    def as_tuple(self) -> Tuple[float, float, float]:
        return (self.gap_fraction, self.source_dispersion, self.volatility)


@dataclass
class HarmonizedPanel:
    """Harmonized series keyed by country code plus diagnostics and flags."""

    series: Dict[str, AnnualSeries]
    diagnostics: Dict[str, SeriesDiagnostics] = field(default_factory=dict)
    flagged: Set[str] = field(default_factory=set)

    def __post_init__(self):
        self.series = {code: self.series[code] for code in sorted(self.series)}

    @property
    def country_codes(self) -> List[str]:
        return list(self.series)

    def __len__(self) -> int:
        return len(self.series)

    @property
    def metadata(self) -> Dict[str, float]:
        n_cells = sum(len(s) for s in self.series.values())
        n_interpolated = sum(s.n_interpolated for s in self.series.values())
        return {
            "n_countries": len(self.series),
            "n_cells": n_cells,
            "n_interpolated": n_interpolated,
            "interpolated_share": n_interpolated / n_cells if n_cells else 0.0,
            "n_flagged": len(self.flagged),
            "n_smoothed": sum(1 for s in self.series.values() if s.smoothed),
        }

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for code, s in self.series.items():
            for year, value, flag in zip(s.years, s.values, s.flags):
                rows.append((code, int(year), float(value), flag))
        return pd.DataFrame(rows, columns=PANEL_COLUMNS)

    def diagnostics_frame(self) -> pd.DataFrame:
        rows = []
        for code, s in self.series.items():
            diag = self.diagnostics.get(code)
            if diag is None:
                continue
            rows.append(
                (code, *diag.as_tuple(), code in self.flagged, bool(s.smoothed))
            )
        return pd.DataFrame(rows, columns=DIAGNOSTIC_COLUMNS)

    def content_hash(self) -> str:
        payload = self.to_frame().to_csv(index=False, lineterminator="\n")
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def write(
        self,
        panel_path: str,
        diagnostics_path: Optional[str] = None,
        manifest_id: Optional[str] = None,
    ):
        write_csv(self.to_frame(), panel_path, manifest_id)
        if diagnostics_path:
            write_csv(self.diagnostics_frame(), diagnostics_path, manifest_id)

    @classmethod
    def read(
        cls, panel_path: str, diagnostics_path: Optional[str] = None
    ) -> "HarmonizedPanel":
        """Rebuild a panel from the files written by :meth:`write`."""
        frame = read_csv(panel_path, dtype={"country_code": str})
        missing = set(PANEL_COLUMNS) - set(frame.columns)
        if missing:
            raise ValueError(f"{panel_path}: missing columns {sorted(missing)}")

        diagnostics: Dict[str, SeriesDiagnostics] = {}
        flagged: Set[str] = set()
        smoothed: Set[str] = set()
        if diagnostics_path:
            diag = read_csv(diagnostics_path, dtype={"country_code": str})
            for row in diag.itertuples(index=False):
                diagnostics[row.country_code] = SeriesDiagnostics(
                    float(row.gap_fraction),
                    float(row.source_dispersion),
                    float(row.volatility),
                )
                if _as_bool(row.flagged):
                    flagged.add(row.country_code)
                if _as_bool(row.smoothed):
                    smoothed.add(row.country_code)

        series = {}
        for code, group in frame.groupby("country_code", sort=True):
            group = group.sort_values("year")
            years = group["year"].to_numpy(dtype=np.int64)
            if np.any(np.diff(years) != 1):
                raise ValueError(f"{panel_path}: series for {code} is not contiguous")
            series[code] = AnnualSeries(
                country_code=code,
                first_year=int(years[0]),
                values=group["tfr"].to_numpy(dtype=np.float64),
                flags=tuple(group["flag"]),
                smoothed=code in smoothed,
            )
        return cls(series=series, diagnostics=diagnostics, flagged=flagged)


def _as_bool(value) -> bool:
    if isinstance(value, str):
        return value.strip().lower() in ("true", "1", "yes")
    return bool(value)


def drop_modeled(
    reports: Iterable[RawReport], modeled_sources: Sequence[str] = ()
) -> List[RawReport]:
    """
    Keep empirical reports only; countries left without any are reported.

    Args:
        reports: Parsed reports.
        modeled_sources: source_id values that mark model-based estimates.
    """
    modeled = set(modeled_sources)
    reports = list(reports)
    kept = [r for r in reports if r.source_id not in modeled]
    before = {r.country_code for r in reports}
    after = {r.country_code for r in kept}
    for code in sorted(before - after):
        logger.warning("%s has no empirical observations and is dropped", code)
    return kept


def aggregate_medians(reports: Iterable[RawReport]) -> Dict[str, Dict[int, float]]:
    """Median of all reports per (country, year); even counts average the middle pair."""
    grouped: Dict[str, Dict[int, List[float]]] = defaultdict(lambda: defaultdict(list))
    for report in reports:
        grouped[report.country_code][report.year].append(report.tfr)
    return {
        code: {year: float(np.median(by_year[year])) for year in sorted(by_year)}
        for code, by_year in sorted(grouped.items())
    }


def interpolate_gaps(
    country_code: str, yearly: Mapping[int, float]
) -> Optional[AnnualSeries]:
    """
    Fill interior missing years linearly between the nearest observed years.

    The series spans the first to the last observed year; nothing is
    extrapolated. Observed values pass through unchanged.

    Returns:
        The contiguous series, or None (with a warning) for fewer than two
        observed years.
    """
    if len(yearly) < 2:
        logger.warning(
            "%s has %d observed year(s); at least 2 are needed, country excluded",
            country_code,
            len(yearly),
        )
        return None
    obs_years = np.array(sorted(yearly), dtype=np.int64)
    obs_values = np.array([yearly[y] for y in obs_years], dtype=np.float64)
    years = np.arange(obs_years[0], obs_years[-1] + 1)

    values = np.interp(years, obs_years, obs_values)
    observed = np.isin(years, obs_years)
    values[observed] = obs_values
    flags = tuple(OBSERVED if o else INTERPOLATED for o in observed)
    return AnnualSeries(country_code, int(years[0]), values, flags)


def compute_diagnostics(
    reports: Iterable[RawReport], series: Mapping[str, AnnualSeries]
) -> Dict[str, SeriesDiagnostics]:
    """
    Series-level diagnostics used by the outlier rule.

    gap_fraction is the share of interior years (strictly between the first
    and last observation) that had no report. source_dispersion is the median
    over observed years of the sample standard deviation across that year's
    reports (0 for single-report years). volatility is the sample standard
    deviation of first differences of the contiguous median series.
    """
    by_cell: Dict[str, Dict[int, List[float]]] = defaultdict(lambda: defaultdict(list))
    for report in reports:
        by_cell[report.country_code][report.year].append(report.tfr)

    diagnostics = {}
    for code, s in series.items():
        interior = len(s) - 2
        gap_fraction = s.n_interpolated / interior if interior > 0 else 0.0

        spreads = [
            float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
            for _, values in sorted(by_cell.get(code, {}).items())
        ]
        dispersion = float(np.median(spreads)) if spreads else 0.0

        diffs = np.diff(s.values)
        volatility = float(np.std(diffs, ddof=1)) if len(diffs) > 1 else 0.0

        diagnostics[code] = SeriesDiagnostics(gap_fraction, dispersion, volatility)
    return diagnostics


def flag_outliers(diagnostics: Mapping[str, SeriesDiagnostics]) -> Set[str]:
    """
    Countries whose diagnostics mark them as noisy.

    A country is flagged when any diagnostic exceeds Q3 + 1.5 IQR of that
    diagnostic across countries, or when at least two diagnostics exceed
    their cross-country 75th percentile. Comparisons are strict; quartiles
    interpolate linearly between order statistics.
    """
    if len(diagnostics) < MIN_COUNTRIES_FOR_FLAGS:
        logger.warning(
            "Outlier rule needs at least %d countries, got %d; nothing flagged",
            MIN_COUNTRIES_FOR_FLAGS,
            len(diagnostics),
        )
        return set()

    codes = sorted(diagnostics)
    matrix = np.array([diagnostics[code].as_tuple() for code in codes])
    q1, q3 = np.percentile(matrix, [25, 75], axis=0)
    fence = q3 + IQR_MULTIPLIER * (q3 - q1)

    beyond_fence = (matrix > fence).any(axis=1)
    above_q3 = (matrix > q3).sum(axis=1) >= 2
    return {code for code, hit in zip(codes, beyond_fence | above_q3) if hit}


def smooth_series(series: AnnualSeries, span: int = SMOOTHING_SPAN) -> AnnualSeries:
    """
    Average of a forward and a backward EWMA (alpha = 2 / (span + 1)).

    Each pass starts from the first value in its direction. Flags are kept
    and the series is marked smoothed.
    """
    values = pd.Series(series.values)
    forward = values.ewm(span=span, adjust=False).mean().to_numpy()
    backward = values[::-1].ewm(span=span, adjust=False).mean().to_numpy()[::-1]
    return replace(series, values=(forward + backward) / 2.0, smoothed=True)


def harmonize(
    reports: Iterable[RawReport],
    smoothing: bool = True,
    modeled_sources: Sequence[str] = (),
) -> HarmonizedPanel:
    """
    Build the harmonized panel from raw reports.

    Args:
        reports: Parsed raw reports.
        smoothing: Apply the EWMA smoothing to flagged series; when False the
            flags are still computed and reported.
        modeled_sources: source_id values excluded as non-empirical.
    """
    empirical = drop_modeled(reports, modeled_sources)
    medians = aggregate_medians(empirical)

    series = {}
    for code, yearly in medians.items():
        annual = interpolate_gaps(code, yearly)
        if annual is not None:
            series[code] = annual

    diagnostics = compute_diagnostics(empirical, series)
    flagged = flag_outliers(diagnostics)
    if smoothing:
        for code in sorted(flagged):
            series[code] = smooth_series(series[code])

    panel = HarmonizedPanel(series=series, diagnostics=diagnostics, flagged=flagged)
    meta = panel.metadata
    logger.info(
        "Harmonized %d countries, %d cells (%d interpolated, %.1f%%), %d flagged, %d smoothed",
        meta["n_countries"],
        meta["n_cells"],
        meta["n_interpolated"],
        100 * meta["interpolated_share"],
        meta["n_flagged"],
        meta["n_smoothed"],
    )
    return panel
