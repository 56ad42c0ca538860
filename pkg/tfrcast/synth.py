"""
Synthetic multi-source report panels with logistic fertility transitions.

Each country follows

    y(t) = floor + (start - floor) / (1 + exp(k (t - t0)))

observed with Gaussian noise, with interior years dropped and second-source
reports added at configurable rates. A small share of rows is written twice
verbatim, as in concatenated exports, so every ingest path runs without
external data.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .nn.rng import RngStream
from .report_parser import RawReport

logger = logging.getLogger(__name__)

SYNTH_LAST_YEAR = 2023
PRIMARY_SOURCE = "census"
SECONDARY_SOURCE = "survey"
MODELED_SOURCE = "modeled"
REGIONS = ("africa", "americas", "asia", "europe", "oceania")


@dataclass(frozen=True)
class SynthConfig:
    n_countries: int = 20
    n_years: int = 80
    last_year: int = SYNTH_LAST_YEAR
    noise_sigma: float = 0.05
    gap_prob: float = 0.05
    duplicate_prob: float = 0.10
    modeled_prob: float = 0.0
    repeat_prob: float = 0.01
    start_range: Tuple[float, float] = (4.0, 8.0)
    floor_range: Tuple[float, float] = (1.1, 1.9)
    k_range: Tuple[float, float] = (0.05, 0.25)

    def __post_init__(self):
        if self.n_countries < 1:
            raise ValueError("n_countries must be >= 1")
        if self.n_years < 2:
            raise ValueError("n_years must be >= 2")
        for name in ("gap_prob", "duplicate_prob", "modeled_prob", "repeat_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")

    @property
    def first_year(self) -> int:
        return self.last_year - self.n_years + 1


@dataclass(frozen=True)
class TransitionCurve:
    start: float
    floor: float
    k: float
    t0: float

    def __call__(self, years) -> np.ndarray:
        t = np.asarray(years, dtype=np.float64)
        return self.floor + (self.start - self.floor) / (1.0 + np.exp(self.k * (t - self.t0)))


def country_codes(n: int) -> List[str]:
    return [f"S{i:03d}" for i in range(n)]


def draw_curve(config: SynthConfig, rng: RngStream) -> TransitionCurve:
    return TransitionCurve(
        start=float(rng.uniform(*config.start_range)),
        floor=float(rng.uniform(*config.floor_range)),
        k=float(rng.uniform(*config.k_range)),
        t0=float(rng.uniform(config.first_year + 0.2 * config.n_years, config.last_year - 0.2 * config.n_years)),
    )


def synth_panel(config: SynthConfig, seed: int) -> Tuple[List[RawReport], Dict[str, TransitionCurve]]:
    """
    Generate raw reports for ``config.n_countries`` countries.

    The first and last year of every country are always observed, so each
    series keeps its full span after interpolation.

    Returns:
        Reports in country then year order, and the curve behind each country.
    """
    root = RngStream(seed).split("synth")
    years = np.arange(config.first_year, config.last_year + 1)
    reports: List[RawReport] = []
    curves: Dict[str, TransitionCurve] = {}
    n_gaps = n_dups = n_repeats = 0

    for code in country_codes(config.n_countries):
        rng = root.split(code)
        curve = draw_curve(config, rng)
        curves[code] = curve
        truth = curve(years)
        noise, dup_noise = rng.normal(0.0, config.noise_sigma, (2, len(years)))
        gap_draws = rng.uniform(size=len(years))
        dup_draws = rng.uniform(size=len(years))
        modeled_draws = rng.uniform(size=len(years))
        repeat_draws = rng.uniform(size=len(years))

        for j, year in enumerate(years):
            interior = 0 < j < len(years) - 1
            if interior and gap_draws[j] < config.gap_prob:
                n_gaps += 1
                continue
            source = MODELED_SOURCE if modeled_draws[j] < config.modeled_prob else PRIMARY_SOURCE
            report = RawReport(code, int(year), _positive(truth[j] + noise[j]), source)
            reports.append(report)
            if repeat_draws[j] < config.repeat_prob:
                n_repeats += 1
                reports.append(report)
            if dup_draws[j] < config.duplicate_prob:
                n_dups += 1
                reports.append(
                    RawReport(code, int(year), _positive(truth[j] + dup_noise[j]), SECONDARY_SOURCE)
                )

    logger.info(
        "Synthesized %d countries x %d years: %d reports, %d gaps, %d second-source rows, "
        "%d repeated rows",
        config.n_countries,
        config.n_years,
        len(reports),
        n_gaps,
        n_dups,
        n_repeats,
    )
    return reports, curves


def _positive(value: float) -> float:
    return float(max(value, 0.01))


def synth_weights(codes: Sequence[str], seed: int) -> Dict[str, float]:
    """Positive population-like weights (log-normal, millions)."""
    rng = RngStream(seed).split("synth-weights")
    draws = np.exp(rng.normal(2.0, 1.0, len(codes)))
    return {code: float(w) for code, w in zip(codes, draws)}


def synth_regions(codes: Sequence[str]) -> Dict[str, str]:
    return {code: REGIONS[i % len(REGIONS)] for i, code in enumerate(codes)}
