"""
Standardization and windowing of the harmonized panel.

Values enter the model as z = (ln(tfr) - mu) / sigma with one global
(mu, sigma) pair fitted on training cells only. Each window covers ``l_enc``
encoder years, each represented by z at the year and 2, 4 and 6 years
earlier, followed by ``l_pred`` target years.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .harmonizer import AnnualSeries, HarmonizedPanel
from .nn.rng import RngStream

logger = logging.getLogger(__name__)

LAGS = (0, 2, 4, 6)
N_FEATURES = len(LAGS)
MAX_LAG = max(LAGS)
# Observed values the decoder needs from the window: z[t-6] .. z[t]
TAIL_LENGTH = MAX_LAG + 1
MIN_ENCODER_LENGTH = 2
DEFAULT_CUTOFF = 2009


@dataclass(frozen=True)
class GlobalScaler:
    """Global mean and standard deviation of log-TFR over the training cells."""

    mu: float
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma_global must be positive")

    def standardize(self, tfr) -> np.ndarray:
        tfr = np.asarray(tfr, dtype=np.float64)
        if np.any(tfr <= 0):
            raise ValueError("TFR values must be positive to take logs")
        return (np.log(tfr) - self.mu) / self.sigma

    def invert(self, z) -> np.ndarray:
        return np.exp(np.asarray(z, dtype=np.float64) * self.sigma + self.mu)

    def to_dict(self) -> dict:
        return {"mu": self.mu, "sigma": self.sigma}

    @classmethod
    def from_dict(cls, data: dict) -> "GlobalScaler":
        return cls(mu=float(data["mu"]), sigma=float(data["sigma"]))


def fit_scaler(panel: HarmonizedPanel, cutoff_year: Optional[int] = DEFAULT_CUTOFF) -> GlobalScaler:
    """
    Fit the global scaler on every country-year with year < cutoff_year.

    Args:
        panel: Harmonized panel in natural TFR units.
        cutoff_year: First excluded year; None fits on all cells.

    Raises:
        ValueError: If no training cells exist or all log values are equal.
    """
    cells = []
    for series in panel.series.values():
        part = series.before(cutoff_year)
        if part is not None:
            cells.append(part.values)
    if not cells:
        raise ValueError("Training partition is empty; cannot fit the scaler")
    logs = np.log(np.concatenate(cells))
    sigma = float(np.std(logs))
    if sigma <= 0:
        raise ValueError("Training cells have zero variance; cannot standardize")
    return GlobalScaler(mu=float(np.mean(logs)), sigma=sigma)


def log_standardize(panel: HarmonizedPanel, scaler: GlobalScaler) -> Dict[str, AnnualSeries]:
    """Standardized copy of every series (same years and flags)."""
    return {
        code: AnnualSeries(
            country_code=code,
            first_year=s.first_year,
            values=scaler.standardize(s.values),
            flags=s.flags,
            smoothed=s.smoothed,
        )
        for code, s in panel.series.items()
    }


def invert(z, scaler: GlobalScaler) -> np.ndarray:
    """Back to births per woman; monotone, so quantile order is preserved."""
    return scaler.invert(z)


@dataclass
class WindowSample:
    country_id: int
    origin_year: int
    encoder_input: np.ndarray
    target: np.ndarray
    augmented: bool = False


@dataclass
class WindowSet:
    """Windows stored column-wise: encoder (N, l_enc, 4), targets (N, l_pred)."""

    country_ids: np.ndarray
    origin_years: np.ndarray
    encoder: np.ndarray
    targets: np.ndarray
    augmented: np.ndarray

    def __len__(self) -> int:
        return len(self.country_ids)

    def __getitem__(self, i: int) -> WindowSample:
        return WindowSample(
            country_id=int(self.country_ids[i]),
            origin_year=int(self.origin_years[i]),
            encoder_input=self.encoder[i],
            target=self.targets[i],
            augmented=bool(self.augmented[i]),
        )

    @property
    def tails(self) -> np.ndarray:
        """z[t-6] .. z[t] per window, read from the current-value column."""
        return decoder_tail(self.encoder)

    def subset(self, mask_or_index) -> "WindowSet":
        return WindowSet(
            country_ids=self.country_ids[mask_or_index],
            origin_years=self.origin_years[mask_or_index],
            encoder=self.encoder[mask_or_index],
            targets=self.targets[mask_or_index],
            augmented=self.augmented[mask_or_index],
        )

    @classmethod
    def empty(cls, l_enc: int, l_pred: int) -> "WindowSet":
        return cls(
            country_ids=np.zeros(0, dtype=np.int64),
            origin_years=np.zeros(0, dtype=np.int64),
            encoder=np.zeros((0, l_enc, N_FEATURES)),
            targets=np.zeros((0, l_pred)),
            augmented=np.zeros(0, dtype=bool),
        )

    @classmethod
    def concatenate(cls, parts: Sequence["WindowSet"]) -> "WindowSet":
        return cls(
            country_ids=np.concatenate([p.country_ids for p in parts]),
            origin_years=np.concatenate([p.origin_years for p in parts]),
            encoder=np.concatenate([p.encoder for p in parts]),
            targets=np.concatenate([p.targets for p in parts]),
            augmented=np.concatenate([p.augmented for p in parts]),
        )


def decoder_tail(encoder: np.ndarray) -> np.ndarray:
    """
    z[t-6] .. z[t] per row of a (batch, l_enc, 4) encoder array.

    The last row carries the even lags of the origin, the row before it the odd
    ones, so any encoder with two or more steps determines the tail.
    """
    if encoder.shape[1] < MIN_ENCODER_LENGTH:
        raise ValueError(f"Encoder needs >= {MIN_ENCODER_LENGTH} steps for the decoder tail")
    last, previous = encoder[:, -1, :], encoder[:, -2, :]
    tail = np.empty((encoder.shape[0], TAIL_LENGTH))
    for j, lag in enumerate(LAGS):
        tail[:, MAX_LAG - lag] = last[:, j]
        if lag < MAX_LAG:
            tail[:, MAX_LAG - lag - 1] = previous[:, j]
    return tail


def window_count(n_years: int, l_enc: int, l_pred: int) -> int:
    """Closed-form number of stride-1 windows in a series of ``n_years``."""
    return max(0, n_years - (l_enc + MAX_LAG) - l_pred + 1)


def encoder_input(values: np.ndarray, origin_index: int, l_enc: int) -> np.ndarray:
    """Encoder matrix for the window whose last encoder year is ``origin_index``."""
    rows = np.arange(origin_index - l_enc + 1, origin_index + 1)
    if rows[0] - MAX_LAG < 0:
        raise ValueError("Not enough history for the lag features")
    return np.stack([values[rows - lag] for lag in LAGS], axis=1)


def make_windows(
    zpanel: Dict[str, AnnualSeries],
    country_index: Dict[str, int],
    l_enc: int,
    l_pred: int,
    stride: int = 1,
    cutoff_year: Optional[int] = None,
) -> WindowSet:
    """
    Slide windows over every standardized series.

    Args:
        zpanel: Standardized series by country code.
        country_index: Embedding row per country code.
        l_enc: Encoder length (>= 2 so the decoder tail resolves).
        l_pred: Target length.
        stride: Step between consecutive origins.
        cutoff_year: When set, only years < cutoff_year are used, so no
            encoder or target cell reaches the cutoff.
    """
    if l_enc < MIN_ENCODER_LENGTH:
        raise ValueError(f"l_enc must be >= {MIN_ENCODER_LENGTH}, got {l_enc}")
    if l_pred < 1:
        raise ValueError("l_pred must be >= 1")

    parts = []
    for code in sorted(zpanel):
        series = zpanel[code].before(cutoff_year)
        if series is None:
            continue
        values = series.values
        first_origin = l_enc - 1 + MAX_LAG
        last_origin = len(values) - 1 - l_pred
        origins = np.arange(first_origin, last_origin + 1, stride)
        if len(origins) == 0:
            continue
        encoders = np.stack([encoder_input(values, t, l_enc) for t in origins])
        targets = np.stack([values[t + 1 : t + 1 + l_pred] for t in origins])
        parts.append(
            WindowSet(
                country_ids=np.full(len(origins), country_index[code], dtype=np.int64),
                origin_years=series.first_year + origins,
                encoder=encoders,
                targets=targets,
                augmented=np.zeros(len(origins), dtype=bool),
            )
        )
    if not parts:
        return WindowSet.empty(l_enc, l_pred)
    return WindowSet.concatenate(parts)


def augment_low_fertility(
    windows: WindowSet,
    panel: HarmonizedPanel,
    country_index: Dict[str, int],
    rng: RngStream,
    cutoff_year: Optional[int] = DEFAULT_CUTOFF,
    threshold: float = 1.3,
    n_recent: int = 10,
    noise_sigma: float = 0.01,
) -> WindowSet:
    """
    Append noisy duplicates of recent windows from low-fertility countries.

    A country qualifies when its training series (years < cutoff_year, natural
    units) reaches ``threshold`` or lower. Its ``n_recent`` latest windows by
    origin year are copied once with independent Gaussian noise on every
    encoder and target cell. Originals are left untouched and come first.
    """
    qualifying = []
    for code in sorted(panel.series):
        part = panel.series[code].before(cutoff_year)
        if part is not None and np.min(part.values) <= threshold:
            qualifying.append(country_index[code])

    copies = []
    for cid in qualifying:
        idx = np.flatnonzero((windows.country_ids == cid) & ~windows.augmented)
        if len(idx) == 0:
            continue
        recent = idx[np.argsort(windows.origin_years[idx], kind="stable")][-n_recent:]
        dup = windows.subset(recent)
        dup = WindowSet(
            country_ids=dup.country_ids.copy(),
            origin_years=dup.origin_years.copy(),
            encoder=dup.encoder + rng.normal(0.0, noise_sigma, dup.encoder.shape),
            targets=dup.targets + rng.normal(0.0, noise_sigma, dup.targets.shape),
            augmented=np.ones(len(recent), dtype=bool),
        )
        copies.append(dup)

    if not copies:
        return windows
    augmented = WindowSet.concatenate([windows] + copies)
    n_added = len(augmented) - len(windows)
    logger.info(
        "Augmented %d low-fertility countries: +%d windows (%.1f%%)",
        len(copies),
        n_added,
        100.0 * n_added / max(1, len(windows)),
    )
    return augmented


@dataclass
class OriginSet:
    """Forecast origins: one encoder matrix per country, no targets."""

    country_codes: List[str]
    country_ids: np.ndarray
    origin_years: np.ndarray
    encoder: np.ndarray

    def __len__(self) -> int:
        return len(self.country_codes)

    @property
    def tails(self) -> np.ndarray:
        return decoder_tail(self.encoder)


def forecast_origins(
    zpanel: Dict[str, AnnualSeries],
    country_index: Dict[str, int],
    l_enc: int,
    origin_year: Optional[int] = None,
) -> OriginSet:
    """
    One encoder window per country ending at ``origin_year`` (or at each
    series' last year). Countries without enough history are skipped with a
    warning.
    """
    codes, ids, years, encoders = [], [], [], []
    for code in sorted(zpanel):
        series = zpanel[code]
        end = series.last_year if origin_year is None else origin_year
        index = end - series.first_year
        if index >= len(series) or index - (l_enc - 1) - MAX_LAG < 0:
            logger.warning(
                "%s: series %d-%d too short for a window ending %d, excluded",
                code,
                series.first_year,
                series.last_year,
                end,
            )
            continue
        codes.append(code)
        ids.append(country_index[code])
        years.append(end)
        encoders.append(encoder_input(series.values, index, l_enc))
    return OriginSet(
        country_codes=codes,
        country_ids=np.array(ids, dtype=np.int64),
        origin_years=np.array(years, dtype=np.int64),
        encoder=np.stack(encoders) if encoders else np.zeros((0, l_enc, N_FEATURES)),
    )


@dataclass
class SplitResult:
    train: WindowSet
    validation: WindowSet
    test: Optional[OriginSet]
    cutoff_year: Optional[int]


def temporal_split(
    zpanel: Dict[str, AnnualSeries],
    country_index: Dict[str, int],
    l_enc: int,
    l_pred: int,
    cutoff_year: Optional[int] = DEFAULT_CUTOFF,
    validation_years: int = 10,
) -> SplitResult:
    """
    Leakage-free partition around ``cutoff_year``.

    Training and validation windows use years < cutoff_year only. Validation
    holds the windows whose origin falls in the last ``validation_years``
    eligible origin years; training holds the rest. The test set is one
    origin per country at cutoff_year - 1. With ``cutoff_year=None`` (full
    sample fit) every year is eligible and there is no test set.
    """
    eligible = make_windows(zpanel, country_index, l_enc, l_pred, cutoff_year=cutoff_year)
    if validation_years <= 0 or len(eligible) == 0:
        if validation_years <= 0:
            logger.warning("validation_years=0: validation set is empty")
        train, validation = eligible, WindowSet.empty(l_enc, l_pred)
    else:
        first_val_origin = int(eligible.origin_years.max()) - validation_years + 1
        in_val = eligible.origin_years >= first_val_origin
        train, validation = eligible.subset(~in_val), eligible.subset(in_val)

    test = None
    if cutoff_year is not None:
        test = forecast_origins(zpanel, country_index, l_enc, origin_year=cutoff_year - 1)
    logger.info(
        "Split at %s: %d train, %d validation windows, %d test origins",
        cutoff_year,
        len(train),
        len(validation),
        len(test) if test is not None else 0,
    )
    return SplitResult(train=train, validation=validation, test=test, cutoff_year=cutoff_year)


def country_index_for(codes: Sequence[str]) -> Dict[str, int]:
    """Embedding row per country, assigned in sorted code order."""
    return {code: i for i, code in enumerate(sorted(codes))}
