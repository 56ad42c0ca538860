import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import datetime
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .model import (
    MEDIAN_INDEX,
    QUANTILES,
    Checkpoint,
    load_checkpoint,
    predict,
    rearrange_quantiles,
    save_checkpoint,
)
from .trainer import TrainConfig, TrainResult, train_model
from .transform import GlobalScaler, WindowSet

logger = logging.getLogger(__name__)

DEFAULT_MEMBERS = 10
LR_FACTORS = (0.8, 1.0, 1.25)
HIDDEN_OFFSETS = (0, 8, 0, -8)
REGISTRY_FILE = "ensemble.json"
REGISTRY_VERSION = "1.0"
INTERVAL_COVERAGE = 0.90
# Half-widths below this (standardized units) are treated as this
MIN_HALF_WIDTH = 1e-6


class EnsembleMemberError(RuntimeError):
    """A member failed to train or load; ``index`` names the member."""

    def __init__(self, index: int, message: str):
        super().__init__(f"ensemble member {index}: {message}")
        self.index = index


def member_configs(base: TrainConfig, n_members: int = DEFAULT_MEMBERS) -> List[TrainConfig]:
    """
    Deterministic member table: seed base+i, learning rate scaled by
    0.8 / 1.0 / 1.25 cycling, hidden size offset by 0 / +8 / 0 / -8 cycling.
    """
    if n_members < 1:
        raise ValueError("n_members must be >= 1")
    configs = []
    for i in range(n_members):
        configs.append(
            replace(
                base,
                seed=base.seed + i,
                learning_rate=base.learning_rate * LR_FACTORS[i % len(LR_FACTORS)],
                hidden_dim=max(1, base.hidden_dim + HIDDEN_OFFSETS[i % len(HIDDEN_OFFSETS)]),
            )
        )
    return configs


class MemberSpec:
    """One trained member: its config and where its checkpoint lives."""

    def __init__(
        self,
        index: int,
        config: TrainConfig,
        checkpoint: str,
        history: Optional[str] = None,
        best_epoch: int = -1,
        best_val_loss: float = float("nan"),
        stopped_early: bool = False,
    ):
        self.index = index
        self.config = config
        self.checkpoint = checkpoint  # relative to the ensemble directory
        self.history = history
        self.best_epoch = best_epoch
        self.best_val_loss = best_val_loss
        self.stopped_early = stopped_early

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "config": self.config.to_dict(),
            "checkpoint": self.checkpoint,
            "history": self.history,
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
            "stopped_early": self.stopped_early,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MemberSpec":
        return cls(
            index=data["index"],
            config=TrainConfig(**data["config"]),
            checkpoint=data["checkpoint"],
            history=data.get("history"),
            best_epoch=data.get("best_epoch", -1),
            best_val_loss=data.get("best_val_loss", float("nan")),
            stopped_early=data.get("stopped_early", False),
        )


@dataclass
class EnsembleSpec:
    members: List[MemberSpec]
    l_enc: int
    l_pred: int
    manifest_id: Optional[str] = None
    created_at: str = field(default_factory=lambda: datetime.now().isoformat())
    interval_scale: Optional[List[float]] = None

    def __post_init__(self):
        seeds = [m.config.seed for m in self.members]
        if len(set(seeds)) != len(seeds):
            raise ValueError("Ensemble member seeds must be pairwise distinct")

    def __len__(self) -> int:
        return len(self.members)

    def save(self, directory: str) -> str:
        """Write the member registry as ``ensemble.json`` in ``directory``."""
        data = {
            "version": REGISTRY_VERSION,
            "l_enc": self.l_enc,
            "l_pred": self.l_pred,
            "manifest_id": self.manifest_id,
            "created_at": self.created_at,
            "members": [m.to_dict() for m in self.members],
            "interval_scale": self.interval_scale,
        }
        os.makedirs(directory, exist_ok=True)
        path = os.path.join(directory, REGISTRY_FILE)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(data, f, indent=2, sort_keys=True)
        return path

    @classmethod
    def load(cls, directory: str) -> "EnsembleSpec":
        path = os.path.join(directory, REGISTRY_FILE)
        if not os.path.exists(path):
            raise FileNotFoundError(f"No ensemble registry in {directory}")
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
        if data.get("version") != REGISTRY_VERSION:
            raise ValueError(f"{path}: unsupported registry version {data.get('version')}")
        return cls(
            members=[MemberSpec.from_dict(m) for m in data["members"]],
            l_enc=data["l_enc"],
            l_pred=data["l_pred"],
            manifest_id=data.get("manifest_id"),
            created_at=data.get("created_at", ""),
            interval_scale=data.get("interval_scale"),
        )


def _train_member(
    config: TrainConfig, train: WindowSet, validation: WindowSet, n_countries: int
) -> TrainResult:
    return train_model(config, train, validation, n_countries)


def train_ensemble(
    base: TrainConfig,
    train: WindowSet,
    validation: WindowSet,
    scaler: GlobalScaler,
    country_codes: Sequence[str],
    out_dir: str,
    n_members: int = DEFAULT_MEMBERS,
    jobs: int = 1,
    manifest_id: Optional[str] = None,
    progress_callback: Optional[Callable[[int, int], None]] = None,
) -> EnsembleSpec:
    """
    Train every member independently and register them in ``out_dir``.

    Members never share state, so ``jobs > 1`` (one process per member)
    yields the same checkpoints as the sequential run.

    Raises:
        EnsembleMemberError: The first failing member, by index.
    """
    configs = member_configs(base, n_members)
    n_countries = len(country_codes)
    results: Dict[int, TrainResult] = {}

    if jobs > 1 and n_members > 1:
        logger.info("Training %d members on %d processes", n_members, jobs)
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [
                pool.submit(_train_member, c, train, validation, n_countries) for c in configs
            ]
            for i, future in enumerate(futures):
                try:
                    results[i] = future.result()
                except Exception as e:
                    raise EnsembleMemberError(i, str(e)) from e
                if progress_callback:
                    progress_callback(i + 1, n_members)
    else:
        for i, config in enumerate(configs):
            logger.info(
                "Member %d/%d: seed=%d lr=%.2e hidden=%d",
                i + 1,
                n_members,
                config.seed,
                config.learning_rate,
                config.hidden_dim,
            )
            try:
                results[i] = _train_member(config, train, validation, n_countries)
            except Exception as e:
                raise EnsembleMemberError(i, str(e)) from e
            if progress_callback:
                progress_callback(i + 1, n_members)

    members = []
    for i, config in enumerate(configs):
        result = results[i]
        ckpt_name = f"member_{i:02d}.ckpt"
        history_name = f"history_{i:02d}.csv"
        save_checkpoint(
            os.path.join(out_dir, ckpt_name),
            Checkpoint(
                params=result.params,
                config=result.model_config,
                scaler=scaler,
                country_codes=list(country_codes),
                extra={"member": i, "train_config": config.to_dict(), "manifest": manifest_id},
            ),
        )
        result.history.write(os.path.join(out_dir, history_name), manifest_id)
        members.append(
            MemberSpec(
                index=i,
                config=config,
                checkpoint=ckpt_name,
                history=history_name,
                best_epoch=result.best_epoch,
                best_val_loss=result.best_val_loss,
                stopped_early=result.stopped_early,
            )
        )

    l_pred = train.targets.shape[1]
    if len(validation):
        grids = [
            predict(results[i].params, validation.encoder, validation.country_ids, l_pred)
            for i in range(n_members)
        ]
        interval_scale = fit_interval_scale(combine_member_grids(grids), validation.targets)
        logger.info(
            "Interval scale by step: %s", " ".join(f"{s:.3f}" for s in interval_scale)
        )
    else:
        logger.warning("No validation windows; prediction intervals left uncalibrated")
        interval_scale = None

    spec = EnsembleSpec(
        members=members,
        l_enc=train.encoder.shape[1],
        l_pred=l_pred,
        manifest_id=manifest_id,
        interval_scale=interval_scale,
    )
    spec.save(out_dir)
    return spec


@dataclass
class LoadedEnsemble:
    spec: EnsembleSpec
    checkpoints: List[Checkpoint]

    @property
    def scaler(self) -> GlobalScaler:
        return self.checkpoints[0].scaler

    @property
    def country_codes(self) -> List[str]:
        return self.checkpoints[0].country_codes

    @property
    def country_index(self) -> Dict[str, int]:
        return self.checkpoints[0].country_index

    @property
    def l_enc(self) -> int:
        return self.spec.l_enc

    @property
    def l_pred(self) -> int:
        return self.spec.l_pred


def load_ensemble(directory: str) -> LoadedEnsemble:
    """
    Load the registry and every member checkpoint.

    Raises:
        EnsembleMemberError: A member checkpoint is missing, unreadable, or
            disagrees with the others on scaler or country table.
    """
    spec = EnsembleSpec.load(directory)
    if not spec.members:
        raise ValueError(f"Ensemble in {directory} has no members")
    checkpoints = []
    for member in spec.members:
        path = os.path.join(directory, member.checkpoint)
        try:
            checkpoints.append(load_checkpoint(path))
        except (OSError, ValueError) as e:
            raise EnsembleMemberError(member.index, str(e)) from e
    first = checkpoints[0]
    for member, ckpt in zip(spec.members, checkpoints):
        if ckpt.country_codes != first.country_codes or ckpt.scaler != first.scaler:
            raise EnsembleMemberError(member.index, "scaler or country table differs from member 0")
    return LoadedEnsemble(spec=spec, checkpoints=checkpoints)


def combine_member_grids(grids: Sequence[np.ndarray]) -> np.ndarray:
    """Cellwise median across members, then quantile rearrangement."""
    if not grids:
        raise ValueError("No member grids to combine")
    return rearrange_quantiles(np.median(np.stack(grids), axis=0))


def outer_interval(
    quantiles: Sequence[float] = QUANTILES, coverage: float = INTERVAL_COVERAGE
) -> Tuple[int, int]:
    """Indices of the quantile pair bounding the central ``coverage`` interval."""
    alpha = (1.0 - coverage) / 2.0
    levels = np.asarray(quantiles)
    lower = np.flatnonzero(np.isclose(levels, alpha))
    upper = np.flatnonzero(np.isclose(levels, 1.0 - alpha))
    if not len(lower) or not len(upper):
        raise ValueError(f"No quantile pair for a {coverage:.0%} interval in {tuple(quantiles)}")
    return int(lower[0]), int(upper[0])


def fit_interval_scale(
    grid: np.ndarray,
    targets: np.ndarray,
    coverage: float = INTERVAL_COVERAGE,
    quantiles: Sequence[float] = QUANTILES,
    median_index: int = MEDIAN_INDEX,
) -> List[float]:
    """
    Per-step factors that stretch a grid about its median until the outer
    interval covers ``coverage`` of held-out targets.

    Each window scores the distance from the median to its target in units
    of the half-width on the target's side. The factor for a step is the
    ceil((n + 1) * coverage)-th smallest score over its n windows, capped at
    the largest score. Factors below 1 narrow an interval that was too wide.

    Args:
        grid: Rearranged forecasts (batch, l_pred, Q) in standardized units.
        targets: Observed values (batch, l_pred) in the same units.

    Returns:
        One factor per step.
    """
    if grid.shape[:2] != targets.shape:
        raise ValueError(f"Grid {grid.shape} does not match targets {targets.shape}")
    if len(targets) == 0:
        raise ValueError("No windows to calibrate on")
    lower, upper = outer_interval(quantiles, coverage)
    median = grid[..., median_index]
    below = np.maximum(median - grid[..., lower], MIN_HALF_WIDTH)
    above = np.maximum(grid[..., upper] - median, MIN_HALF_WIDTH)
    scores = np.where(targets < median, (median - targets) / below, (targets - median) / above)

    n = len(targets)
    rank = min(int(np.ceil((n + 1) * coverage)), n)
    return [float(np.sort(scores[:, k])[rank - 1]) for k in range(targets.shape[1])]


def apply_interval_scale(
    grid: np.ndarray, interval_scale: Sequence[float], median_index: int = MEDIAN_INDEX
) -> np.ndarray:
    """Stretch every quantile about the median; later steps reuse the last factor."""
    steps = np.minimum(np.arange(grid.shape[1]), len(interval_scale) - 1)
    factors = np.asarray(interval_scale, dtype=np.float64)[steps]
    median = grid[..., median_index : median_index + 1]
    return median + factors[None, :, None] * (grid - median)


def ensemble_forecast(
    ensemble: LoadedEnsemble,
    encoder: np.ndarray,
    country_ids: np.ndarray,
    l_pred: Optional[int] = None,
    calibrated: bool = True,
) -> np.ndarray:
    """
    Standardized (batch, l_pred, Q) ensemble grid, rearranged, then stretched
    by the registry's interval scale when it has one.
    """
    l_pred = l_pred or ensemble.l_pred
    grids = [predict(ckpt.params, encoder, country_ids, l_pred) for ckpt in ensemble.checkpoints]
    grid = combine_member_grids(grids)
    if calibrated and ensemble.spec.interval_scale:
        grid = apply_interval_scale(grid, ensemble.spec.interval_scale)
    return grid
