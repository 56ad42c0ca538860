import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .manifest import write_csv
from .model import QUANTILES, ModelConfig, ModelParams, as_tensors, forward, predict
from .nn import autograd as ag
from .nn.gradcheck import GradCheckReport, grad_check
from .nn.optim import AdamState, adam_step, step_lr
from .nn.rng import RngStream
from .transform import WindowSet

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ["epoch", "train_loss", "val_loss", "lr", "tf_prob"]


class TrainingDivergedError(RuntimeError):
    """Raised when a loss becomes non-finite during training."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    hidden_dim: int = 64
    n_layers: int = 2
    batch_size: int = 64
    weight_decay: float = 1e-5
    max_epochs: int = 100
    patience: int = 8
    lr_step_size: int = 10
    lr_gamma: float = 0.5
    tf_decay_epochs: int = 20
    d_emb: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.hidden_dim < 1 or self.n_layers < 1:
            raise ValueError("hidden_dim and n_layers must be >= 1")

    @classmethod
    def from_settings(cls, settings: Mapping) -> "TrainConfig":
        return cls(
            learning_rate=float(settings["learning_rate"]),
            hidden_dim=int(settings["hidden_dim"]),
            n_layers=int(settings["n_layers"]),
            batch_size=int(settings["batch_size"]),
            weight_decay=float(settings["weight_decay"]),
            max_epochs=int(settings["max_epochs"]),
            patience=int(settings["patience"]),
            lr_step_size=int(settings["lr_step_size"]),
            lr_gamma=float(settings["lr_gamma"]),
            tf_decay_epochs=int(settings["tf_decay_epochs"]),
            d_emb=int(settings["d_emb"]),
            seed=int(settings["seed"]),
        )

    def to_dict(self) -> dict:
        return asdict(self)

    def model_config(self, n_countries: int, l_enc: int, l_pred: int) -> ModelConfig:
        return ModelConfig(
            n_countries=n_countries,
            d_emb=self.d_emb,
            hidden_dim=self.hidden_dim,
            n_layers=self.n_layers,
            l_enc=l_enc,
            l_pred=l_pred,
        )


def pinball(y, y_hat, tau: float):
    """Quantile loss max(tau (y - y_hat), (tau - 1)(y - y_hat)), elementwise."""
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must be in (0, 1)")
    diff = np.asarray(y, dtype=np.float64) - np.asarray(y_hat, dtype=np.float64)
    return np.maximum(tau * diff, (tau - 1.0) * diff)


def total_loss(
    targets: np.ndarray, grid: np.ndarray, levels: Sequence[float] = QUANTILES
) -> float:
    """
    Multi-quantile loss: per window, the pinball loss summed over steps and
    levels; averaged over windows.

    Args:
        targets: (windows, l_pred) or (l_pred,) observed values.
        grid: (windows, l_pred, Q) or (l_pred, Q) predicted quantiles.
    """
    targets = np.asarray(targets, dtype=np.float64)
    grid = np.asarray(grid, dtype=np.float64)
    if targets.ndim == 1:
        targets, grid = targets[None, :], grid[None, :, :]
    if grid.shape != targets.shape + (len(levels),):
        raise ValueError(f"grid shape {grid.shape} does not match targets {targets.shape}")
    if len(targets) == 0:
        return float("nan")
    tau = np.asarray(levels).reshape(1, 1, -1)
    diff = targets[:, :, None] - grid
    per_window = np.maximum(tau * diff, (tau - 1.0) * diff).sum(axis=(1, 2))
    return float(per_window.mean())


def teacher_forcing_prob(epoch: int, decay_epochs: int) -> float:
    """Linear decay from 1 at epoch 0 to 0 at ``decay_epochs``."""
    if decay_epochs <= 0:
        return 0.0
    return max(0.0, 1.0 - epoch / decay_epochs)


def loss_and_grads(
    named: Mapping[str, np.ndarray],
    encoder_input: np.ndarray,
    country_ids: np.ndarray,
    targets: np.ndarray,
    tf_prob: float = 0.0,
    rng: Optional[RngStream] = None,
    levels: Sequence[float] = QUANTILES,
) -> Tuple[float, Dict[str, np.ndarray]]:
    """
    Batch loss (mean over windows of the summed pinball loss) and its
    gradient with respect to every named parameter.
    """
    tensors = as_tensors(named, requires_grad=True)
    l_pred = targets.shape[1]
    outputs = forward(tensors, encoder_input, country_ids, l_pred, targets, tf_prob, rng)
    levels = np.asarray(levels)
    step_losses = [ag.pinball_sum(out, targets[:, k], levels) for k, out in enumerate(outputs)]
    loss = step_losses[0]
    for step_loss in step_losses[1:]:
        loss = ag.add(loss, step_loss)
    loss = ag.scale(loss, 1.0 / len(country_ids))
    loss.backward()
    grads = {
        name: t.grad if t.grad is not None else np.zeros_like(t.value)
        for name, t in tensors.items()
    }
    return float(loss.value), grads


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    tf_prob: float


@dataclass
class TrainHistory:
    records: List[EpochRecord] = field(default_factory=list)

    def append(self, record: EpochRecord):
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(r) for r in self.records], columns=HISTORY_COLUMNS)

    def write(self, path: str, manifest_id: Optional[str] = None):
        write_csv(self.to_frame(), path, manifest_id)


@dataclass
class TrainResult:
    params: ModelParams
    model_config: ModelConfig
    history: TrainHistory
    best_epoch: int
    best_val_loss: float
    stopped_early: bool


def train_model(
    config: TrainConfig,
    train: WindowSet,
    validation: WindowSet,
    n_countries: int,
    progress_callback: Optional[Callable[[EpochRecord], None]] = None,
) -> TrainResult:
    """
    Fit one encoder-decoder with the multi-quantile loss.

    Each epoch shuffles the training windows (seeded), takes Adam steps on
    minibatches with the step learning rate and the teacher-forcing schedule,
    then scores the validation windows in inference mode. The parameters of
    the best validation epoch are kept; training stops after ``patience``
    consecutive epochs without improvement.

    Raises:
        ValueError: If the training set is empty.
        TrainingDivergedError: If a batch or validation loss is not finite.
    """
    if len(train) == 0:
        raise ValueError("Training set is empty")
    l_enc, l_pred = train.encoder.shape[1], train.targets.shape[1]
    model_config = config.model_config(n_countries, l_enc, l_pred)

    root = RngStream(config.seed)
    shuffle_rng = root.split("shuffle")
    tf_rng = root.split("teacher-forcing")
    params = ModelParams.initialize(model_config, root.split("init"))
    named = params.named_arrays()
    state = AdamState(lr=config.learning_rate, weight_decay=config.weight_decay)

    if len(validation) == 0:
        logger.warning("No validation windows; early stopping follows the training loss")

    history = TrainHistory()
    best_loss = math.inf
    best_named = {k: v.copy() for k, v in named.items()}
    best_epoch = -1
    since_best = 0
    stopped_early = False
    n = len(train)

    for epoch in range(config.max_epochs):
        state.lr = step_lr(epoch, config.learning_rate, config.lr_step_size, config.lr_gamma)
        tf_prob = teacher_forcing_prob(epoch, config.tf_decay_epochs)
        order = shuffle_rng.permutation(n)

        loss_sum = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            loss, grads = loss_and_grads(
                named,
                train.encoder[idx],
                train.country_ids[idx],
                train.targets[idx],
                tf_prob,
                tf_rng,
            )
            if not math.isfinite(loss):
                raise TrainingDivergedError(
                    f"Non-finite training loss at epoch {epoch}, batch {start // config.batch_size} "
                    f"(lr={state.lr:g}, seed={config.seed})"
                )
            named = adam_step(named, grads, state)
            loss_sum += loss * len(idx)
        train_loss = loss_sum / n

        if len(validation):
            grid = predict(ModelParams.from_named(named), validation.encoder, validation.country_ids, l_pred)
            val_loss = total_loss(validation.targets, grid)
        else:
            val_loss = train_loss
        if not math.isfinite(val_loss):
            raise TrainingDivergedError(f"Non-finite validation loss at epoch {epoch}")

        record = EpochRecord(epoch, train_loss, val_loss, state.lr, tf_prob)
        history.append(record)
        if progress_callback:
            progress_callback(record)
        logger.debug(
            "epoch %d train %.5f val %.5f lr %.2e tf %.2f",
            epoch,
            train_loss,
            val_loss,
            state.lr,
            tf_prob,
        )

        if val_loss < best_loss:
            best_loss = val_loss
            best_named = {k: v.copy() for k, v in named.items()}
            best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                stopped_early = True
                logger.info(
                    "Early stop at epoch %d (best epoch %d, val %.5f)", epoch, best_epoch, best_loss
                )
                break

    return TrainResult(
        params=ModelParams.from_named(best_named),
        model_config=model_config,
        history=history,
        best_epoch=best_epoch,
        best_val_loss=best_loss,
        stopped_early=stopped_early,
    )


@dataclass(frozen=True)
class SearchSpace:
    lr_range: Tuple[float, float] = (1e-4, 1e-2)
    hidden_choices: Tuple[int, ...] = (32, 64, 128)
    layer_choices: Tuple[int, ...] = (1, 2, 3)
    batch_choices: Tuple[int, ...] = (32, 64, 128)

    def sample(self, base: TrainConfig, rng: RngStream) -> TrainConfig:
        """Log-uniform learning rate, uniform choices for the rest."""
        log_lo, log_hi = math.log10(self.lr_range[0]), math.log10(self.lr_range[1])
        return replace(
            base,
            learning_rate=10 ** float(rng.uniform(log_lo, log_hi)),
            hidden_dim=int(rng.choice(self.hidden_choices)),
            n_layers=int(rng.choice(self.layer_choices)),
            batch_size=int(rng.choice(self.batch_choices)),
        )


@dataclass
class SearchResult:
    best: TrainConfig
    best_index: int
    trials: List[Tuple[TrainConfig, float]]


def random_search(
    base: TrainConfig,
    objective: Callable[[TrainConfig], float],
    budget: int,
    seed: int,
    space: SearchSpace = SearchSpace(),
) -> SearchResult:
    """
    Seeded random search over the tuning space.

    Args:
        base: Config supplying every field the space does not sample.
        objective: Validation loss of a config (lower is better).
        budget: Number of trials (>= 1).
        seed: Seed of the sampling stream.

    Returns:
        The first config reaching the minimum objective, with all trials.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    rng = RngStream(seed).split("search")
    trials = []
    best_index, best_score = 0, math.inf
    for i in range(budget):
        candidate = space.sample(base, rng)
        score = float(objective(candidate))
        trials.append((candidate, score))
        logger.info(
            "trial %d: lr=%.2e hidden=%d layers=%d batch=%d -> %.5f",
            i,
            candidate.learning_rate,
            candidate.hidden_dim,
            candidate.n_layers,
            candidate.batch_size,
            score,
        )
        if score < best_score:
            best_index, best_score = i, score
    return SearchResult(best=trials[best_index][0], best_index=best_index, trials=trials)


def validation_objective(
    train: WindowSet, validation: WindowSet, n_countries: int
) -> Callable[[TrainConfig], float]:
    """Objective for random_search: best validation loss of a full training run."""

    def objective(config: TrainConfig) -> float:
        return train_model(config, train, validation, n_countries).best_val_loss

    return objective


@dataclass(frozen=True)
class TinyProblem:
    """Smallest end-to-end configuration used for gradient verification."""

    hidden_dim: int = 8
    n_layers: int = 2
    l_enc: int = 6
    l_pred: int = 3
    d_emb: int = 2
    n_countries: int = 3
    batch: int = 4


def gradcheck_tiny(
    seed: int = 0,
    problem: TinyProblem = TinyProblem(),
    tolerance: float = 1e-4,
    n_coords: int = 200,
) -> GradCheckReport:
    """
    Check the analytic gradient of the batch loss through encode and decode
    against central differences on a random tiny problem (inference-mode
    feedback, so the loss is a deterministic function of the parameters).
    """
    root = RngStream(seed).split("gradcheck")
    config = ModelConfig(
        n_countries=problem.n_countries,
        d_emb=problem.d_emb,
        hidden_dim=problem.hidden_dim,
        n_layers=problem.n_layers,
        l_enc=problem.l_enc,
        l_pred=problem.l_pred,
    )
    params = ModelParams.initialize(config, root.split("init"))
    data_rng = root.split("data")
    encoder = data_rng.normal(0.0, 1.0, (problem.batch, problem.l_enc, config.n_features))
    targets = data_rng.normal(0.0, 1.0, (problem.batch, problem.l_pred))
    ids = data_rng.integers(0, problem.n_countries, problem.batch)

    def closure(named):
        return loss_and_grads(named, encoder, ids, targets)

    return grad_check(
        closure,
        params.named_arrays(),
        tolerance=tolerance,
        n_coords=n_coords,
        rng=root.split("coords"),
    )
