"""Finite-difference verification of analytic gradients."""

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Tuple

import numpy as np

from .rng import RngStream

# Closure: params -> (loss, analytic grads by name)
LossClosure = Callable[[Dict[str, np.ndarray]], Tuple[float, Dict[str, np.ndarray]]]


@dataclass
class GradCheckReport:
    checked: int
    max_rel_error: float
    tolerance: float
    failures: List[Tuple[str, Tuple[int, ...], float, float]] = field(
        default_factory=list
    )

    @property
    def passed(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        status = "ok" if self.passed else f"{len(self.failures)} coordinates failed"
        return (
            f"gradcheck: {self.checked} coordinates, "
            f"max rel error {self.max_rel_error:.3e} (tol {self.tolerance:.0e}): {status}"
        )


def grad_check(
    closure: LossClosure,
    params: Dict[str, np.ndarray],
    tolerance: float = 1e-4,
    n_coords: int = 200,
    step: float = 1e-5,
    rng: RngStream = None,
) -> GradCheckReport:
    """
    Compare analytic gradients with central differences on sampled coordinates.

    The error for a coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    Coordinates are spread across parameters in proportion to their size, with
    at least one per parameter; parameters smaller than their share are checked
    exhaustively.

    Args:
        closure: Deterministic function returning the loss and its gradients.
        params: Point at which to check; not modified.
        tolerance: Maximum allowed error per coordinate.
        n_coords: Approximate number of coordinates to sample.
        step: Central-difference step.
        rng: Stream for coordinate sampling (seed 0 when omitted).

    Returns:
        Report listing every coordinate above tolerance.
    """
    rng = rng or RngStream(0)
    base = {name: np.array(value, dtype=np.float64) for name, value in params.items()}
    _, analytic = closure(base)

    total_size = sum(v.size for v in base.values())
    coords: List[Tuple[str, int]] = []
    for name, value in base.items():
        share = max(1, int(round(n_coords * value.size / total_size)))
        if share >= value.size:
            picks = np.arange(value.size)
        else:
            picks = np.sort(rng.permutation(value.size)[:share])
        coords.extend((name, int(flat)) for flat in picks)

    max_err = 0.0
    failures = []
    for name, flat in coords:
        index = np.unravel_index(flat, base[name].shape)
        original = base[name][index]
        base[name][index] = original + step
        loss_plus, _ = closure(base)
        base[name][index] = original - step
        loss_minus, _ = closure(base)
        base[name][index] = original

        numeric = (loss_plus - loss_minus) / (2.0 * step)
        exact = float(analytic[name][index])
        err = abs(exact - numeric) / max(1.0, abs(exact))
        max_err = max(max_err, err)
        if err >= tolerance:
            failures.append((name, tuple(int(i) for i in index), exact, numeric))

    return GradCheckReport(
        checked=len(coords), max_rel_error=max_err, tolerance=tolerance, failures=failures
    )
