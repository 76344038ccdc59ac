"""Self-paced curriculum: regularizer, closed-form signal weights, threshold schedule."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np


@dataclass(frozen=True)
class CurriculumState:
    lambda1: float = 0.2
    lambda2: float = 1.0
    xi: float = 1.1
    step: int = 0

    def __post_init__(self) -> None:
        if not self.lambda1 > 0:
            raise ValueError(f"lambda1 must be > 0, got {self.lambda1}")
        if not self.lambda2 >= 0:
            raise ValueError(f"lambda2 must be >= 0, got {self.lambda2}")
        if not self.xi > 1:
            raise ValueError(f"xi must be > 1, got {self.xi}")
        if self.step < 0:
            raise ValueError("step must be >= 0")


def regularizer(w: float, lambda1: float, lambda2: float) -> float:
    """``G(w) = lambda2 * w^2 / 2 - (lambda1 + lambda2) * w`` on ``w`` in [0, 1]."""
    if not 0.0 <= w <= 1.0:
        raise ValueError(f"weight must lie in [0, 1], got {w}")
    return 0.5 * lambda2 * w * w - (lambda1 + lambda2) * w


def closed_form_weight(loss, lambda1: float, lambda2: float):
    """Minimizer over w in [0, 1] of ``w * loss + G(w)``. Vectorizes over ``loss``."""
    loss = np.asarray(loss, dtype=np.float64)
    if lambda2 == 0:
        w = (loss <= lambda1).astype(np.float64)
    else:
        # explicit branches keep the thresholds exact under rounding
        with np.errstate(over="ignore"):
            ramp = np.clip(1.0 - (loss - lambda1) / lambda2, 0.0, 1.0)
        w = np.where(loss <= lambda1, 1.0, np.where(loss >= lambda1 + lambda2, 0.0, ramp))
    return float(w) if w.ndim == 0 else w


def oracle_weight(loss: float, lambda1: float, lambda2: float, grid_step: float = 1e-4) -> float:
    """Brute-force grid argmin of ``w * loss + G(w)``; independent check of the closed form."""
    if grid_step <= 0:
        raise ValueError(f"grid_step must be > 0, got {grid_step}")
    count = int(np.floor(1.0 / grid_step + 1e-9))
    grid = np.append(np.arange(count + 1) * grid_step, 1.0)
    grid = np.unique(np.clip(grid, 0.0, 1.0))
    objective = grid * loss + 0.5 * lambda2 * grid ** 2 - (lambda1 + lambda2) * grid
    return float(grid[int(np.argmin(objective))])


def weight_batch(losses, state: CurriculumState) -> np.ndarray:
    losses = np.asarray(losses, dtype=np.float64)
    bad = np.flatnonzero(~np.isfinite(losses))
    if bad.size:
        raise ValueError(f"non-finite losses at signal ids {bad.tolist()}")
    return np.atleast_1d(closed_form_weight(losses, state.lambda1, state.lambda2))


def schedule_step(state: CurriculumState) -> CurriculumState:
    return replace(state, lambda1=state.lambda1 * state.xi, lambda2=state.lambda2 * state.xi,
                   step=state.step + 1)
