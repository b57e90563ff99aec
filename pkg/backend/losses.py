"""
backend/losses.py
Dice-based task losses and the min-max task weighting.

E1 = 1 - D(g, f_r) scores the region map, E2 = 1 - D(|grad g|, f_e) the edge
map. They are combined as

    E(lambda) = lambda * E1 + sqrt(1 - lambda**2) * E2

which is concave in lambda. Training alternates: lambda is set to the
maximiser lambda* = E1 / sqrt(E1**2 + E2**2) and held constant while the
network parameters take a step that minimises E.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple, Union

import numpy as np

from backend.errors import DimensionError
from backend.tensorgrid import TensorGrid, add, as_grid, divide, mul, scale, shift, total

logger = logging.getLogger(__name__)

LAMBDA_MIN = 1e-4
LAMBDA_MAX = 1.0 - 1e-4
LAMBDA_EQUAL = 1.0 / math.sqrt(2.0)

# Dice regularisers: tight for exact checks, loose for stable training
ORACLE_EPSILON = 1e-6
TRAINING_EPSILON = 1.0

Scalar = Union[float, TensorGrid]


def _as_target(value, like: TensorGrid) -> TensorGrid:
    """Plain arrays with the right number of elements take ``like``'s shape."""
    if isinstance(value, TensorGrid):
        return value
    arr = np.asarray(value)
    if arr.shape != like.shape and arr.size == int(np.prod(like.shape)):
        arr = arr.reshape(like.shape)
    return TensorGrid(arr.astype(like.dtype, copy=False))


def dice(y, yhat, epsilon: float = ORACLE_EPSILON) -> TensorGrid:
    """Regularised Dice coefficient (2*sum(y*yhat) + eps) / (sum(y) + sum(yhat) + eps).

    Args:
        y: target map, values in [0, 1]
        yhat: predicted map of the same shape, values in [0, 1]
        epsilon: regulariser; with epsilon = 0 two empty maps still score 1

    Raises:
        DimensionError: shapes differ
        ValueError: either map holds negative values
    """
    yhat = as_grid(yhat)
    y = _as_target(y, yhat)
    if y.shape != yhat.shape:
        raise DimensionError(f"dice: shape mismatch {y.shape} vs {yhat.shape}")
    if np.any(y.values < 0) or np.any(yhat.values < 0):
        raise ValueError("dice: maps must be non-negative")
    if epsilon < 0:
        raise ValueError(f"dice: epsilon must be >= 0, got {epsilon}")

    overlap = total(mul(y, yhat))
    mass = add(total(y), total(yhat))
    if epsilon == 0 and mass.values == 0:
        return TensorGrid(np.ones((), dtype=yhat.dtype))
    return divide(shift(scale(overlap, 2.0), epsilon), shift(mass, epsilon))


def _one_minus(d: TensorGrid) -> TensorGrid:
    return shift(scale(d, -1.0), 1.0)


def task_losses(f_r, f_e, g, edge_gt, epsilon: float = ORACLE_EPSILON) -> Tuple[TensorGrid, TensorGrid]:
    """(E1, E2) for one sample; both stay differentiable on the maps' tape."""
    e1 = _one_minus(dice(g, f_r, epsilon))
    e2 = _one_minus(dice(edge_gt, f_e, epsilon))
    return e1, e2


def _value(x: Scalar) -> float:
    return float(x.values) if isinstance(x, TensorGrid) else float(x)


def weighted_energy(e1: Scalar, e2: Scalar, alpha: float, beta: float) -> Scalar:
    """alpha * E1 + beta * E2 with alpha, beta treated as constants."""
    if isinstance(e1, TensorGrid) or isinstance(e2, TensorGrid):
        return add(scale(as_grid(e1), alpha), scale(as_grid(e2), beta))
    return alpha * float(e1) + beta * float(e2)


def combined_energy(e1: Scalar, e2: Scalar, lam: float) -> Scalar:
    """lambda * E1 + sqrt(1 - lambda**2) * E2 for lambda in (0, 1)."""
    if not 0.0 < lam < 1.0:
        raise ValueError(f"lambda must lie in (0, 1), got {lam}")
    if _value(e1) < 0 or _value(e2) < 0:
        raise ValueError("task losses must be non-negative")
    return weighted_energy(e1, e2, lam, math.sqrt(1.0 - lam * lam))


def clamp_lambda(lam: float) -> float:
    return min(max(lam, LAMBDA_MIN), LAMBDA_MAX)


def lambda_star(e1: float, e2: float, previous: Optional[float] = None) -> float:
    """Weight that maximises the combined energy for fixed losses, clamped.

    When both losses vanish the energy is flat in lambda; the previous value
    is kept (equal weighting if there is none).
    """
    e1, e2 = float(e1), float(e2)
    if e1 < 0 or e2 < 0:
        raise ValueError(f"task losses must be non-negative, got {e1}, {e2}")
    norm = math.hypot(e1, e2)
    if norm == 0.0:
        return clamp_lambda(LAMBDA_EQUAL if previous is None else previous)
    return clamp_lambda(e1 / norm)


# ============================================================================
# TASK WEIGHTS
# ============================================================================

@dataclass
class TaskWeights:
    """Current lambda, its derived alpha/beta, and every recorded update."""
    lam: float = LAMBDA_EQUAL
    history: List[Tuple[int, float, float, float]] = field(default_factory=list)

    def __post_init__(self):
        self.lam = clamp_lambda(self.lam)

    @property
    def alpha(self) -> float:
        return self.lam

    @property
    def beta(self) -> float:
        return math.sqrt(1.0 - self.lam * self.lam)

    def update(self, step: int, e1: float, e2: float, ema: float = 0.0, frozen: bool = False) -> float:
        """Move lambda towards lambda*(E1, E2) and record the step.

        ``ema`` weights the previous lambda; 0 jumps straight to lambda*.
        A frozen weight is recorded but not moved.
        """
        if not frozen:
            target = lambda_star(e1, e2, previous=self.lam)
            self.lam = clamp_lambda(ema * self.lam + (1.0 - ema) * target)
        self.history.append((step, self.lam, float(e1), float(e2)))
        return self.lam

    def state_dict(self) -> dict:
        return {"lambda": self.lam, "history": [list(h) for h in self.history]}

    @classmethod
    def from_state_dict(cls, state: dict) -> "TaskWeights":
        history = [(int(s), float(l), float(a), float(b)) for s, l, a, b in state.get("history", [])]
        return cls(lam=float(state["lambda"]), history=history)
