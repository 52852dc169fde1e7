"""Node-side update perturbation: clipping, calibrated Gaussian noise, accounting.

The mechanism is applied by each node to its own clipped update delta
immediately before upload, so the aggregator only ever sees perturbed
values. Noise standard deviation per coordinate is sigma * clip_norm,
where sigma is calibrated from (epsilon, delta) at unit sensitivity;
clipping makes the clip norm the actual L2 sensitivity of the release.

The accountant is a basic linear-composition tracker, deliberately
conservative; it only affects reporting, never the noise draws.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .params import ParamVector

__all__ = [
    "PrivacyParams",
    "AccountantState",
    "sigma_for",
    "clip",
    "perturb",
    "account",
]

# relative slack when asserting that perturb() received a clipped input
_CLIP_TOLERANCE = 1e-9


def sigma_for(epsilon: float, delta: float, sensitivity: float) -> float:
    """Gaussian-mechanism noise scale for an L2 sensitivity.

    sigma = (sensitivity / epsilon) * sqrt(2 * ln(1.25 / delta)); plugging
    the result back into the budget formula recovers epsilon exactly.
    Linear in sensitivity, so sigma_for(e, d, 1) is the per-unit scale.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    if sensitivity <= 0:
        raise ValueError("sensitivity must be positive")
    return (sensitivity / epsilon) * math.sqrt(2.0 * math.log(1.25 / delta))


@dataclass(frozen=True)
class PrivacyParams:
    """Perturbation parameters for one node's uploads.

    sigma is the noise multiplier at unit sensitivity; the per-coordinate
    noise std applied to a clipped delta is sigma * clip_norm. When sigma
    is not given it is derived from (epsilon, delta).
    """

    epsilon: float = 8.0
    delta: float = 1e-3
    clip_norm: float = 1.0
    sigma: Optional[float] = None

    def __post_init__(self):
        if self.epsilon <= 0 or not 0 < self.delta < 1 or self.clip_norm <= 0:
            raise ValueError("require epsilon > 0, delta in (0,1), clip_norm > 0")
        if self.sigma is None:
            object.__setattr__(self, "sigma", sigma_for(self.epsilon, self.delta, 1.0))
        elif self.sigma < 0:
            raise ValueError("sigma must be >= 0")

    @property
    def noise_std(self) -> float:
        """Per-coordinate standard deviation added to a clipped delta."""
        return self.sigma * self.clip_norm


def clip(g: ParamVector, clip_norm: float) -> ParamVector:
    """Rescale g by max(1, ||g|| / clip_norm) so its norm never exceeds the cap.

    Direction is preserved; vectors already inside the ball (including the
    zero vector) pass through unchanged.
    """
    if clip_norm <= 0:
        raise ValueError("clip_norm must be positive")
    scale = max(1.0, g.norm() / clip_norm)
    if scale == 1.0:
        return g.copy()
    return g.with_values(g.values / scale)


def perturb(g: ParamVector, params: PrivacyParams, rng: np.random.Generator) -> ParamVector:
    """Add iid Gaussian noise of std sigma * clip_norm to a clipped delta.

    The input must already be clipped (callers run clip() first); inputs
    whose norm exceeds the cap beyond tolerance are rejected because the
    privacy guarantee would silently not hold for them.
    """
    norm = g.norm()
    bound = params.clip_norm * (1.0 + _CLIP_TOLERANCE) + 1e-12
    if norm > bound:
        raise ValueError(
            f"perturb() input norm {norm:.6g} exceeds clip_norm {params.clip_norm:.6g}; "
            "clip before perturbing"
        )
    if params.noise_std == 0.0:
        return g.copy()
    noise = rng.normal(0.0, params.noise_std, size=g.values.shape)
    return g.with_values(g.values + noise)


@dataclass(frozen=True)
class AccountantState:
    """Running privacy spend under basic sequential composition.

    delta_ceiling is the deployment's tolerable total failure probability
    (1/K for K nodes); crossing it sets the warning flag. Totals are
    monotone in the number of composed rounds.
    """

    rounds_composed: int = 0
    epsilon_total: float = 0.0
    delta_total: float = 0.0
    delta_ceiling: Optional[float] = None
    budget_warning: bool = False


def account(state: AccountantState, params: PrivacyParams, rounds: int) -> AccountantState:
    """Compose `rounds` further releases at (params.epsilon, params.delta)."""
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    eps_total = state.epsilon_total + rounds * params.epsilon
    delta_total = state.delta_total + rounds * params.delta
    warn = state.budget_warning or (
        state.delta_ceiling is not None and delta_total >= state.delta_ceiling
    )
    return replace(
        state,
        rounds_composed=state.rounds_composed + rounds,
        epsilon_total=eps_total,
        delta_total=delta_total,
        budget_warning=warn,
    )
