"""Adversary simulation: label-flipping poisoning and gradient inversion.

Label flipping is the data-poisoning attack run by malicious nodes; it is
applied once to a node's local shard before training starts.

Gradient inversion plays the untrusted-aggregator role: given the gradient
of a single example under a linear softmax model, the input is recovered
in closed form because each weight-gradient row is the input scaled by the
matching bias-gradient entry. An iterative gradient-matching path is also
provided. The reconstruction error against the true input is computed by
the measurement harness (which knows the ground truth); the attack itself
never sees it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .learner import LINEAR, Dataset, ModelSpec, logits, softmax
from .params import ParamVector

__all__ = [
    "LeakageConfig",
    "AttackConfig",
    "ReconstructionResult",
    "flip_labels",
    "invert_gradient",
    "attack_success_rate",
]

# bias-gradient entries below this magnitude cannot anchor a ratio recovery
_BIAS_FLOOR = 1e-12


@dataclass(frozen=True)
class LeakageConfig:
    """Knobs for the reconstruction attack."""

    match_iters: int = 200
    step_size: float = 1.0
    success_mse: float = 1e-2  # on [0,1]-normalized inputs
    method: str = "closed_form"  # or "gradient_match"


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "label_flip"
    flip_from: int = 1
    flip_to: int = 7
    malicious_fraction: float = 0.3
    leakage: LeakageConfig = field(default_factory=LeakageConfig)

    def __post_init__(self):
        if self.kind not in ("label_flip", "gradient_leakage"):
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.flip_from == self.flip_to:
            raise ValueError("flip_from and flip_to must differ")
        if not 0 < self.malicious_fraction < 1:
            raise ValueError("malicious_fraction must lie in (0, 1)")


@dataclass(eq=False)
class ReconstructionResult:
    target_index: int
    reconstructed_input: Optional[np.ndarray]
    mse: float
    success: bool


def flip_labels(data: Dataset, flip_from: int, flip_to: int) -> Dataset:
    """Relabel every `flip_from` example as `flip_to`; inputs are untouched."""
    if flip_from == flip_to:
        raise ValueError("flip_from and flip_to must differ")
    labels = data.labels.copy()
    labels[labels == flip_from] = flip_to
    return Dataset(data.features, labels)


def _closed_form(weight_grad: np.ndarray, bias_grad: np.ndarray) -> Optional[np.ndarray]:
    anchor = int(np.argmax(np.abs(bias_grad)))
    if abs(bias_grad[anchor]) <= _BIAS_FLOOR:
        return None
    return weight_grad[anchor] / bias_grad[anchor]


def _gradient_match(
    weight_grad: np.ndarray,
    bias_grad: np.ndarray,
    model: ParamVector,
    spec: ModelSpec,
    cfg: LeakageConfig,
) -> Optional[np.ndarray]:
    """Backtracking descent on the squared gradient mismatch over a candidate input.

    The label is inferred first: for cross-entropy on one example, only the
    true class has a negative bias-gradient entry. The mismatch surface is
    poorly conditioned near the uniform-probability regime, so each step is
    line-searched instead of using a fixed rate.
    """
    label = int(np.argmin(bias_grad))
    weights = model.segment("linear.weight").reshape(spec.num_classes, spec.input_dim)
    onehot = np.zeros(spec.num_classes)
    onehot[label] = 1.0

    def mismatch_and_grad(x: np.ndarray) -> tuple[float, np.ndarray]:
        probs = softmax(logits(model, spec, x[None, :]))[0]
        residual_vec = probs - onehot
        weight_mismatch = np.outer(residual_vec, x) - weight_grad
        bias_mismatch = residual_vec - bias_grad
        value = float(np.sum(weight_mismatch**2) + np.sum(bias_mismatch**2))
        jac = (np.diag(probs) - np.outer(probs, probs)) @ weights
        descent = 2.0 * weight_mismatch.T @ residual_vec
        descent += 2.0 * jac.T @ (weight_mismatch @ x + bias_mismatch)
        return value, descent

    guess = np.full(spec.input_dim, 0.5)
    step = cfg.step_size
    value, direction = mismatch_and_grad(guess)
    for _ in range(cfg.match_iters):
        grad_sq = float(np.dot(direction, direction))
        if grad_sq <= 1e-28:
            break
        while step > 1e-12:
            candidate = guess - step * direction
            cand_value, cand_direction = mismatch_and_grad(candidate)
            if cand_value <= value - 0.5 * step * grad_sq:
                guess, value, direction = candidate, cand_value, cand_direction
                step *= 2.0
                break
            step *= 0.5
        else:
            break
    return guess


def invert_gradient(
    grad: ParamVector,
    spec: ModelSpec,
    model: ParamVector,
    cfg: LeakageConfig,
    true_input: Optional[np.ndarray] = None,
    target_index: int = 0,
) -> ReconstructionResult:
    """Reconstruct the single training input behind a linear-softmax gradient.

    `true_input` is ground truth held by the measurement harness for
    scoring; when omitted, mse is reported as inf and success as False.
    A gradient whose bias entries are all below the ratio floor yields a
    failed result rather than an error.
    """
    if spec.kind != LINEAR:
        raise ValueError("gradient inversion is implemented for the linear softmax model")
    weight_grad = grad.segment("linear.weight").reshape(spec.num_classes, spec.input_dim)
    bias_grad = grad.segment("linear.bias")
    if cfg.method == "closed_form":
        recovered = _closed_form(weight_grad, bias_grad)
    elif cfg.method == "gradient_match":
        if np.max(np.abs(bias_grad)) <= _BIAS_FLOOR:
            recovered = None
        else:
            recovered = _gradient_match(weight_grad, bias_grad, model, spec, cfg)
    else:
        raise ValueError(f"unknown reconstruction method {cfg.method!r}")
    if recovered is None or not np.all(np.isfinite(recovered)) or true_input is None:
        if recovered is not None and not np.all(np.isfinite(recovered)):
            recovered = None
        return ReconstructionResult(target_index, recovered, math.inf, False)
    mse = float(np.mean((recovered - true_input) ** 2))
    return ReconstructionResult(target_index, recovered, mse, mse <= cfg.success_mse)


def attack_success_rate(results: Sequence[ReconstructionResult]) -> float:
    """Fraction of attacked examples that were successfully reconstructed."""
    if not results:
        raise ValueError("attack_success_rate needs at least one result")
    return sum(1 for r in results if r.success) / len(results)
