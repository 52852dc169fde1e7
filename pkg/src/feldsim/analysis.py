"""Metrics assembly and convergence verification on controlled problems.

MetricsRow is the one record type every experiment emits; the CSV and
JSON-lines serializations are deterministic (fixed field order, shortest
round-trip float formatting) so identical runs produce identical bytes.

Convergence checking runs on strongly convex quadratics, where the mixing
recurrence has a provable per-step contraction: with update weight a on
the incoming model,

    gap(t+1) <= [1 - a + a * (1 - step*mu)^nu_min] * gap(t) + a*(V1+V2)/(2*mu)

This module verifies that recurrence empirically, step by step, against a
run of the quadratic harness. Note the weight convention: `update_weight`
here is the weight on the freshly trained model, i.e. one minus the
simulator's weight on the stale global model; at 0.5 the two coincide.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .streams import stream

__all__ = [
    "MetricsRow",
    "QuadraticProblem",
    "QuadraticRunConfig",
    "QuadraticRun",
    "VarianceEstimate",
    "ConvergenceReport",
    "theorem_bound",
    "estimate_variance_constants",
    "run_quadratic_experiment",
    "check_convergence",
    "emit_metrics",
    "read_metrics_csv",
]


@dataclass(frozen=True)
class MetricsRow:
    """One logged event; optional fields serialize as empty strings."""

    event_index: int
    sim_time: float
    event_kind: str
    node_id: Optional[int]
    global_accuracy: Optional[float]
    global_loss: Optional[float]
    kappa_cumulative: float
    comm_time_cum: float
    comp_time_cum: float
    staleness: Optional[float]
    epsilon_total: float
    delta_total: float
    detection_flags: str
    asr: Optional[float]


_FIELDS = [f.name for f in fields(MetricsRow)]
_INT_FIELDS = {"event_index", "node_id"}
_STR_FIELDS = {"event_kind", "detection_flags"}


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, str):
        return value
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def _parse_cell(name: str, text: str):
    if name in _STR_FIELDS:
        return text
    if text == "":
        return None
    if name in _INT_FIELDS:
        return int(text)
    return float(text)


def emit_metrics(log: Sequence[MetricsRow], path: str | Path, fmt: str = "csv") -> None:
    """Write the log with a stable schema; CSV gets a header row."""
    path = Path(path)
    if fmt == "csv":
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(_FIELDS)
            for row in log:
                writer.writerow([_cell(getattr(row, name)) for name in _FIELDS])
    elif fmt == "json-lines":
        with open(path, "w", encoding="utf-8") as fh:
            for row in log:
                record = {name: getattr(row, name) for name in _FIELDS}
                fh.write(json.dumps(record, sort_keys=True) + "\n")
    else:
        raise ValueError(f"unknown metrics format {fmt!r}")


def read_metrics_csv(path: str | Path) -> list[MetricsRow]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != _FIELDS:
            raise ValueError(f"unexpected metrics header {header}")
        for record in reader:
            values = {name: _parse_cell(name, text) for name, text in zip(_FIELDS, record)}
            rows.append(MetricsRow(**values))
    return rows


def theorem_bound(
    initial_gap: float,
    mu: float,
    step_size: float,
    update_weight: float,
    nu_min: int,
    rounds: int,
    extra_error: float = 0.0,
    smoothness: Optional[float] = None,
) -> float:
    """Loss-gap bound after `rounds` aggregations of at-least-nu_min-epoch updates.

    rho = 1 - a + a*(1 - mu*step) contracts the initial gap as
    rho**(rounds*nu_min); the additional error enters with the
    complementary weight, vanishing as the update weight goes to zero.
    """
    if smoothness is not None and step_size >= 1.0 / smoothness:
        raise ValueError("step_size must be below 1/smoothness")
    if not 0 < mu * step_size < 1:
        raise ValueError("mu * step_size must lie in (0, 1)")
    if not 0 < update_weight <= 1:
        raise ValueError("update_weight must lie in (0, 1]")
    if nu_min < 1 or rounds < 0:
        raise ValueError("nu_min >= 1 and rounds >= 0 required")
    rho = 1.0 - update_weight + update_weight * (1.0 - mu * step_size)
    factor = rho ** (rounds * nu_min)
    return factor * initial_gap + (1.0 - factor) * extra_error


@dataclass(frozen=True)
class QuadraticProblem:
    """Diagonal strongly convex quadratic with spectrum in [mu, lipschitz].

    F(x) = 0.5 * sum_i a_i (x_i - opt_i)^2, so F(optimum) = 0 and the loss
    column of a run doubles as the optimality gap. Stochastic gradients
    add isotropic noise of the given per-coordinate std.
    """

    dim: int
    mu: float
    lipschitz: float
    optimum: np.ndarray
    noise_std: float = 0.0

    def __post_init__(self):
        if not 0 < self.mu <= self.lipschitz:
            raise ValueError("require 0 < mu <= lipschitz")
        if np.asarray(self.optimum).shape != (self.dim,):
            raise ValueError("optimum must be a dim-length vector")

    @property
    def curvature(self) -> np.ndarray:
        if self.dim == 1:
            return np.array([self.mu])
        return np.linspace(self.mu, self.lipschitz, self.dim)

    def value(self, x: np.ndarray) -> float:
        e = x - self.optimum
        return float(0.5 * np.sum(self.curvature * e * e))

    def grad(self, x: np.ndarray) -> np.ndarray:
        return self.curvature * (x - self.optimum)

    def stochastic_grad(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        g = self.grad(x)
        if self.noise_std > 0:
            g = g + rng.normal(0.0, self.noise_std, size=self.dim)
        return g

    @classmethod
    def seeded(cls, dim: int, mu: float, lipschitz: float, seed: int, noise_std: float = 0.0):
        rng = stream(seed, "quadratic-optimum")
        return cls(dim, mu, lipschitz, rng.normal(0.0, 1.0, size=dim), noise_std)


@dataclass(frozen=True)
class VarianceEstimate:
    """Monte-Carlo bounds on the stochastic-gradient second moments.

    v1 bounds E||grad_sample - grad||^2 and v2 bounds E||grad_sample||^2;
    both are raw sampled maxima. Downstream checks use the values inflated
    by the reported safety factor.
    """

    v1: float
    v2: float
    sample_count: int
    safety_factor: float = 1.5

    @property
    def v1_safe(self) -> float:
        return self.v1 * self.safety_factor

    @property
    def v2_safe(self) -> float:
        return self.v2 * self.safety_factor


def estimate_variance_constants(
    problem: QuadraticProblem,
    sample_points: Sequence[np.ndarray],
    rng: np.random.Generator,
    draws_per_point: int = 1000,
) -> VarianceEstimate:
    """Sampled maxima of the two gradient second moments over given points."""
    if len(sample_points) == 0:
        raise ValueError("estimate_variance_constants needs sample points")
    v1 = 0.0
    v2 = 0.0
    total = 0
    for x in sample_points:
        exact = problem.grad(x)
        draws = exact[None, :] + (
            rng.normal(0.0, problem.noise_std, size=(draws_per_point, problem.dim))
            if problem.noise_std > 0
            else np.zeros((draws_per_point, problem.dim))
        )
        diff_sq = np.sum((draws - exact) ** 2, axis=1)
        norm_sq = np.sum(draws**2, axis=1)
        v1 = max(v1, float(diff_sq.mean()))
        v2 = max(v2, float(norm_sq.mean()))
        total += draws_per_point
    return VarianceEstimate(v1, v2, total)


@dataclass(frozen=True)
class QuadraticRunConfig:
    """Shape of a quadratic federation run used for convergence checks."""

    num_nodes: int = 1
    update_weight: float = 0.5  # weight on the freshly trained model
    step_size: float = 0.05
    epochs_per_upload: int = 1
    rounds: int = 50

    def __post_init__(self):
        if not 0 < self.update_weight <= 1:
            raise ValueError("update_weight must lie in (0, 1]")
        if self.num_nodes < 1 or self.epochs_per_upload < 1 or self.rounds < 1:
            raise ValueError("num_nodes, epochs_per_upload, rounds must be >= 1")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")


@dataclass
class QuadraticRun:
    rows: list[MetricsRow]
    upload_epochs: list[int]
    cfg: QuadraticRunConfig
    initial_gap: float

    @property
    def nu_min(self) -> int:
        return min(self.upload_epochs)

    @property
    def gaps(self) -> list[float]:
        return [self.initial_gap] + [row.global_loss for row in self.rows]


def run_quadratic_experiment(
    problem: QuadraticProblem, cfg: QuadraticRunConfig, seed: int
) -> QuadraticRun:
    """Synchronous mixing rounds of multi-epoch gradient descent on a quadratic.

    Each round every node descends from the current global point for the
    configured number of epochs; the global point then moves to the mixture
    of old point and mean node result. Loss rows record the optimality gap.
    """
    rng = stream(seed, "quadratic-start")
    point = problem.optimum + rng.normal(0.0, 1.0, size=problem.dim)
    node_rngs = [stream(seed, "quadratic-node", k) for k in range(cfg.num_nodes)]
    initial_gap = problem.value(point)
    rows: list[MetricsRow] = []
    upload_epochs: list[int] = []
    for t in range(cfg.rounds):
        results = np.zeros((cfg.num_nodes, problem.dim))
        for k in range(cfg.num_nodes):
            x = point.copy()
            for _ in range(cfg.epochs_per_upload):
                x -= cfg.step_size * problem.stochastic_grad(x, node_rngs[k])
            results[k] = x
            upload_epochs.append(cfg.epochs_per_upload)
        fresh = results.mean(axis=0)
        point = (1.0 - cfg.update_weight) * point + cfg.update_weight * fresh
        rows.append(
            MetricsRow(
                event_index=t,
                sim_time=float(t + 1),
                event_kind="aggregate",
                node_id=None,
                global_accuracy=None,
                global_loss=problem.value(point),
                kappa_cumulative=0.0,
                comm_time_cum=0.0,
                comp_time_cum=float((t + 1) * cfg.epochs_per_upload * cfg.num_nodes),
                staleness=0.0,
                epsilon_total=0.0,
                delta_total=0.0,
                detection_flags="",
                asr=None,
            )
        )
    return QuadraticRun(rows, upload_epochs, cfg, initial_gap)


@dataclass
class ConvergenceReport:
    rho_eff: float
    additive_error: float
    nu_min: int
    per_step_ok: list[bool]
    tail_ok: bool
    fixed_point: float

    @property
    def passed(self) -> bool:
        return all(self.per_step_ok) and self.tail_ok


def check_convergence(
    run: QuadraticRun,
    problem: QuadraticProblem,
    estimates: VarianceEstimate,
    slack: float = 0.05,
) -> ConvergenceReport:
    """Verify the per-aggregation contraction recurrence on a quadratic run.

    Each step must satisfy gap(t+1) <= (rho_eff * gap(t) + c) * (1 + slack)
    with rho_eff = 1 - a + a*(1 - step*mu)^nu_min and
    c = a * (v1_safe + v2_safe) / (2 mu); the final gap must sit below the
    recurrence's fixed point c / (1 - rho_eff), within the same slack.
    """
    cfg = run.cfg
    if cfg.step_size >= 1.0 / problem.lipschitz:
        raise ValueError("run used a step size at or above 1/lipschitz")
    a = cfg.update_weight
    contraction = (1.0 - cfg.step_size * problem.mu) ** run.nu_min
    rho_eff = 1.0 - a + a * contraction
    additive = a * (estimates.v1_safe + estimates.v2_safe) / (2.0 * problem.mu)
    gaps = run.gaps
    per_step = [
        gaps[t + 1] <= (rho_eff * gaps[t] + additive) * (1.0 + slack) + 1e-15
        for t in range(len(gaps) - 1)
    ]
    if rho_eff < 1.0:
        fixed_point = additive / (1.0 - rho_eff)
        tail_ok = gaps[-1] <= fixed_point * (1.0 + slack) + 1e-12
    else:
        fixed_point = math.inf
        tail_ok = True
    return ConvergenceReport(rho_eff, additive, run.nu_min, per_step, tail_ok, fixed_point)
