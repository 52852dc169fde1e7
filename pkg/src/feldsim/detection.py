"""Aggregator-side malicious-node detection via sub-model quality testing.

For each pending update the aggregator materializes the sub-model it would
obtain from that node alone, scores it on a clean held-out test set, and
keeps only the top s% of nodes by accuracy. Poisoned updates produce
sub-models that score measurably worse on clean data, so label flippers
fall below the cut. Nodes at the threshold accuracy count as normal: the
cut keeps exactly the stated top share when accuracies are distinct, and
ties at the boundary are all kept.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from .asyncsim import UpdateMsg, aggregate_aldp, aggregate_async
from .learner import Dataset, ModelSpec, evaluate
from .params import ParamVector

__all__ = [
    "DetectionConfig",
    "DetectionReport",
    "evaluate_submodels",
    "threshold_topk",
    "detect",
    "aggregate_normal",
    "run_detection",
]


@dataclass(frozen=True)
class DetectionConfig:
    s_percent: float = 80.0
    cadence: int = 1  # run every N aggregation events
    test_set_id: str = "cloud-test"

    def __post_init__(self):
        if not 0 < self.s_percent <= 100:
            raise ValueError("s_percent must lie in (0, 100]")
        if self.cadence < 1:
            raise ValueError("cadence must be >= 1")


@dataclass(frozen=True)
class DetectionReport:
    round_index: int
    per_node: tuple[tuple[int, float, bool], ...]  # (node_id, accuracy, flagged)
    threshold: float
    normal_ids: tuple[int, ...]
    flagged_ids: tuple[int, ...]


def evaluate_submodels(
    msgs: Sequence[UpdateMsg],
    global_model: ParamVector,
    spec: ModelSpec,
    test_set: Dataset,
    alpha: float = 0.5,
) -> dict[int, float]:
    """Accuracy of each node's standalone sub-model on the clean test set.

    The sub-model is the global model mixed (weight alpha on the current
    global) with that node's delta applied, exactly what aggregating that
    node alone would produce.
    """
    if not msgs:
        raise ValueError("evaluate_submodels needs at least one update")
    if test_set.size < 1:
        raise ValueError("evaluate_submodels needs a nonempty test set")
    accuracies: dict[int, float] = {}
    for msg in sorted(msgs, key=lambda m: m.node_id):
        submodel = aggregate_async(global_model, global_model + msg.delta, alpha)
        accuracies[msg.node_id] = evaluate(submodel, spec, test_set)
    return accuracies


def threshold_topk(accuracies: Sequence[float], s_percent: float) -> float:
    """Accuracy cut below which nodes are flagged.

    Sorting descending, the cut is the ceil(s% * n)-th value, so with
    distinct accuracies exactly the top s% satisfy accuracy >= threshold.
    """
    if not accuracies:
        raise ValueError("threshold_topk needs at least one accuracy")
    if not 0 < s_percent <= 100:
        raise ValueError("s_percent must lie in (0, 100]")
    ordered = sorted(accuracies, reverse=True)
    n_keep = math.ceil(s_percent / 100.0 * len(ordered))
    return ordered[n_keep - 1]


def detect(accuracies: dict[int, float], threshold: float) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Partition node ids into (normal, flagged) by the accuracy threshold."""
    normal = tuple(sorted(k for k, a in accuracies.items() if a >= threshold))
    flagged = tuple(sorted(k for k, a in accuracies.items() if a < threshold))
    return normal, flagged


def aggregate_normal(
    global_model: ParamVector,
    msgs: Sequence[UpdateMsg],
    alpha: float,
) -> ParamVector:
    """Aggregate only the normal-set updates; the set is nonempty by construction."""
    if not msgs:
        raise ValueError("aggregate_normal requires a nonempty normal set")
    return aggregate_aldp(global_model, msgs, alpha)


def run_detection(
    msgs: Sequence[UpdateMsg],
    global_model: ParamVector,
    spec: ModelSpec,
    test_set: Dataset,
    cfg: DetectionConfig,
    alpha: float,
    round_index: int,
) -> DetectionReport:
    """One full detection pass: score sub-models, cut at top s%, partition."""
    accuracies = evaluate_submodels(msgs, global_model, spec, test_set, alpha)
    threshold = threshold_topk(list(accuracies.values()), cfg.s_percent)
    normal, flagged = detect(accuracies, threshold)
    per_node = tuple(
        (node_id, accuracies[node_id], node_id in flagged) for node_id in sorted(accuracies)
    )
    return DetectionReport(round_index, per_node, threshold, normal, flagged)
