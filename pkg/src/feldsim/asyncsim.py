"""Deterministic discrete-event simulation of the aggregation workflow.

One event loop drives both update modes. In sync mode the aggregator
waits at a barrier for all nodes each round; waiting time is booked as
computation time, which is exactly why the synchronous baseline loses
communication efficiency. In async mode every arrival is aggregated
immediately (or in small staged batches) with a mixing weight alpha kept
on the current global model, and nodes never idle: by default they keep
training from their latest local state until a fresh global model reaches
them.

Determinism: all randomness flows through named per-node streams derived
from the master seed, and simultaneous events pop in a fixed total order
(time, event-kind rank, node id, insertion index). Two runs with the same
config produce bitwise-identical results.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .analysis import MetricsRow
from .attacks import AttackConfig, flip_labels
from .data import DataSpec, gen_synthetic, partition
from .learner import (
    Dataset,
    ModelSpec,
    PerBatchNoise,
    TrainConfig,
    evaluate,
    init_model,
    local_train,
    loss,
)
from .params import ParamVector
from .privacy import AccountantState, PrivacyParams, account, clip, perturb
from .streams import stream

__all__ = [
    "DistSpec",
    "TimingConfig",
    "NodeProfile",
    "UpdateMsg",
    "BufferState",
    "SimConfig",
    "EventQueue",
    "DataAssignment",
    "SimResult",
    "select_topk",
    "aggregate_async",
    "aggregate_aldp",
    "comm_efficiency",
    "pick_malicious",
    "build_profiles",
    "prepare_assignment",
    "run_simulation",
]

SYNC = "sync"
ASYNC = "async"

# fixed rank per event kind for same-time ordering
_EVENT_RANK = {"arrival": 0, "model_recv": 1, "train_done": 2}


@dataclass(frozen=True)
class DistSpec:
    """A positive timing distribution: lognormal, shifted exponential, or fixed."""

    kind: str
    params: tuple[float, ...]

    def sample(self, rng: np.random.Generator) -> float:
        if self.kind == "lognormal":
            median, sigma = self.params
            return float(rng.lognormal(math.log(median), sigma))
        if self.kind == "exponential_shifted":
            shift, mean = self.params
            return float(shift + rng.exponential(mean))
        if self.kind == "fixed":
            return float(self.params[0])
        raise ValueError(f"unknown distribution kind {self.kind!r}")


@dataclass(frozen=True)
class TimingConfig:
    """Parameters from which per-node timing distributions are built.

    Per-epoch compute is lognormal with node medians spread geometrically
    over [median/sqrt(h), median*sqrt(h)] for heterogeneity h; link
    latencies are shifted exponentials shared by all nodes.
    """

    compute_median: float = 1.0
    compute_sigma: float = 0.25
    heterogeneity: float = 3.0
    latency_shift: float = 0.05
    latency_mean: float = 0.2

    def __post_init__(self):
        if min(self.compute_median, self.heterogeneity) <= 0:
            raise ValueError("compute_median and heterogeneity must be positive")
        if self.compute_sigma < 0 or self.latency_shift <= 0 or self.latency_mean < 0:
            raise ValueError("invalid timing parameters")


@dataclass(frozen=True)
class NodeProfile:
    node_id: int
    compute_time: DistSpec  # seconds per local epoch
    uplink: DistSpec
    downlink: DistSpec
    is_malicious: bool = False


@dataclass(frozen=True, eq=False)
class UpdateMsg:
    """A node's perturbed (possibly sparse) update in flight to the aggregator."""

    node_id: int
    delta: ParamVector
    base_version: int
    send_time: float
    local_epochs_done: int


@dataclass
class BufferState:
    """Node-side buffer: the accumulation container plus in-flight uploads."""

    residual: ParamVector
    pending: list[UpdateMsg] = field(default_factory=list)


@dataclass(frozen=True)
class SimConfig:
    num_nodes: int = 10
    malicious_fraction: float = 0.0
    alpha: float = 0.5  # weight kept on the current global model when mixing
    mode: str = ASYNC
    ldp: bool = True
    detection: bool = False
    topk_ratio: float = 1.0
    rounds: int = 20  # aggregation events to execute
    plain_average: bool = False  # sync baseline: apply the unweighted mean update
    refresh_policy: str = "continue"  # or "wait": idle until a fresh model arrives
    buffer_size: int = 1  # async arrivals staged per aggregation
    per_batch_noise: bool = False  # in-loop noising fidelity option
    eval_every: int = 1
    seed: int = 0
    model: ModelSpec = ModelSpec("linear-softmax", 2, 2)
    privacy: PrivacyParams = PrivacyParams()
    train: TrainConfig = TrainConfig()
    timing: TimingConfig = TimingConfig()

    def __post_init__(self):
        if self.num_nodes < 1:
            raise ValueError("num_nodes must be >= 1")
        if not 0 <= self.malicious_fraction < 1:
            raise ValueError("malicious_fraction must lie in [0, 1)")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.mode not in (SYNC, ASYNC):
            raise ValueError(f"unknown mode {self.mode!r}")
        if not 0 < self.topk_ratio <= 1:
            raise ValueError("topk_ratio must lie in (0, 1]")
        if self.rounds < 1 or self.eval_every < 1:
            raise ValueError("rounds and eval_every must be >= 1")
        if self.refresh_policy not in ("continue", "wait"):
            raise ValueError(f"unknown refresh_policy {self.refresh_policy!r}")
        if not 1 <= self.buffer_size <= self.num_nodes:
            raise ValueError("buffer_size must lie in [1, num_nodes]")
        if self.plain_average and self.mode != SYNC:
            raise ValueError("plain_average is a sync-mode baseline flag")


class EventQueue:
    """Min-heap of events with a deterministic total order.

    Entries pop by (time, event-kind rank, node_id, insertion index);
    the insertion index makes even exact duplicates stable.
    """

    def __init__(self):
        self._heap: list[tuple[float, int, int, int, str, object]] = []
        self._count = 0

    def push(self, time: float, kind: str, node_id: int, payload: object = None) -> None:
        heapq.heappush(self._heap, (time, _EVENT_RANK[kind], node_id, self._count, kind, payload))
        self._count += 1

    def pop(self) -> tuple[float, str, int, object]:
        time, _, node_id, _, kind, payload = heapq.heappop(self._heap)
        return time, kind, node_id, payload

    def __len__(self) -> int:
        return len(self._heap)


def select_topk(
    g: ParamVector, residual: ParamVector, ratio: float
) -> tuple[ParamVector, ParamVector]:
    """Keep the largest-magnitude share of g + residual; bank the rest.

    Returns (sparse_delta, new_residual) with sparse + residual equal to
    the accumulated input exactly, coordinate by coordinate. Magnitude
    ties are broken toward the lower index.
    """
    if not 0 < ratio <= 1:
        raise ValueError("ratio must lie in (0, 1]")
    if g.layout != residual.layout:
        raise ValueError("gradient and residual layouts differ")
    accumulated = g.values + residual.values
    dim = accumulated.shape[0]
    keep = math.ceil(ratio * dim)
    if keep >= dim:
        return g.with_values(accumulated), ParamVector.zeros(g.layout)
    order = np.argsort(-np.abs(accumulated), kind="stable")
    sparse = np.zeros(dim)
    kept = order[:keep]
    sparse[kept] = accumulated[kept]
    new_residual = accumulated.copy()
    new_residual[kept] = 0.0
    return g.with_values(sparse), g.with_values(new_residual)


def aggregate_async(global_model: ParamVector, incoming: ParamVector, alpha: float) -> ParamVector:
    """Mix the current global model with an incoming model at weight alpha on the old."""
    if not 0 <= alpha <= 1:
        raise ValueError("alpha must lie in [0, 1]")
    if global_model.layout != incoming.layout:
        raise ValueError("model layouts differ")
    return global_model.with_values(alpha * global_model.values + (1.0 - alpha) * incoming.values)


def aggregate_aldp(
    global_model: ParamVector, msgs: Sequence[UpdateMsg], alpha: float
) -> ParamVector:
    """Mix in the mean of the staged deltas applied to the current global model.

    Deltas arrive already clipped and perturbed node-side; averaging them
    here equals the aggregator-side-noise formulation because the noise
    terms simply sum.
    """
    if not msgs:
        raise ValueError("aggregate_aldp needs at least one update")
    mean_delta = np.mean([m.delta.values for m in msgs], axis=0)
    incoming = global_model.with_values(global_model.values + mean_delta)
    return aggregate_async(global_model, incoming, alpha)


def comm_efficiency(comm_time: float, comp_time: float) -> float:
    """Share of total simulated time spent communicating."""
    if comm_time < 0 or comp_time < 0:
        raise ValueError("times must be nonnegative")
    if comm_time + comp_time == 0:
        raise ValueError("communication and computation times are both zero")
    return comm_time / (comm_time + comp_time)


def pick_malicious(cfg: SimConfig) -> tuple[int, ...]:
    """Deterministic malicious-node choice: round(p*K) ids from a seeded draw."""
    count = int(round(cfg.malicious_fraction * cfg.num_nodes))
    if count == 0:
        return ()
    rng = stream(cfg.seed, "malicious-pick")
    return tuple(sorted(int(i) for i in rng.choice(cfg.num_nodes, size=count, replace=False)))


def build_profiles(cfg: SimConfig) -> list[NodeProfile]:
    malicious = set(pick_malicious(cfg))
    timing = cfg.timing
    profiles = []
    for k in range(cfg.num_nodes):
        position = 0.5 if cfg.num_nodes == 1 else k / (cfg.num_nodes - 1)
        median = timing.compute_median * timing.heterogeneity ** (position - 0.5)
        latency = DistSpec("exponential_shifted", (timing.latency_shift, timing.latency_mean))
        profiles.append(
            NodeProfile(
                node_id=k,
                compute_time=DistSpec("lognormal", (median, timing.compute_sigma)),
                uplink=latency,
                downlink=latency,
                is_malicious=k in malicious,
            )
        )
    return profiles


@dataclass
class DataAssignment:
    node_data: list[Dataset]
    test_data: Dataset


def prepare_assignment(
    cfg: SimConfig,
    data_spec: DataSpec,
    attack: Optional[AttackConfig] = None,
) -> DataAssignment:
    """Provision data, shard it, and statically poison the malicious shards."""
    full = gen_synthetic(data_spec, data_spec.seed if data_spec.seed else cfg.seed)
    shards, test = partition(
        full,
        cfg.num_nodes,
        data_spec.partition,
        cfg.seed,
        skew_gamma=data_spec.skew_gamma,
    )
    if attack is not None and attack.kind == "label_flip":
        for node_id in pick_malicious(cfg):
            shards[node_id] = flip_labels(shards[node_id], attack.flip_from, attack.flip_to)
    return DataAssignment(shards, test)


@dataclass
class _NodeState:
    profile: NodeProfile
    data: Dataset
    model: ParamVector
    base_version: int
    buffer: BufferState
    shuffle_rng: np.random.Generator
    noise_rng: np.random.Generator
    timing_rng: np.random.Generator
    batch_noise: Optional[PerBatchNoise]
    fresh_model: Optional[ParamVector] = None
    fresh_version: int = -1
    busy: bool = False
    accountant: AccountantState = field(default_factory=AccountantState)
    uploads: int = 0


@dataclass
class SimResult:
    """Everything a run produces; `metrics` is the loggable MetricsLog."""

    metrics: list[MetricsRow]
    final_model: ParamVector
    final_version: int
    makespan: float
    final_accuracy: float
    final_loss: float
    comm_time: float
    comp_time: float
    staleness_histogram: dict[int, int]
    flagged_history: list[tuple[int, tuple[int, ...]]]
    flagged_union: tuple[int, ...]
    malicious_ids: tuple[int, ...]
    uploads_per_node: list[int]
    epsilon_total: float
    delta_total: float

    @property
    def kappa(self) -> float:
        return comm_efficiency(self.comm_time, self.comp_time)


def _validate(cfg: SimConfig, assignment: DataAssignment) -> None:
    if len(assignment.node_data) != cfg.num_nodes:
        raise ValueError(
            f"assignment has {len(assignment.node_data)} shards for {cfg.num_nodes} nodes"
        )
    for k, shard in enumerate(assignment.node_data):
        if shard.dim != cfg.model.input_dim:
            raise ValueError(f"node {k} data dim {shard.dim} != model input {cfg.model.input_dim}")
        if shard.labels.max() >= cfg.model.num_classes:
            raise ValueError(f"node {k} labels exceed num_classes {cfg.model.num_classes}")
    if assignment.test_data.size < 1:
        raise ValueError("test set is empty")
    if assignment.test_data.dim != cfg.model.input_dim:
        raise ValueError("test set dim does not match the model")


def run_simulation(cfg: SimConfig, assignment: DataAssignment, detection_cfg=None) -> SimResult:
    """Execute the event loop until cfg.rounds aggregation events complete."""
    from .detection import DetectionConfig, run_detection  # circular at module level

    _validate(cfg, assignment)
    if cfg.detection and detection_cfg is None:
        detection_cfg = DetectionConfig()

    master = cfg.seed
    profiles = build_profiles(cfg)
    global_model = init_model(cfg.model)
    layout = global_model.layout
    nodes: list[_NodeState] = []
    for k in range(cfg.num_nodes):
        batch_noise = None
        if cfg.per_batch_noise and cfg.ldp:
            batch_noise = PerBatchNoise(cfg.privacy.noise_std, stream(master, "batch-noise", k))
        nodes.append(
            _NodeState(
                profile=profiles[k],
                data=assignment.node_data[k],
                model=global_model,
                base_version=0,
                buffer=BufferState(residual=ParamVector.zeros(layout)),
                shuffle_rng=stream(master, "shuffle", k),
                noise_rng=stream(master, "upload-noise", k),
                timing_rng=stream(master, "timing", k),
                batch_noise=batch_noise,
                accountant=AccountantState(delta_ceiling=1.0 / cfg.num_nodes),
            )
        )

    queue = EventQueue()
    version = 0
    agg_events = 0
    comm_time = 0.0
    comp_time = 0.0
    staging: list[tuple[float, UpdateMsg]] = []
    rows: list[MetricsRow] = []
    staleness_hist: dict[int, int] = {}
    flagged_history: list[tuple[int, tuple[int, ...]]] = []
    flagged_union: set[int] = set()
    last_accuracy = evaluate(global_model, cfg.model, assignment.test_data)
    last_loss = loss(global_model, cfg.model, assignment.test_data)
    makespan = 0.0

    refresh_policy = "wait" if cfg.mode == SYNC else cfg.refresh_policy
    if cfg.mode == SYNC:
        batch_target = cfg.num_nodes
    elif cfg.detection:
        batch_target = cfg.num_nodes  # comparable staleness across evaluated nodes
    else:
        batch_target = cfg.buffer_size

    def start_training(node: _NodeState, now: float) -> None:
        node.busy = True
        duration = sum(
            node.profile.compute_time.sample(node.timing_rng)
            for _ in range(cfg.train.local_epochs)
        )
        nonlocal comp_time
        comp_time += duration
        queue.push(now + duration, "train_done", node.profile.node_id)

    def send_model(node_id: int, now: float) -> None:
        nonlocal comm_time
        delay = nodes[node_id].profile.downlink.sample(nodes[node_id].timing_rng)
        comm_time += delay
        queue.push(now + delay, "model_recv", node_id, (version, global_model))

    def on_model_recv(node: _NodeState, now: float, payload) -> None:
        recv_version, model = payload
        if recv_version > node.fresh_version:
            node.fresh_model = model
            node.fresh_version = recv_version
        if not node.busy:
            adopt_fresh(node)
            start_training(node, now)

    def adopt_fresh(node: _NodeState) -> None:
        if node.fresh_model is not None and node.fresh_version > node.base_version:
            node.model = node.fresh_model
            node.base_version = node.fresh_version
        node.fresh_model = None
        node.fresh_version = -1

    def on_train_done(node: _NodeState, now: float) -> None:
        nonlocal comm_time
        trained = local_train(
            node.model, cfg.model, node.data, cfg.train, node.batch_noise, node.shuffle_rng
        )
        delta = trained - node.model
        if cfg.ldp:
            delta = perturb(clip(delta, cfg.privacy.clip_norm), cfg.privacy, node.noise_rng)
            node.accountant = account(node.accountant, cfg.privacy, 1)
        delta, node.buffer.residual = select_topk(delta, node.buffer.residual, cfg.topk_ratio)
        msg = UpdateMsg(
            node_id=node.profile.node_id,
            delta=delta,
            base_version=node.base_version,
            send_time=now,
            local_epochs_done=cfg.train.local_epochs,
        )
        node.buffer.pending.append(msg)
        node.uploads += 1
        delay = node.profile.uplink.sample(node.timing_rng)
        comm_time += delay
        queue.push(now + delay, "arrival", node.profile.node_id, msg)
        node.busy = False
        if refresh_policy == "continue":
            if node.fresh_version > node.base_version:
                adopt_fresh(node)
            else:
                node.model = trained
            start_training(node, now)
        # wait policy: stay idle until the next model_recv

    def aggregate(now: float) -> None:
        nonlocal global_model, version, agg_events, comp_time, makespan
        nonlocal last_accuracy, last_loss
        batch = list(staging)
        staging.clear()
        if refresh_policy == "wait":
            # nodes sit idle while their update waits at the barrier; under
            # the continue policy they keep training, so staging delay is
            # aggregator-side queueing, not node time
            comp_time += sum(now - arrived for arrived, _ in batch)
        msgs = [msg for _, msg in batch]
        for msg in msgs:
            stale = version - msg.base_version
            staleness_hist[stale] = staleness_hist.get(stale, 0) + 1
        flags = ""
        use = msgs
        if cfg.detection and detection_cfg is not None and agg_events % detection_cfg.cadence == 0:
            latest = {}
            for msg in msgs:
                latest[msg.node_id] = msg
            report = run_detection(
                list(latest.values()),
                global_model,
                cfg.model,
                assignment.test_data,
                detection_cfg,
                cfg.alpha,
                agg_events,
            )
            flagged_history.append((agg_events, report.flagged_ids))
            flagged_union.update(report.flagged_ids)
            flags = ";".join(str(i) for i in report.flagged_ids)
            use = [msg for msg in msgs if msg.node_id not in report.flagged_ids]
            if not use:  # threshold rule always keeps the top share
                raise AssertionError("detection flagged every staged update")
        if cfg.plain_average:
            mean_delta = np.mean([m.delta.values for m in use], axis=0)
            global_model = global_model.with_values(global_model.values + mean_delta)
        else:
            global_model = aggregate_aldp(global_model, use, cfg.alpha)
        version += 1
        agg_events += 1
        makespan = now
        if agg_events % cfg.eval_every == 0 or agg_events == cfg.rounds:
            last_accuracy = evaluate(global_model, cfg.model, assignment.test_data)
            last_loss = loss(global_model, cfg.model, assignment.test_data)
        eps_total = max((n.accountant.epsilon_total for n in nodes), default=0.0)
        delta_total = max((n.accountant.delta_total for n in nodes), default=0.0)
        rows.append(
            MetricsRow(
                event_index=agg_events - 1,
                sim_time=now,
                event_kind="aggregate",
                node_id=msgs[0].node_id if len(msgs) == 1 else None,
                global_accuracy=last_accuracy,
                global_loss=last_loss,
                kappa_cumulative=comm_efficiency(comm_time, comp_time),
                comm_time_cum=comm_time,
                comp_time_cum=comp_time,
                staleness=float(max(version - 1 - m.base_version for m in msgs)),
                epsilon_total=eps_total,
                delta_total=delta_total,
                detection_flags=flags,
                asr=None,
            )
        )
        receivers = (
            range(cfg.num_nodes)
            if cfg.mode == SYNC
            else sorted({msg.node_id for msg in msgs})
        )
        if agg_events < cfg.rounds:
            for node_id in receivers:
                send_model(node_id, now)

    for k in range(cfg.num_nodes):
        send_model(k, 0.0)

    while agg_events < cfg.rounds:
        if not len(queue):
            raise RuntimeError("event queue drained before the requested aggregation count")
        now, kind, node_id, payload = queue.pop()
        node = nodes[node_id]
        if kind == "model_recv":
            on_model_recv(node, now, payload)
        elif kind == "train_done":
            on_train_done(node, now)
        elif kind == "arrival":
            msg = payload
            node.buffer.pending = [m for m in node.buffer.pending if m is not msg]
            staging.append((now, msg))
            if len(staging) >= batch_target:
                aggregate(now)

    return SimResult(
        metrics=rows,
        final_model=global_model,
        final_version=version,
        makespan=makespan,
        final_accuracy=last_accuracy,
        final_loss=last_loss,
        comm_time=comm_time,
        comp_time=comp_time,
        staleness_histogram=dict(sorted(staleness_hist.items())),
        flagged_history=flagged_history,
        flagged_union=tuple(sorted(flagged_union)),
        malicious_ids=pick_malicious(cfg),
        uploads_per_node=[n.uploads for n in nodes],
        epsilon_total=max((n.accountant.epsilon_total for n in nodes), default=0.0),
        delta_total=max((n.accountant.delta_total for n in nodes), default=0.0),
    )
