import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from feldsim import (
    DataSpec,
    Dataset,
    DetectionConfig,
    ModelSpec,
    ParamVector,
    SimConfig,
    TrainConfig,
    UpdateMsg,
    aggregate_aldp,
    aggregate_async,
    aggregate_normal,
    detect,
    evaluate,
    evaluate_submodels,
    flip_labels,
    init_model,
    pick_malicious,
    prepare_assignment,
    run_detection,
    run_simulation,
    stream,
    threshold_topk,
)

SPEC = ModelSpec("linear-softmax", input_dim=4, num_classes=3, seed=1)


def make_test_set(seed=1, n=60):
    rng = stream(seed, "det-test-data")
    return Dataset(rng.uniform(0, 1, (n, 4)), rng.integers(0, 3, n))


def msg(node_id, delta):
    return UpdateMsg(node_id, delta, 0, 0.0, 1)


def random_delta(seed, scale=0.5):
    rng = stream(seed, "det-delta")
    layout = init_model(SPEC).layout
    return ParamVector(rng.normal(0, scale, layout.dim), layout)


class TestEvaluateSubmodels:
    def test_zero_delta_scores_like_global(self):
        global_model = init_model(SPEC)
        data = make_test_set()
        zero = ParamVector.zeros(global_model.layout)
        accs = evaluate_submodels([msg(3, zero)], global_model, SPEC, data, alpha=0.5)
        assert accs == {3: evaluate(global_model, SPEC, data)}

    def test_matches_independent_recomputation(self):
        global_model = init_model(SPEC)
        data = make_test_set()
        msgs = [msg(k, random_delta(k)) for k in range(4)]
        accs = evaluate_submodels(msgs, global_model, SPEC, data, alpha=0.5)
        for m in msgs:
            sub = aggregate_async(global_model, global_model + m.delta, 0.5)
            assert accs[m.node_id] == evaluate(sub, SPEC, data)

    def test_empty_test_set_rejected(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((0, 4)), np.zeros(0, dtype=int))
        with pytest.raises(ValueError):
            evaluate_submodels([], init_model(SPEC), SPEC, make_test_set())


class TestThresholdTopk:
    def test_half_kept_example(self):
        accs = [0.9, 0.85, 0.8, 0.2]
        # sort descending, keep ceil(0.5*4)=2, threshold is the 2nd value
        assert threshold_topk(accs, 50) == 0.85

    def test_everyone_kept_at_full_share(self):
        accs = [0.9, 0.85, 0.8, 0.2]
        thr = threshold_topk(accs, 100)
        assert thr == 0.2
        normal, flagged = detect({i: a for i, a in enumerate(accs)}, thr)
        assert flagged == ()

    def test_all_equal_none_flagged(self):
        accs = [0.7, 0.7, 0.7]
        thr = threshold_topk(accs, 60)
        normal, flagged = detect({i: a for i, a in enumerate(accs)}, thr)
        assert thr == 0.7
        assert normal == (0, 1, 2)
        assert flagged == ()

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            threshold_topk([], 50)


class TestDetect:
    def test_partition_of_running_example(self):
        accs = {0: 0.9, 1: 0.85, 2: 0.8, 3: 0.2}
        thr = threshold_topk(list(accs.values()), 50)
        normal, flagged = detect(accs, thr)
        assert normal == (0, 1)
        assert flagged == (2, 3)

    def test_single_node_always_normal(self):
        accs = {5: 0.1}
        thr = threshold_topk([0.1], 80)
        normal, flagged = detect(accs, thr)
        assert normal == (5,)
        assert flagged == ()

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=12), st.floats(1, 100))
    @settings(max_examples=200, deadline=None)
    def test_partition_is_exact(self, accs, s_percent):
        table = {i: a for i, a in enumerate(accs)}
        thr = threshold_topk(accs, s_percent)
        normal, flagged = detect(table, thr)
        assert set(normal) | set(flagged) == set(table)
        assert set(normal) & set(flagged) == set()
        assert len(normal) >= 1

    @given(st.integers(2, 12), st.sampled_from([50, 60, 70, 80, 90]))
    @settings(max_examples=100, deadline=None)
    def test_distinct_accuracies_keep_exact_share(self, n, s_percent):
        rng = np.random.default_rng(n * 100 + s_percent)
        accs = rng.permutation(np.linspace(0.1, 0.9, n))
        table = {i: float(a) for i, a in enumerate(accs)}
        thr = threshold_topk(list(table.values()), s_percent)
        normal, _ = detect(table, thr)
        assert len(normal) == math.ceil(s_percent / 100 * n)


class TestAggregateNormal:
    def test_all_normal_equals_plain_aggregation(self):
        g = init_model(SPEC)
        msgs = [msg(k, random_delta(k)) for k in range(3)]
        assert np.array_equal(
            aggregate_normal(g, msgs, 0.5).values, aggregate_aldp(g, msgs, 0.5).values
        )

    def test_single_normal_node_reduces_to_pairwise(self):
        g = init_model(SPEC)
        delta = random_delta(9)
        out = aggregate_normal(g, [msg(0, delta)], 0.5)
        assert np.array_equal(out.values, aggregate_async(g, g + delta, 0.5).values)

    def test_flagged_msgs_never_influence_output(self):
        g = init_model(SPEC)
        msgs = [msg(k, random_delta(k)) for k in range(5)]
        flagged = {1, 3}
        normal_msgs = [m for m in msgs if m.node_id not in flagged]
        out = aggregate_normal(g, normal_msgs, 0.5)
        # brute-force mean over the three normal deltas
        mean = np.mean([m.delta.values for m in normal_msgs], axis=0)
        expected = 0.5 * g.values + 0.5 * (g.values + mean)
        assert np.allclose(out.values, expected, rtol=0, atol=1e-15)
        # zeroing flagged deltas changes nothing: they are simply not passed
        zeroed = [
            m if m.node_id not in flagged else msg(m.node_id, ParamVector.zeros(g.layout))
            for m in msgs
        ]
        out2 = aggregate_normal(g, [m for m in zeroed if m.node_id not in flagged], 0.5)
        assert np.array_equal(out.values, out2.values)

    def test_empty_normal_set_rejected(self):
        with pytest.raises(ValueError):
            aggregate_normal(init_model(SPEC), [], 0.5)


class TestRunDetection:
    def test_report_is_consistent(self):
        g = init_model(SPEC)
        msgs = [msg(k, random_delta(k)) for k in range(5)]
        report = run_detection(msgs, g, SPEC, make_test_set(), DetectionConfig(s_percent=60), 0.5, 7)
        assert report.round_index == 7
        assert set(report.normal_ids) | set(report.flagged_ids) == set(range(5))
        for node_id, acc, flagged in report.per_node:
            assert flagged == (acc < report.threshold)
            assert flagged == (node_id in report.flagged_ids)


def poisoned_sim(seed, s_percent=80.0, epochs=20, rounds=8):
    """Seeded scenario: 10 nodes, 2 heavy label flippers, clean test set."""
    data_spec = DataSpec(source="synthetic_blobs", num_classes=10, dim=12,
                         total_size=2000, separation=10.0, seed=seed)
    model = ModelSpec("linear-softmax", 12, 10, seed=seed)
    cfg = SimConfig(num_nodes=10, malicious_fraction=0.2, mode="sync", ldp=False,
                    detection=True, rounds=rounds, seed=seed, model=model,
                    train=TrainConfig(0.3, 32, epochs))
    assignment = prepare_assignment(cfg, data_spec)
    for node_id in pick_malicious(cfg):
        shard = assignment.node_data[node_id]
        for cls in range(4):  # flip forty percent of the label space
            shard = flip_labels(shard, cls, cls + 5)
        assignment.node_data[node_id] = shard
    return cfg, assignment


def test_heavy_flippers_flagged_in_most_runs():
    hits = 0
    runs = 10
    for seed in range(runs):
        cfg, assignment = poisoned_sim(seed)
        result = run_simulation(cfg, assignment, DetectionConfig(s_percent=80.0))
        if set(result.malicious_ids) <= set(result.flagged_union):
            hits += 1
    assert hits >= int(0.95 * runs)


def test_detection_improves_global_accuracy():
    with_det, without = [], []
    for seed in range(6):
        cfg, assignment = poisoned_sim(seed, rounds=6)
        on = run_simulation(cfg, assignment, DetectionConfig(s_percent=80.0))
        off_cfg = dataclasses.replace(cfg, detection=False)
        off = run_simulation(off_cfg, assignment)
        with_det.append(on.final_accuracy)
        without.append(off.final_accuracy)
    assert np.mean(with_det) >= np.mean(without)
