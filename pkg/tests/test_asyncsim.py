import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from feldsim import (
    DataAssignment,
    DataSpec,
    EventQueue,
    Layout,
    ModelSpec,
    ParamVector,
    PrivacyParams,
    SimConfig,
    TimingConfig,
    TrainConfig,
    UpdateMsg,
    aggregate_aldp,
    aggregate_async,
    comm_efficiency,
    gen_synthetic,
    init_model,
    local_train,
    partition,
    pick_malicious,
    prepare_assignment,
    run_simulation,
    select_topk,
    stream,
)


def vector(values):
    values = np.asarray(values, dtype=float)
    return ParamVector(values, Layout((("all", 0, values.size),), values.size))


def msg(node_id, delta, base_version=0):
    return UpdateMsg(node_id, delta, base_version, 0.0, 1)


class TestSelectTopk:
    def test_full_ratio_passes_accumulated_through(self):
        g = vector([1.0, -2.0, 3.0])
        residual = vector([0.5, 0.5, 0.5])
        sparse, new_residual = select_topk(g, residual, 1.0)
        assert np.array_equal(sparse.values, [1.5, -1.5, 3.5])
        assert np.array_equal(new_residual.values, [0.0, 0.0, 0.0])

    def test_keeps_largest_magnitudes(self):
        g = vector([5.0, 0.1, -3.0, 0.2])
        sparse, residual = select_topk(g, vector([0, 0, 0, 0]), 0.5)
        assert np.array_equal(sparse.values, [5.0, 0.0, -3.0, 0.0])
        assert np.array_equal(residual.values, [0.0, 0.1, 0.0, 0.2])

    def test_magnitude_ties_take_lowest_index(self):
        g = vector([1.0, -1.0, 1.0, -1.0])
        sparse, _ = select_topk(g, vector([0, 0, 0, 0]), 0.5)
        assert np.array_equal(sparse.values, [1.0, -1.0, 0.0, 0.0])

    def test_residual_feeds_back(self):
        g = vector([0.0, 0.0])
        sparse, residual = select_topk(g, vector([4.0, 1.0]), 0.5)
        assert np.array_equal(sparse.values, [4.0, 0.0])
        assert np.array_equal(residual.values, [0.0, 1.0])

    @given(st.integers(0, 10_000), st.floats(0.05, 1.0))
    @settings(max_examples=200, deadline=None)
    def test_conservation_exact(self, seed, ratio):
        rng = stream(seed, "topk")
        g = vector(rng.normal(0, 1, 24))
        residual = vector(rng.normal(0, 1, 24))
        sparse, new_residual = select_topk(g, residual, ratio)
        assert np.array_equal(sparse.values + new_residual.values, g.values + residual.values)
        assert np.count_nonzero(sparse.values * new_residual.values) == 0


class TestAggregateAsync:
    def test_alpha_one_keeps_global(self):
        g = vector([1.0, 2.0])
        out = aggregate_async(g, vector([9.0, 9.0]), 1.0)
        assert np.array_equal(out.values, g.values)

    def test_midpoint(self):
        out = aggregate_async(vector([1.0, 1.0]), vector([3.0, 3.0]), 0.5)
        assert np.array_equal(out.values, [2.0, 2.0])

    def test_default_mixing_weight_is_half(self):
        assert SimConfig().alpha == 0.5

    def test_layout_mismatch_rejected(self):
        other = ParamVector(np.zeros(3), Layout((("x", 0, 3),), 3))
        with pytest.raises(ValueError):
            aggregate_async(vector([1.0, 2.0]), other, 0.5)


class TestAggregateAldp:
    def test_single_message_reduces_to_pairwise_mix(self):
        g = vector([1.0, -1.0, 0.5])
        delta = vector([0.2, 0.4, -0.6])
        combined = aggregate_aldp(g, [msg(0, delta)], 0.25)
        direct = aggregate_async(g, g + delta, 0.25)
        assert np.array_equal(combined.values, direct.values)

    def test_noiseless_collapse_to_mean_update(self):
        g = vector([1.0, 1.0])
        deltas = [vector([1.0, 0.0]), vector([0.0, 1.0])]
        out = aggregate_aldp(g, [msg(i, d) for i, d in enumerate(deltas)], 0.5)
        # alpha*g + (1-alpha)*(g + mean(deltas)), computed by hand
        assert np.allclose(out.values, [1.25, 1.25], rtol=0, atol=0)

    def test_matches_direct_formula_evaluation(self):
        rng = stream(31, "aldp")
        g = vector(rng.normal(0, 1, 12))
        deltas = [vector(rng.normal(0, 1, 12)) for _ in range(3)]
        alpha = 0.5
        out = aggregate_aldp(g, [msg(i, d) for i, d in enumerate(deltas)], alpha)
        # independent brute-force evaluation with explicit loops
        mean = np.zeros(12)
        for d in deltas:
            mean += d.values
        mean /= 3
        expected = alpha * g.values + (1 - alpha) * (g.values + mean)
        assert np.allclose(out.values, expected, rtol=0, atol=1e-15)

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError):
            aggregate_aldp(vector([1.0]), [], 0.5)


class TestCommEfficiency:
    def test_quarter(self):
        assert comm_efficiency(1.0, 3.0) == 0.25

    def test_pure_communication(self):
        assert comm_efficiency(5.0, 0.0) == 1.0

    def test_both_zero_rejected(self):
        with pytest.raises(ValueError):
            comm_efficiency(0.0, 0.0)

    @given(st.floats(0, 1e6), st.floats(0, 1e6))
    @settings(max_examples=100, deadline=None)
    def test_range(self, comm, comp):
        if comm + comp == 0:
            return
        assert 0.0 <= comm_efficiency(comm, comp) <= 1.0


class TestEventQueue:
    def test_pops_in_time_order(self):
        q = EventQueue()
        q.push(3.0, "arrival", 0)
        q.push(1.0, "train_done", 2)
        q.push(2.0, "model_recv", 1)
        times = [q.pop()[0] for _ in range(3)]
        assert times == [1.0, 2.0, 3.0]

    def test_equal_time_breaks_by_kind_rank_then_node(self):
        q = EventQueue()
        q.push(1.0, "train_done", 0)
        q.push(1.0, "arrival", 5)
        q.push(1.0, "model_recv", 3)
        q.push(1.0, "arrival", 2)
        order = [(kind, node) for _, kind, node, _ in (q.pop() for _ in range(4))]
        assert order == [("arrival", 2), ("arrival", 5), ("model_recv", 3), ("train_done", 0)]

    def test_exact_duplicates_pop_in_insertion_order(self):
        q = EventQueue()
        q.push(1.0, "arrival", 1, "first")
        q.push(1.0, "arrival", 1, "second")
        assert q.pop()[3] == "first"
        assert q.pop()[3] == "second"


def small_config(**overrides):
    defaults = dict(
        num_nodes=4,
        mode="sync",
        ldp=False,
        rounds=4,
        seed=13,
        model=ModelSpec("linear-softmax", 3, 2, seed=13),
        train=TrainConfig(learning_rate=0.1, batch_size=16, local_epochs=2),
        privacy=PrivacyParams(clip_norm=0.5),
    )
    defaults.update(overrides)
    return SimConfig(**defaults)


def small_assignment(cfg, seed=13):
    spec = DataSpec(source="synthetic_blobs", num_classes=2, dim=3, total_size=240,
                    separation=5.0, seed=seed)
    return prepare_assignment(cfg, spec)


class TestRunSimulation:
    def test_bitwise_deterministic(self):
        cfg = small_config(mode="async", ldp=True, rounds=10)
        assignment = small_assignment(cfg)
        a = run_simulation(cfg, assignment)
        b = run_simulation(cfg, assignment)
        assert a.metrics == b.metrics
        assert np.array_equal(a.final_model.values, b.final_model.values)

    def test_sync_plain_average_matches_reference_loop(self):
        """Oracle: straight-line federated averaging, reimplemented inline."""
        cfg = small_config(plain_average=True, rounds=5)
        assignment = small_assignment(cfg)
        result = run_simulation(cfg, assignment)

        model = init_model(cfg.model)
        rngs = [stream(cfg.seed, "shuffle", k) for k in range(cfg.num_nodes)]
        for _ in range(cfg.rounds):
            locals_ = [
                local_train(model, cfg.model, assignment.node_data[k], cfg.train, None, rngs[k])
                for k in range(cfg.num_nodes)
            ]
            model = model.with_values(np.mean([m.values for m in locals_], axis=0))
        assert np.max(np.abs(result.final_model.values - model.values)) < 1e-10

    def test_async_faster_than_sync_under_paired_draws(self):
        sync_cfg = small_config(rounds=3)
        assignment = small_assignment(sync_cfg)
        sync = run_simulation(sync_cfg, assignment)
        async_cfg = dataclasses.replace(sync_cfg, mode="async",
                                        rounds=3 * sync_cfg.num_nodes)
        asyn = run_simulation(async_cfg, assignment)
        assert asyn.makespan < sync.makespan
        assert asyn.kappa > sync.kappa

    def test_staleness_bookkeeping(self):
        cfg = small_config(mode="async", rounds=20)
        assignment = small_assignment(cfg)
        result = run_simulation(cfg, assignment)
        assert all(row.staleness >= 0 for row in result.metrics)
        assert sum(result.staleness_histogram.values()) == 20
        assert any(s > 0 for s in result.staleness_histogram)  # continue policy goes stale

    def test_sync_staleness_is_zero(self):
        cfg = small_config(rounds=3)
        result = run_simulation(cfg, small_assignment(cfg))
        assert all(row.staleness == 0 for row in result.metrics)

    def test_rows_monotone_in_time_and_cumulatives(self):
        cfg = small_config(mode="async", rounds=15, ldp=True)
        result = run_simulation(cfg, small_assignment(cfg))
        rows = result.metrics
        for a, b in zip(rows, rows[1:]):
            assert b.sim_time >= a.sim_time
            assert b.comm_time_cum >= a.comm_time_cum
            assert b.comp_time_cum >= a.comp_time_cum
            assert b.epsilon_total >= a.epsilon_total
        assert all(0 <= row.kappa_cumulative <= 1 for row in rows)

    def test_ldp_deltas_respect_clip_plus_noise_allowance(self):
        cfg = small_config(mode="async", ldp=True, rounds=8, topk_ratio=1.0)
        result = run_simulation(cfg, small_assignment(cfg))
        assert result.epsilon_total > 0
        assert result.delta_total > 0

    def test_shard_count_mismatch_rejected_before_loop(self):
        cfg = small_config()
        assignment = small_assignment(cfg)
        bad = DataAssignment(assignment.node_data[:-1], assignment.test_data)
        with pytest.raises(ValueError, match="shards"):
            run_simulation(cfg, bad)

    def test_async_plain_average_rejected(self):
        with pytest.raises(ValueError, match="sync"):
            small_config(mode="async", plain_average=True)

    def test_buffered_async_batches_arrivals(self):
        cfg = small_config(mode="async", rounds=6, buffer_size=4)
        result = run_simulation(cfg, small_assignment(cfg))
        # four arrivals per aggregation event
        assert len(result.metrics) == 6
        assert all(row.node_id is None for row in result.metrics)

    def test_topk_sparsification_preserves_learning_signal(self):
        dense = small_config(rounds=6)
        sparse = dataclasses.replace(dense, topk_ratio=0.25)
        assignment = small_assignment(dense)
        dense_result = run_simulation(dense, assignment)
        sparse_result = run_simulation(sparse, assignment)
        assert sparse_result.final_accuracy >= 0.5
        assert not np.array_equal(
            dense_result.final_model.values, sparse_result.final_model.values
        )


class TestMaliciousSelection:
    def test_count_follows_fraction(self):
        cfg = small_config(num_nodes=10, malicious_fraction=0.3)
        assert len(pick_malicious(cfg)) == 3

    def test_no_attackers_when_fraction_zero(self):
        assert pick_malicious(small_config()) == ()

    def test_deterministic(self):
        cfg = small_config(num_nodes=10, malicious_fraction=0.3)
        assert pick_malicious(cfg) == pick_malicious(cfg)
