import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from builders import step_table
from oracles import ema_reference, optimal_max_load
from sparsebalance.dst import BudgetDecision
from sparsebalance.errors import ConfigError
from sparsebalance.predictor import CostModelSpec, ProfileTable, synthesize_table
from sparsebalance.sab import (
    BatchingConfig,
    PackingPlan,
    SparsityEstimator,
    bin_packing,
    calibrate,
    compute_weights,
    estimate_sparsity,
    plan_batching,
    plan_in_order,
    plan_lbb,
    plan_with_weights,
)
from sparsebalance.workload import LengthDistributionSpec, RoutingProfile, Sample, generate_samples

ONE = (RoutingProfile.from_raw([1.0]),)


def samples_with_lengths(lengths):
    return [Sample(i, int(L), ONE) for i, L in enumerate(lengths)]


def decision(k):
    return BudgetDecision(0, 0, 32, k, k, 0.0, "compressed", 1.0, 1.0)


def loads(bins, w):
    return sorted(sum(w[i] for i in b) for b in bins)


# ------------------------------------------------------------------ estimator


def test_fresh_estimator_returns_default():
    est = SparsityEstimator()
    assert all(estimate_sparsity(est, L) == 32 for L in (1, 5000, 10**6))


def test_ema_arithmetic_and_rounding():
    est = SparsityEstimator(default_budget=32, ema_alpha=0.2)
    est = calibrate(est, [decision(16), decision(24)], [3000, 3000])
    i = est.bin_index(3000)
    assert est.ema_budget[i] == pytest.approx(27.84)
    assert est.ema_budget[i] == pytest.approx(ema_reference(32, [16, 24], 0.2))
    assert estimate_sparsity(est, 3000) == 28
    # other bins untouched
    assert estimate_sparsity(est, 40000) == 32


def test_length_beyond_last_edge_clamps():
    est = SparsityEstimator()
    assert est.bin_index(10**7) == len(est.bin_edges) - 1
    assert est.bin_index(0) == 0


def test_calibrate_empty_and_alpha_one():
    est = SparsityEstimator()
    assert calibrate(est, [], []) is est
    one = calibrate(SparsityEstimator(ema_alpha=1.0), [decision(16)], [100])
    assert one.ema_budget[0] == 16.0


def test_calibrate_converges():
    est = SparsityEstimator(ema_alpha=0.2)
    est = calibrate(est, [decision(8)] * 50, [100] * 50)
    assert abs(est.ema_budget[0] - 8) < 0.01
    assert abs(est.ema_budget[0] - 8) <= (0.8**50) * 24 + 1e-12


def test_calibrate_mismatch():
    with pytest.raises(ValueError):
        calibrate(SparsityEstimator(), [decision(8)], [])


def test_estimator_validation():
    with pytest.raises(ConfigError):
        SparsityEstimator(ema_alpha=0.0)
    with pytest.raises(ConfigError):
        SparsityEstimator(bin_edges=(5, 3))
    with pytest.raises(ConfigError):
        SparsityEstimator(default_budget=100)


@given(st.lists(st.tuples(st.sampled_from(range(4, 65, 4)), st.integers(1, 80000)), max_size=60), st.floats(0.01, 1.0))
def test_ema_stays_in_grid_range(obs, alpha):
    est = SparsityEstimator(ema_alpha=alpha)
    est = calibrate(est, [decision(k) for k, _ in obs], [L for _, L in obs])
    assert all(4 <= v <= 64 for v in est.ema_budget)
    assert all(estimate_sparsity(est, L) in est.budget_grid for _, L in obs)


# ------------------------------------------------------------------ weights


def test_constant_table_gives_equal_weights():
    table = synthesize_table(CostModelSpec(c_lin=0, c_attn=0, c_fixed=2))
    w = compute_weights(samples_with_lengths([10, 5000, 60000]), SparsityEstimator(), table)
    assert np.all(w == 2.0)


def test_longer_sample_heavier():
    table = synthesize_table(CostModelSpec())
    w = compute_weights(samples_with_lengths([4000, 9000]), SparsityEstimator(), table)
    assert w[1] > w[0]


def test_weight_uses_estimated_budget():
    table = synthesize_table(CostModelSpec())
    est = calibrate(SparsityEstimator(ema_alpha=1.0), [decision(8)], [30000])
    w = compute_weights(samples_with_lengths([30000]), est, table)[0]
    assert w == table.predict(30000, 8).value_ms
    assert w < table.predict(30000, 32).value_ms


# ------------------------------------------------------------------ bin packing


def test_lpt_trace_and_swap_pass():
    w = [8, 7, 6, 5, 4]
    assert loads(bin_packing(w, 2, improve=False), w) == [13, 17]
    bins = bin_packing(w, 2)
    assert loads(bins, w) == [15, 15]
    assert max(loads(bins, w)) == optimal_max_load(w, 2)


def test_equal_weights_balanced():
    w = [3.0] * 7
    ls = loads(bin_packing(w, 3), w)
    assert max(ls) - min(ls) <= 3.0


def test_n_items_into_n_bins():
    w = [5, 1, 9, 2]
    bins = bin_packing(w, 4)
    assert sorted(len(b) for b in bins) == [1, 1, 1, 1]
    assert max(loads(bins, w)) == 9


def test_ties_go_to_lowest_bin():
    assert bin_packing([1, 1], 2, improve=False) == [[0], [1]]


def test_bin_packing_errors():
    with pytest.raises(ConfigError):
        bin_packing([1, 2], 0)
    with pytest.raises(ConfigError):
        bin_packing([1, 2], 3)
    with pytest.raises(ConfigError):
        bin_packing([1, 2, 3], 2, capacity=1)


@given(st.lists(st.integers(1, 100), min_size=2, max_size=9), st.integers(2, 3))
def test_packing_within_lpt_bound_of_optimum(w, k):
    k = min(k, len(w))
    bins = bin_packing(w, k)
    assert sorted(i for b in bins for i in b) == list(range(len(w)))
    assert max(loads(bins, w)) <= optimal_max_load(w, k) * 4 / 3 + max(w)


@given(st.integers(1, 6), st.integers(0, 10**6))
def test_capacity_respected(per_bin, seed):
    rng = np.random.default_rng(seed)
    w = rng.uniform(1, 100, size=2 * per_bin).tolist()
    bins = bin_packing(w, 2, capacity=per_bin)
    assert [len(b) for b in bins] == [per_bin, per_bin]


# ------------------------------------------------------------------ planning


def test_plan_spec_example_reaches_optimum():
    samples = samples_with_lengths([1, 1, 1, 1])
    w = [10, 1, 9, 2]
    plan = plan_with_weights(samples, w, BatchingConfig(gbs=4, mbs=1, dp=2))
    assert sorted(plan.rank_loads()) == [11, 11]
    assert optimal_max_load(w, 2, cap=2) == 11
    assert all(len(r) == 2 for r in plan.micro_batch_bins)


def test_plan_lbb_uses_lengths():
    samples = samples_with_lengths([10, 1, 9, 2])
    plan = plan_lbb(samples, BatchingConfig(gbs=4, mbs=1, dp=2))
    assert sorted(plan.rank_loads()) == [11, 11]
    assert plan.weights == {0: 10.0, 1: 1.0, 2: 9.0, 3: 2.0}


def test_uniform_lengths_equal_bins():
    samples = samples_with_lengths([500] * 8)
    plan = plan_lbb(samples, BatchingConfig(gbs=8, mbs=2, dp=2))
    assert len(set(plan.rank_loads())) == 1


def test_divisibility_error():
    with pytest.raises(ConfigError, match="divisible"):
        BatchingConfig(gbs=5, mbs=1, dp=2)
    with pytest.raises(ConfigError):
        plan_lbb(samples_with_lengths([1] * 3), BatchingConfig(gbs=4, mbs=1, dp=2))


def _bimodal_batch(seed, gbs=16):
    return generate_samples(LengthDistributionSpec.bimodal(), gbs, seed=seed, num_layers=1)


@given(st.integers(0, 10**6), st.sampled_from([(16, 2, 2), (16, 1, 4), (8, 4, 1), (12, 3, 2)]))
def test_plan_partition_and_shapes(seed, shape):
    gbs, mbs, dp = shape
    cfg = BatchingConfig(gbs=gbs, mbs=mbs, dp=dp)
    batch = _bimodal_batch(seed, gbs)
    table = synthesize_table(CostModelSpec())
    plan = plan_batching(batch, cfg, SparsityEstimator(), table)
    assert sorted(plan.sample_ids()) == [s.id for s in batch]
    assert len(plan.micro_batch_bins) == dp
    for rank, ids in zip(plan.micro_batch_bins, plan.dp_bins):
        assert len(rank) == cfg.micro_batches_per_rank
        assert all(len(mb) == mbs for mb in rank)
        assert sorted(i for mb in rank for i in mb) == sorted(ids)
    for s in batch:
        assert plan.weights[s.id] == table.predict(s.length, 32).value_ms
    again = plan_batching(batch, cfg, SparsityEstimator(), table)
    assert again.micro_batch_bins == plan.micro_batch_bins


def test_sab_equals_lbb_for_linear_table_and_constant_estimator():
    table = synthesize_table(CostModelSpec(c_lin=1e-3, c_attn=0.0, c_fixed=0.0))
    cfg = BatchingConfig(gbs=16, mbs=2, dp=2)
    for seed in range(30):
        batch = _bimodal_batch(seed)
        a = plan_batching(batch, cfg, SparsityEstimator(), table)
        b = plan_lbb(batch, cfg)
        assert a.micro_batch_bins == b.micro_batch_bins


def test_better_than_random_plans():
    table = synthesize_table(CostModelSpec())
    cfg = BatchingConfig(gbs=16, mbs=2, dp=2)
    rng = np.random.default_rng(0)
    ours, rand = [], []
    for seed in range(100):
        batch = _bimodal_batch(seed)
        plan = plan_batching(batch, cfg, SparsityEstimator(), table)
        ls = plan.rank_loads()
        ours.append(max(ls) / np.mean(ls))
        perm = rng.permutation(16)
        rl = [sum(plan.weights[batch[i].id] for i in perm[:8]), sum(plan.weights[batch[i].id] for i in perm[8:])]
        rand.append(max(rl) / np.mean(rl))
    assert np.mean(ours) <= np.mean(rand)


def test_plan_json_round_trip(tmp_path):
    batch = _bimodal_batch(1)
    plan = plan_lbb(batch, BatchingConfig())
    path = tmp_path / "plan.json"
    plan.save(path)
    import json

    back = PackingPlan.from_json(json.loads(path.read_text()))
    assert back.micro_batch_bins == plan.micro_batch_bins
    assert back.dp_bins == plan.dp_bins
    assert back.weights == plan.weights


def test_in_order_plan_is_stream_order():
    batch = samples_with_lengths(range(1, 9))
    plan = plan_in_order(batch, BatchingConfig(gbs=8, mbs=2, dp=2))
    assert plan.micro_batch_bins == [[[0, 1], [2, 3]], [[4, 5], [6, 7]]]
