import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sparsebalance.errors import ConfigError, PlanError
from sparsebalance.sab import BatchingConfig, PackingPlan, plan_in_order
from sparsebalance.workload import (
    ConcentrationSpec,
    LengthDistributionSpec,
    MicroBatch,
    RoutingProfile,
    Sample,
    assemble_global_batch,
    generate_samples,
    load_histogram,
    num_blocks,
    sample_lengths,
)


def test_fixed_distribution_gives_constant_lengths():
    samples = generate_samples(LengthDistributionSpec.fixed(8192), 3, seed=1, num_layers=2)
    assert [s.length for s in samples] == [8192] * 3


def test_bimodal_leaves_the_middle_sparse():
    lengths = sample_lengths(LengthDistributionSpec.bimodal(), 10000, np.random.default_rng(0))
    middle = np.mean((lengths >= 4096) & (lengths <= 16384))
    assert middle < 0.15
    assert np.mean(lengths < 4096) > 0.3 and np.mean(lengths > 16384) > 0.3


@pytest.mark.parametrize(
    "spec",
    [LengthDistributionSpec.bimodal(), LengthDistributionSpec.long_tail(), LengthDistributionSpec.histogram([(100, 200, 1), (5000, 6000, 3)])],
)
def test_lengths_stay_within_bounds(spec):
    lengths = sample_lengths(spec, 20000, np.random.default_rng(3))
    assert lengths.min() >= spec.min_length and lengths.max() <= spec.max_length


def test_long_tail_spans_8k_to_72k():
    lengths = sample_lengths(LengthDistributionSpec.long_tail(), 20000, np.random.default_rng(0))
    assert lengths.min() >= 8192 and lengths.max() <= 73728
    # heavy tail: the median sits far below the midpoint of the range
    assert np.median(lengths) < 20000 and lengths.max() > 60000


def test_concentrated_profile_reaches_90_percent_near_ten_blocks():
    # 26K tokens = 102 blocks; a small concentration is the "concentrated" regime
    conc = ConcentrationSpec(median_alpha=0.03, seq_sigma=0.0, layer_sigma=0.0)
    samples = generate_samples(LengthDistributionSpec.fixed(26 * 1024), 20, conc, seed=0, num_layers=1)
    hits = [s.routing_profiles[0].coverage(10) >= 0.9 for s in samples]
    assert any(hits)
    assert np.median([s.routing_profiles[0].budget_for_coverage(0.9) for s in samples]) <= 12


def test_default_concentration_is_heterogeneous():
    samples = generate_samples(LengthDistributionSpec.fixed(16384), 1000, seed=0, num_layers=1)
    k90 = np.array([s.routing_profiles[0].budget_for_coverage(0.9) for s in samples], dtype=float)
    assert k90.std() / k90.mean() > 0.2


def test_layers_differ_within_a_sequence():
    s = generate_samples(LengthDistributionSpec.fixed(16384), 1, seed=4, num_layers=36)[0]
    k90 = {p.budget_for_coverage(0.9) for p in s.routing_profiles}
    assert len(k90) > 5


def test_generation_is_reproducible():
    a = generate_samples(LengthDistributionSpec.bimodal(), 8, seed=11, num_layers=3)
    b = generate_samples(LengthDistributionSpec.bimodal(), 8, seed=11, num_layers=3)
    for x, y in zip(a, b):
        assert x.length == y.length
        assert x.score_matrix.tobytes() == y.score_matrix.tobytes()
    c = generate_samples(LengthDistributionSpec.bimodal(), 8, seed=12, num_layers=3)
    assert [s.length for s in c] != [s.length for s in a]


@given(st.integers(0, 2**31 - 1), st.integers(1, 40000))
def test_profile_invariants(seed, length):
    s = generate_samples(LengthDistributionSpec.fixed(length), 1, seed=seed, num_layers=2)[0]
    for prof in s.routing_profiles:
        r = prof.scores
        assert r.size == num_blocks(length)
        assert abs(r.sum() - 1.0) <= 1e-9
        assert np.all(np.diff(r) <= 0)
        cov = [prof.coverage(k) for k in range(r.size + 2)]
        assert cov[0] == 0.0 and cov[r.size] == 1.0 and cov[-1] == 1.0
        assert all(b >= a for a, b in zip(cov, cov[1:]))


def test_routing_profile_from_raw_normalizes_and_sorts():
    p = RoutingProfile.from_raw([1, 3, 2, 4])
    assert p.scores.tolist() == [0.4, 0.3, 0.2, 0.1]
    with pytest.raises(ConfigError):
        RoutingProfile.from_raw([])
    with pytest.raises(ConfigError):
        RoutingProfile.from_raw([-1, 2])


def test_micro_batch_profile_is_token_weighted():
    a = Sample(0, 256, (RoutingProfile.from_raw([1.0]),))
    b = Sample(1, 768, (RoutingProfile.from_raw([0.5, 0.3, 0.2]),))
    mb = MicroBatch((a, b))
    assert mb.length_descriptor == 1024
    # weights 1/4 and 3/4: block scores 0.25+0.375, 0.225, 0.15
    assert np.allclose(mb.score_matrix[0], [0.625, 0.225, 0.15])
    assert mb.coverage_matrix[0, -1] == 1.0


def test_micro_batch_rejects_empty_and_mismatched_layers():
    with pytest.raises(ConfigError):
        MicroBatch(())
    a = Sample(0, 256, (RoutingProfile.from_raw([1.0]),))
    b = Sample(1, 256, (RoutingProfile.from_raw([1.0]),) * 2)
    with pytest.raises(ConfigError):
        MicroBatch((a, b))


@pytest.mark.parametrize(
    "bad, field",
    [
        ({"kind": "bimodal", "weights": [-1, 2]}, "weights"),
        ({"kind": "bimodal", "sigmas": [0, 1]}, "sigmas"),
        ({"kind": "long_tail", "shape": -2}, "shape"),
        ({"kind": "histogram_file", "bins": []}, "bins"),
        ({"kind": "histogram_file", "bins": [[0, 10, 0]]}, "frequency"),
        ({"kind": "nope"}, "distribution.kind"),
    ],
)
def test_invalid_distribution_names_field(bad, field):
    with pytest.raises(ConfigError) as err:
        LengthDistributionSpec.from_dict(bad)
    assert err.value.field == field


def test_distribution_round_trip():
    for spec in (LengthDistributionSpec.bimodal(), LengthDistributionSpec.long_tail(), LengthDistributionSpec.fixed(100)):
        assert LengthDistributionSpec.from_dict(spec.to_dict()) == spec


def test_histogram_single_bin(tmp_path):
    path = tmp_path / "h.txt"
    path.write_text("# lo,hi,freq\n1000,2000,1\n")
    spec = load_histogram(path)
    lengths = sample_lengths(spec, 5000, np.random.default_rng(0))
    assert lengths.min() >= 1000 and lengths.max() < 2000


def test_histogram_equal_bins_split_evenly(tmp_path):
    path = tmp_path / "h.txt"
    path.write_text("100,200,5\n\n1000,1100,5  # second\n")
    lengths = sample_lengths(load_histogram(path), 100_000, np.random.default_rng(0))
    share = np.mean(lengths < 200)
    assert abs(share - 0.5) <= 0.03


@pytest.mark.parametrize("body, line", [("1,2,3\nfoo,2,3\n", 2), ("1,2\n", 1), ("10,5,1\n", 1)])
def test_histogram_errors_name_the_line(tmp_path, body, line):
    path = tmp_path / "h.txt"
    path.write_text(body)
    with pytest.raises(ConfigError) as err:
        load_histogram(path)
    assert f":{line}:" in str(err.value)


def test_histogram_empty(tmp_path):
    path = tmp_path / "h.txt"
    path.write_text("# nothing\n")
    with pytest.raises(ConfigError, match="empty"):
        load_histogram(path)


def _samples(n, layers=1):
    return generate_samples(LengthDistributionSpec.bimodal(), n, seed=0, num_layers=layers)


def test_assemble_singletons_in_plan_order():
    samples = _samples(4)
    plan = plan_in_order(samples, BatchingConfig(gbs=4, mbs=1, dp=1))
    gb = assemble_global_batch(samples, plan, 0, base_budget=32)
    assert [mb.sample_ids for mb in gb.micro_batches] == [[0], [1], [2], [3]]
    assert gb.base_budgets == (32,) * 4


def test_assemble_two_ranks_partitions_input():
    samples = _samples(16)
    plan = plan_in_order(samples, BatchingConfig(gbs=16, mbs=2, dp=2))
    ranks = [assemble_global_batch(samples, plan, r) for r in range(2)]
    ids = [i for gb in ranks for mb in gb.micro_batches for i in mb.sample_ids]
    assert sorted(ids) == list(range(16))
    assert all(len(gb) == 4 and all(len(mb.samples) == 2 for mb in gb.micro_batches) for gb in ranks)
    assert not set(ranks[0].micro_batches[0].sample_ids) & {i for mb in ranks[1].micro_batches for i in mb.sample_ids}


def test_assemble_errors():
    samples = _samples(4)
    with pytest.raises(PlanError, match="missing"):
        assemble_global_batch(samples, PackingPlan([[0, 1, 2]], [[[0], [1], [2]]]), 0)
    with pytest.raises(PlanError, match="more than once"):
        assemble_global_batch(samples, PackingPlan([[0, 1, 2, 3, 3]], [[[0], [1], [2], [3], [3]]]), 0)
    plan = plan_in_order(samples, BatchingConfig(gbs=4, mbs=1, dp=1))
    with pytest.raises(PlanError, match="out of range"):
        assemble_global_batch(samples, plan, 1)
