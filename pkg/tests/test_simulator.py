import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from moe_placer.clustering import GroupMap
from moe_placer.placement import Placement, Topology, linear_placement
from moe_placer.simulator import (
    BatchAssignment,
    CostModelParams,
    CoverageError,
    SimulationInputError,
    compare_strategies,
    destination_table,
    latency_breakdown_report,
    padded_all_to_all_time,
    simulate_layer,
    traffic_matrix,
    unpadded_all_to_all_time,
)

TWO_NODES = Topology(dp=2, ep=2, nodes=2, gpus_per_node=1)
COST = CostModelParams(hidden_dim=4096, bytes_per_element=1, inter_node_bandwidth=1e9,
                       intra_node_bandwidth=8e9, expert_time_per_token=1e-6, fixed_layer_overhead=1e-5)


def test_local_routing_has_no_inter_node_bytes():
    p = linear_placement(4, 2)
    counts = np.array([[3, 2, 0, 0], [0, 0, 1, 5]])
    r = simulate_layer(BatchAssignment([0, 1], counts), p, TWO_NODES, COST)
    assert r.inter_node_bytes == 0
    assert r.intra_node_bytes == 11 * 4096


def test_single_cross_node_token():
    p = linear_placement(4, 2)
    r = simulate_layer(BatchAssignment([0], [[0, 0, 1, 0]]), p, TWO_NODES, COST)
    assert r.inter_node_bytes == 4096
    assert r.dispatch_time == pytest.approx(4096 / 1e9)
    assert r.combine_time == pytest.approx(4096 / 1e9)
    assert r.layer_time == pytest.approx(r.dispatch_time + r.combine_time + 1e-6 + 1e-5)


def test_uniform_routing_half_crosses_nodes():
    rng = np.random.default_rng(0)
    E, n = 8, 1000
    counts = np.zeros((n, E))
    for i in range(n):
        for _ in range(100):
            counts[i, rng.choice(E, 2, replace=False)] += 1
    r = simulate_layer(BatchAssignment(np.arange(n) % 2, counts), linear_placement(E, 2), TWO_NODES, COST)
    assert counts.sum() >= 1e5
    assert r.inter_node_bytes / r.total_bytes == pytest.approx(0.5, abs=0.02 * 0.5)


def test_missing_expert_is_coverage_error():
    broken = Placement(((0, 1), (1, 2)), 4, 0, 2, "linear")
    with pytest.raises(CoverageError):
        destination_table(broken, TWO_NODES)


def test_redundant_copy_prefers_same_node():
    topo = Topology(dp=4, ep=4, nodes=2, gpus_per_node=2)
    p = Placement(((0, 1), (2, 3), (4, 0), (5, 6)), 7, 1, 2, "data_based")
    dest = destination_table(p, topo)
    assert dest[0, 0] == 0  # own group
    assert dest[1, 0] == 0  # same node as group 1
    assert dest[3, 0] == 2  # node 1 copy for group 3


def test_padded_equal_payloads():
    t = Topology(dp=4, ep=4, nodes=2, gpus_per_node=2)
    pay = [5e6] * 4
    assert padded_all_to_all_time(pay, t, COST) == unpadded_all_to_all_time(pay, t, COST)


def test_padded_one_rank_double():
    t = Topology(dp=4, ep=4, nodes=2, gpus_per_node=2)
    balanced = padded_all_to_all_time([1e6] * 4, t, COST)
    assert padded_all_to_all_time([2e6, 1e6, 1e6, 1e6], t, COST) == pytest.approx(2 * balanced)


def test_padded_max_arithmetic():
    t = Topology(dp=4, ep=4, nodes=2, gpus_per_node=2)
    mb = 1 << 20
    assert padded_all_to_all_time([mb, 2 * mb, 3 * mb, 4 * mb], t, COST) == 4 * mb / COST.inter_node_bandwidth


def test_single_node_uses_intra_bandwidth():
    t = Topology(dp=2, ep=2, nodes=1, gpus_per_node=2)
    assert padded_all_to_all_time([8e6, 8e6], t, COST) == 8e6 / 8e9


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(0, 1e9), min_size=2, max_size=16))
def test_padded_at_least_unpadded(pay):
    t = Topology(dp=len(pay), ep=len(pay), nodes=1, gpus_per_node=len(pay))
    padded, unpadded = padded_all_to_all_time(pay, t, COST), unpadded_all_to_all_time(pay, t, COST)
    assert padded >= unpadded * (1 - 1e-12)
    if len(set(pay)) == 1:
        assert padded == pytest.approx(unpadded, rel=1e-12)


def _random_batch(rng, n=40, E=16, D=4):
    counts = rng.integers(0, 5, size=(n, E)).astype(float)
    return BatchAssignment(rng.integers(0, D, size=n), counts)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6))
def test_volume_conservation(seed):
    rng = np.random.default_rng(seed)
    topo = Topology(dp=4, ep=4, nodes=2, gpus_per_node=2)
    batch = _random_batch(rng)
    r = simulate_layer(batch, linear_placement(16, 4), topo, COST)
    assert r.recv_tokens.sum() == batch.counts.sum()
    assert r.inter_node_bytes + r.intra_node_bytes == pytest.approx(batch.counts.sum() * COST.token_bytes)
    assert r.layer_time == pytest.approx(r.dispatch_time + r.expert_compute_time + r.combine_time
                                         + COST.fixed_layer_overhead)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6), st.integers(0, 3))
def test_locality_monotonicity(seed, source):
    """Moving an expert onto the node of all its demand never raises inter-node bytes."""
    rng = np.random.default_rng(seed)
    topo = Topology(dp=4, ep=4, nodes=2, gpus_per_node=2)
    batch = _random_batch(rng)
    base = linear_placement(16, 4)
    e = int(rng.integers(16))
    batch.counts[batch.source_groups != source, e] = 0
    before = simulate_layer(batch, base, topo, COST).inter_node_bytes
    groups = [[x for x in g if x != e] for g in base.groups]
    groups[source].append(e)
    moved = Placement(tuple(map(tuple, groups)), 16, 0, 4, "linear")
    after = simulate_layer(batch, moved, topo, COST).inter_node_bytes
    assert after <= before


def test_traffic_matrix_hand():
    dest = np.array([[0, 1], [0, 1]])
    T = traffic_matrix(BatchAssignment([0, 1, 1], [[2, 1], [0, 3], [4, 0]]), dest)
    np.testing.assert_array_equal(T, [[2, 1], [4, 3]])


def _comparison(seed=0, batches=30):
    rng = np.random.default_rng(seed)
    R, E = 200, 8
    counts = rng.integers(0, 6, size=(R, E)).astype(float)
    counts[:, 0] += 1
    clusters = rng.integers(0, 2, size=R)
    gm = GroupMap(2, 2, {0: (0,), 1: (1,)})
    placements = {"linear": linear_placement(E, 2), "data_based": linear_placement(E, 2)}
    return compare_strategies(counts, clusters, gm, placements, TWO_NODES, COST, batches, 32, seed)


def test_linear_normalized_median_is_one_exactly():
    table = _comparison()
    summary = {r["strategy"]: r for r in table.summary()}
    assert summary["linear"]["normalized_median"] == 1.0


def test_comparison_deterministic():
    a, b = _comparison(3), _comparison(3)
    assert a.rows == b.rows


def test_comparison_empty_trace():
    with pytest.raises(SimulationInputError):
        compare_strategies(np.zeros((0, 4)), None, None, {"linear": linear_placement(4, 2)}, TWO_NODES,
                           COST, 1, 1)


def test_breakdown_fractions_sum_to_one():
    for row in latency_breakdown_report(_comparison()):
        total = row["dispatch_fraction"] + row["compute_fraction"] + row["combine_fraction"] \
            + row["overhead_fraction"]
        assert total == pytest.approx(1.0, abs=1e-9)


def test_zero_inter_node_dispatch_at_intra_bandwidth():
    topo = Topology(dp=2, ep=2, nodes=1, gpus_per_node=2)
    r = simulate_layer(BatchAssignment([0, 1], [[0, 0, 2, 0], [2, 0, 0, 0]]), linear_placement(4, 2), topo, COST)
    assert r.inter_node_bytes == 0
    assert r.dispatch_time == 2 * 4096 / COST.intra_node_bandwidth


def test_smaller_max_payload_means_smaller_dispatch():
    p = linear_placement(4, 2)
    heavy = simulate_layer(BatchAssignment([0, 1], [[0, 0, 4, 0], [1, 0, 0, 0]]), p, TWO_NODES, COST)
    light = simulate_layer(BatchAssignment([0, 1], [[0, 0, 2, 0], [1, 0, 0, 0]]), p, TWO_NODES, COST)
    assert light.dispatch_time < heavy.dispatch_time
