import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from moe_placer.clustering import ClusterModel, GroupMap, assign_clusters_to_groups, cluster_matrix
from moe_placer.placement import (
    PlacementConfigError,
    PlacementInfeasibleError,
    PlacementVerificationError,
    Topology,
    aggregate_usage,
    balance_and_verify,
    data_based_placement,
    eplb_placement,
    format_placement,
    group_loads,
    linear_placement,
    parse_placement,
    phase1_unique_distribution,
    phase2_redundant_addition,
    route_request,
    verify_placement,
)
from moe_placer.trace import ActivationMatrix, ModelConfig, SyntheticTraceSpec, build_activation_matrix, \
    generate_synthetic_trace, preferred_expert_sets


def raw(rows, ids=None):
    rows = np.asarray(rows, dtype=float)
    return ActivationMatrix(rows, ["d"] * len(rows), np.arange(len(rows)) if ids is None else ids)


def cm(labels, K, ids=None):
    return ClusterModel(K, np.asarray(labels), np.zeros((K, 1)), 0.0, 0, (),
                        np.arange(len(labels)) if ids is None else np.asarray(ids))


# -- usage aggregation ----------------------------------------------------------

def test_usage_one_cluster_one_group():
    m = raw([[1, 2, 0], [3, 0, 1]])
    U = aggregate_usage(GroupMap(1, 1, {0: (0,)}), m, cm([0, 0], 1), 1)
    np.testing.assert_array_equal(U, [[4, 2, 1]])


def test_usage_replicated_cluster():
    m = raw([[1, 2, 0], [3, 0, 1]])
    U = aggregate_usage(GroupMap(1, 2, {0: (0, 1)}), m, cm([0, 0], 1), 2)
    np.testing.assert_array_equal(U[0], U[1])
    np.testing.assert_array_equal(U[0], [4, 2, 1])


def test_usage_two_clusters_hand_sums():
    m = raw([[1, 0, 2], [0, 4, 0], [3, 1, 0], [0, 0, 5]])
    U = aggregate_usage(GroupMap(2, 2, {0: (1,), 1: (0,)}), m, cm([0, 1, 0, 1], 2), 2)
    # cluster0 = rows 0,2 -> [4,1,2] on group 1; cluster1 = rows 1,3 -> [0,4,5] on group 0
    np.testing.assert_array_equal(U, [[0, 4, 5], [4, 1, 2]])


# -- phase 1 / phase 2 ------------------------------------------------------------

def test_phase1_hand_trace():
    U = [[9, 1, 8, 0], [2, 7, 0, 6]]
    assert phase1_unique_distribution(U) == [[0, 2], [1, 3]]


def test_phase1_all_zero_usage_deals_in_order():
    assert phase1_unique_distribution(np.zeros((2, 4))) == [[0, 1], [2, 3]]
    groups = phase1_unique_distribution(np.zeros((3, 9)))
    assert [len(g) for g in groups] == [3, 3, 3]
    assert sorted(sum(groups, [])) == list(range(9))


def test_phase1_uneven_capacity():
    groups = phase1_unique_distribution(np.random.default_rng(0).random((2, 5)))
    assert sorted(len(g) for g in groups) == [2, 3]


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 12), st.integers(0, 40), st.integers(0, 10**6))
def test_phase1_places_every_expert_once(D, extra, seed):
    E = D + extra
    U = np.random.default_rng(seed).integers(0, 3, size=(D, E)).astype(float)
    groups = phase1_unique_distribution(U)
    flat = sum(groups, [])
    assert sorted(flat) == list(range(E))
    assert max(len(g) for g in groups) <= -(-E // D)


def test_phase2_no_change_when_full():
    assert phase2_redundant_addition([[0, 1], [2, 3]], np.ones((2, 4)), 2) == [[0, 1], [2, 3]]


def test_phase2_hand_trace():
    out = phase2_redundant_addition([[0, 2]], np.array([[9, 1, 8, 5]]), 3)
    assert out == [[0, 2, 3]]


def test_phase2_full_replication():
    out = phase2_redundant_addition([[0], [1], [2]], np.random.default_rng(1).random((3, 3)), 3)
    assert all(sorted(g) == [0, 1, 2] for g in out)


def test_phase2_infeasible():
    with pytest.raises(PlacementInfeasibleError):
        phase2_redundant_addition([[0]], np.ones((1, 2)), 3)


# -- balancing --------------------------------------------------------------------

def test_balance_keeps_valid_groups():
    p = balance_and_verify([[0, 1], [2, 3]], 4, 2, seed=0)
    assert p.groups == ((0, 1), (2, 3))


def test_balance_removes_duplicate_from_oversized():
    groups = [[0, 1, 4], [2, 3], [4, 5, 0, 1]]  # group 2 oversized; 0, 1, 4 duplicated elsewhere
    U = np.array([[0] * 6, [0] * 6, [6, 1, 0, 0, 9, 9]], dtype=float)
    p = balance_and_verify(groups, 6, 3, seed=0, U=U)
    verify_placement(p.groups, 6, 3)
    # lowest-usage duplicated expert (1) dropped from group 2
    assert set(p.groups[2]) == {4, 5, 0}


def test_balance_inserts_missing_expert():
    p = balance_and_verify([[0, 1], [2]], 4, 2, seed=3)
    assert 3 in p.groups[1]
    verify_placement(p.groups, 4, 2)


def test_balance_moves_sole_copy_out_of_oversized_group():
    p = balance_and_verify([[0, 1, 2], [3]], 4, 2, seed=0)
    verify_placement(p.groups, 4, 2)


def test_verify_rejects_bad_groups():
    with pytest.raises(PlacementVerificationError):
        verify_placement([[0, 1], [1, 2]], 4, 2)
    with pytest.raises(PlacementVerificationError):
        verify_placement([[0, 0], [1, 2]], 3, 2)


# -- baselines ----------------------------------------------------------------------

def test_linear():
    assert linear_placement(4, 2).groups == ((0, 1), (2, 3))
    p = linear_placement(256, 8)
    assert all(p.groups[d] == tuple(range(32 * d, 32 * d + 32)) for d in range(8))
    assert linear_placement(6, 1).groups == (tuple(range(6)),)
    with pytest.raises(PlacementConfigError):
        linear_placement(5, 2)


def test_eplb_hand_trace():
    p = eplb_placement([8, 6, 5, 3], 4, 2)
    assert sorted(p.groups[0]) == [0, 3] and sorted(p.groups[1]) == [1, 2]
    np.testing.assert_array_equal(group_loads(p, [8, 6, 5, 3]), [11, 11])


def test_eplb_equal_loads_balanced():
    p = eplb_placement(np.ones(8), 8, 4)
    np.testing.assert_array_equal(group_loads(p, np.ones(8)), [2, 2, 2, 2])


def test_eplb_skew_reaches_balanced_optimum():
    loads = np.array([10, 1, 1, 1, 1, 1, 1, 1], dtype=float)
    ep = group_loads(eplb_placement(loads, 8, 2), loads)
    lin = group_loads(linear_placement(8, 2), loads)
    assert ep.max() / ep.mean() <= lin.max() / lin.mean()
    # brute force over every equal-size split
    best = min(max(loads[list(c)].sum(), loads.sum() - loads[list(c)].sum())
               for c in itertools.combinations(range(8), 4))
    assert ep.max() == best


def test_eplb_improves_on_linear_when_heavy_experts_are_adjacent():
    loads = np.array([5, 5, 1, 1], dtype=float)
    ep = group_loads(eplb_placement(loads, 4, 2), loads)
    lin = group_loads(linear_placement(4, 2), loads)
    assert ep.max() < lin.max()


def test_eplb_not_divisible():
    with pytest.raises(PlacementConfigError):
        eplb_placement(np.ones(5), 5, 2)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 10**6))
def test_eplb_spread_bounded_by_largest_load(D, per, seed):
    E = D * per
    loads = np.random.default_rng(seed).exponential(size=E)
    totals = group_loads(eplb_placement(loads, E, D), loads)
    assert totals.max() - totals.min() <= loads.max() + 1e-9


# -- data-based end to end ---------------------------------------------------------

def _random_instance(rng):
    while True:
        E = int(rng.integers(8, 257))
        D = int(rng.integers(2, 17))
        R = int(rng.choice([0, D, 2 * D]))
        if D <= E and (E + R) % D == 0 and (E + R) // D <= E:
            return E, D, R


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 10**6))
def test_every_strategy_satisfies_coverage_and_size(seed):
    rng = np.random.default_rng(seed)
    E, D, R = _random_instance(rng)
    U = rng.integers(0, 5, size=(D, E)).astype(float) * (rng.random((D, E)) < 0.5)
    M = (E + R) // D
    for p in (data_based_placement(U, R, seed), linear_placement(E, D, R),
              eplb_placement(U.sum(0), E, D, R)):
        verify_placement(p.groups, E, M)
        assert p.group_size == M and p.redundancy == R


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6))
def test_redundancy_monotonicity(seed):
    rng = np.random.default_rng(seed)
    D = int(rng.integers(2, 9))
    E = D * int(rng.integers(2, 9))
    U = rng.integers(0, 50, size=(D, E)).astype(float)
    small = data_based_placement(U, 0, seed)
    big = data_based_placement(U, D, seed)
    for a, b in zip(small.groups, big.groups):
        assert set(a) <= set(b)


def _affinity_one_setup(D=4):
    model = ModelConfig(num_experts_per_layer=32, top_k=2, num_moe_layers=1)
    spec = SyntheticTraceSpec(num_domains=D, requests_per_domain=40, preferred_experts_per_domain=32 // D,
                              affinity=1.0, decode_tokens_mean=8, seed=4)
    recs = generate_synthetic_trace(spec, model)
    m = build_activation_matrix(recs, 0, "decode", 32)
    model_ = cluster_matrix(m, D, seed=0)
    gm = assign_clusters_to_groups(model_, m, D)
    return spec, m, model_, gm


def test_affinity_one_domains_land_in_their_group():
    spec, m, model_, gm = _affinity_one_setup()
    p = data_based_placement(aggregate_usage(gm, m, model_, 4))
    prefs = preferred_expert_sets(spec, 32)
    names = spec.names()
    for d, name in enumerate(names):
        rid = int(m.request_ids[m.row_labels.index(name)])
        (group,) = route_request(rid, model_, gm)
        assert set(prefs[d].tolist()) == set(p.groups[group])


def test_route_request():
    gm = GroupMap(2, 2, {0: (0,), 1: (1,)})
    model_ = cm([1, 0, 1], 2, ids=[10, 11, 12])
    assert route_request(10, model_, gm) == (1,)
    assert route_request(11, model_, gm) == (0,)
    with pytest.raises(KeyError):
        route_request(99, model_, gm)
    case2 = GroupMap(2, 5, {0: (0, 2, 4), 1: (1, 3)})
    assert route_request(11, model_, case2) == (0, 2, 4)


def test_route_same_domain_same_groups():
    _, m, model_, gm = _affinity_one_setup()
    for name in set(m.row_labels):
        routes = {route_request(int(r), model_, gm) for r, l in zip(m.request_ids, m.row_labels) if l == name}
        assert len(routes) == 1


def test_placement_file_round_trip():
    p = eplb_placement(np.arange(12, dtype=float), 12, 3, redundancy=3)
    text = format_placement(p)
    assert text.splitlines()[4].startswith("0: ")
    assert parse_placement(text) == p


def test_topology_defaults_and_scheme():
    t = Topology()
    assert t.group_to_node == (0, 0, 0, 0, 1, 1, 1, 1)
    assert t.violations() == []
    big = Topology.from_scheme("DP8TP8->EP64", nodes=8)
    assert (big.dp, big.tp, big.ep, big.tp_exp, big.gpus_per_node) == (8, 8, 64, 1, 8)
    assert big.violations() == []
    assert Topology.from_scheme("DP8TP8→EP32TP2", nodes=8).tp_exp == 2
    assert Topology(dp=4, ep=2, nodes=2, gpus_per_node=2).violations()
