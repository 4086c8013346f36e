"""Trace-driven decode MoE layer simulation.

For each batch, requests are pinned to a source EP group, every routed token
is dispatched to a group holding its expert, and the layer time is modeled as

    dispatch (padded all-to-all) + straggler expert compute + combine + overhead.

Communication volumes are reported split into inter-node and intra-node bytes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .clustering import GroupMap
from .placement import Placement, Topology


class CoverageError(ValueError):
    pass


class SimulationInputError(ValueError):
    pass


@dataclass(frozen=True)
class CostModelParams:
    hidden_dim: int = 7168
    bytes_per_element: int = 1
    inter_node_bandwidth: float = 50e9
    intra_node_bandwidth: float = 400e9
    expert_time_per_token: float = 3e-7
    fixed_layer_overhead: float = 50e-6

    def violations(self) -> list[str]:
        out = []
        if self.hidden_dim < 1 or self.bytes_per_element < 1:
            out.append("cost: hidden_dim and bytes_per_element must be >= 1")
        if self.inter_node_bandwidth <= 0 or self.intra_node_bandwidth <= 0:
            out.append("cost: bandwidths must be positive")
        elif self.intra_node_bandwidth < self.inter_node_bandwidth:
            out.append("cost: intra_node_bandwidth must be >= inter_node_bandwidth")
        if self.expert_time_per_token <= 0:
            out.append("cost.expert_time_per_token: must be positive")
        if self.fixed_layer_overhead < 0:
            out.append("cost.fixed_layer_overhead: must be non-negative")
        return out

    @property
    def token_bytes(self) -> int:
        return self.hidden_dim * self.bytes_per_element


@dataclass
class BatchAssignment:
    source_groups: np.ndarray  # [n] EP group each request runs on
    counts: np.ndarray  # [n, E] decode tokens per expert for the simulated layer

    def __post_init__(self):
        self.source_groups = np.asarray(self.source_groups, dtype=np.int64)
        self.counts = np.asarray(self.counts, dtype=np.float64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.source_groups.shape[0]:
            raise SimulationInputError("counts must be [n, E] with one source group per request")


@dataclass(frozen=True)
class LayerSimResult:
    inter_node_bytes: float
    intra_node_bytes: float
    dispatch_time: float
    expert_compute_time: float
    combine_time: float
    layer_time: float
    send_payload_bytes: np.ndarray  # per EP rank, bytes sent off-rank during dispatch
    recv_tokens: np.ndarray  # per EP rank, tokens processed by its experts

    @property
    def total_bytes(self) -> float:
        return self.inter_node_bytes + self.intra_node_bytes


def destination_table(placement: Placement, topology: Topology) -> np.ndarray:
    """``dest[g, e]``: group serving expert e for a request on group g.

    Among the groups holding e, prefer one on g's node (g itself first), then
    the lowest group id.
    """
    D, E = placement.num_groups, placement.num_experts
    if topology.num_groups != D:
        raise SimulationInputError(f"placement has {D} groups, topology has {topology.num_groups} EP groups")
    nodes = topology.node_array()
    holders = placement.holders()
    dest = np.empty((D, E), dtype=np.int64)
    for e, hs in enumerate(holders):
        if not hs:
            raise CoverageError(f"expert {e} is not held by any group")
        for g in range(D):
            dest[g, e] = min(hs, key=lambda h: (h != g, nodes[h] != nodes[g], h))
    return dest


def padded_all_to_all_time(per_rank_payload_bytes, topology: Topology, cost: CostModelParams,
                           crosses_nodes: bool | None = None) -> float:
    """All-to-all time when every rank pads its payload to the largest one.

    Bandwidth is the inter-node figure if traffic crosses nodes (by default:
    if the topology spans more than one node), else the intra-node figure.
    """
    payload = np.asarray(per_rank_payload_bytes, dtype=np.float64)
    if crosses_nodes is None:
        crosses_nodes = topology.nodes > 1
    bw = cost.inter_node_bandwidth if crosses_nodes else cost.intra_node_bandwidth
    return float(payload.max(initial=0.0)) / topology.tp_exp / bw


def unpadded_all_to_all_time(per_rank_payload_bytes, topology: Topology, cost: CostModelParams,
                             crosses_nodes: bool | None = None) -> float:
    payload = np.asarray(per_rank_payload_bytes, dtype=np.float64)
    if crosses_nodes is None:
        crosses_nodes = topology.nodes > 1
    bw = cost.inter_node_bandwidth if crosses_nodes else cost.intra_node_bandwidth
    return float(payload.sum()) / payload.size / topology.tp_exp / bw


def traffic_matrix(batch: BatchAssignment, dest: np.ndarray) -> np.ndarray:
    """Tokens moved from source group (row) to destination group (column)."""
    D, E = dest.shape
    if batch.counts.shape[1] != E:
        raise SimulationInputError(f"batch has {batch.counts.shape[1]} experts, placement has {E}")
    per_source = np.zeros((D, E))
    np.add.at(per_source, batch.source_groups, batch.counts)
    T = np.zeros((D, D))
    for g in range(D):
        T[g] = np.bincount(dest[g], weights=per_source[g], minlength=D)
    return T


def simulate_layer(batch: BatchAssignment, placement: Placement, topology: Topology,
                   cost: CostModelParams, dest: np.ndarray | None = None) -> LayerSimResult:
    if dest is None:
        dest = destination_table(placement, topology)
    T = traffic_matrix(batch, dest)
    nodes = topology.node_array()
    cross = nodes[:, None] != nodes[None, :]
    tb = cost.token_bytes
    inter = float(T[cross].sum()) * tb
    intra = float(T[~cross].sum()) * tb
    off_rank = T * tb
    np.fill_diagonal(off_rank, 0.0)
    send = off_rank.sum(axis=1)
    recv = off_rank.sum(axis=0)
    crosses = inter > 0
    dispatch = padded_all_to_all_time(send, topology, cost, crosses)
    combine = padded_all_to_all_time(recv, topology, cost, crosses)
    tokens_per_group = T.sum(axis=0)
    compute = cost.expert_time_per_token * float(tokens_per_group.max(initial=0.0))
    return LayerSimResult(
        inter_node_bytes=inter,
        intra_node_bytes=intra,
        dispatch_time=dispatch,
        expert_compute_time=compute,
        combine_time=combine,
        layer_time=dispatch + compute + combine + cost.fixed_layer_overhead,
        send_payload_bytes=send,
        recv_tokens=tokens_per_group,
    )


# -- strategy comparison ------------------------------------------------------


@dataclass(frozen=True)
class BatchRow:
    batch: int
    strategy: str
    inter_node_bytes: float
    intra_node_bytes: float
    dispatch_s: float
    compute_s: float
    combine_s: float
    layer_s: float
    normalized: float


@dataclass
class ComparisonTable:
    rows: list[BatchRow]
    linear_median: float
    strategies: list[str] = field(default_factory=list)
    fixed_layer_overhead: float = 0.0

    def column(self, strategy: str, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows if r.strategy == strategy])

    def summary(self) -> list[dict]:
        out = []
        for s in self.strategies:
            inter = self.column(s, "inter_node_bytes")
            q1, med, q3 = np.percentile(inter, [25, 50, 75])
            scale = self.linear_median if self.linear_median > 0 else np.nan
            out.append({
                "strategy": s,
                "batches": int(inter.size),
                "inter_node_bytes_median": float(med),
                "normalized_median": float(med / scale),
                "normalized_q1": float(q1 / scale),
                "normalized_q3": float(q3 / scale),
                "dispatch_s_median": float(np.median(self.column(s, "dispatch_s"))),
                "compute_s_median": float(np.median(self.column(s, "compute_s"))),
                "combine_s_median": float(np.median(self.column(s, "combine_s"))),
                "layer_s_median": float(np.median(self.column(s, "layer_s"))),
            })
        return out


def round_robin_sources(n: int, D: int) -> np.ndarray:
    return np.arange(n, dtype=np.int64) % D


def routed_sources(request_clusters: np.ndarray, group_map: GroupMap) -> np.ndarray:
    """Source group per request from its cluster's groups; multi-group clusters rotate."""
    turn: dict[int, int] = {}
    out = np.empty(len(request_clusters), dtype=np.int64)
    for i, k in enumerate(request_clusters):
        k = int(k)
        groups = group_map.groups_of(k)
        j = turn.get(k, 0)
        out[i] = groups[j % len(groups)]
        turn[k] = j + 1
    return out


def compare_strategies(
    decode_counts: np.ndarray,
    request_clusters: np.ndarray | None,
    group_map: GroupMap | None,
    placements: dict[str, Placement],
    topology: Topology,
    cost: CostModelParams,
    num_batches: int,
    batch_size: int,
    seed: int = 0,
) -> ComparisonTable:
    """Simulate every placement on identical sampled batches.

    *decode_counts* is the [R, E] decode matrix of the simulated layer and
    *request_clusters* the cluster id of each of its rows. Batches sample rows
    with replacement. Baselines pin requests to groups round-robin; the
    ``data_based`` strategy pins each request to its cluster's groups.
    Inter-node bytes are normalized to the linear strategy's median (or to
    the first strategy's median when linear is absent).
    """
    counts = np.asarray(decode_counts, dtype=np.float64)
    if counts.ndim != 2 or counts.shape[0] == 0:
        raise SimulationInputError("empty trace: no decode rows to sample")
    if not placements:
        raise SimulationInputError("no placements to simulate")
    if "data_based" in placements and (request_clusters is None or group_map is None):
        raise SimulationInputError("data_based simulation needs cluster labels and a group map")
    D = topology.num_groups
    dests = {name: destination_table(p, topology) for name, p in placements.items()}
    rng = np.random.default_rng(seed)
    raw: list[tuple[int, str, LayerSimResult]] = []
    rr = round_robin_sources(batch_size, D)
    for b in range(num_batches):
        rows = rng.integers(0, counts.shape[0], size=batch_size)
        batch_counts = counts[rows]
        for name, placement in placements.items():
            if name == "data_based":
                sources = routed_sources(np.asarray(request_clusters)[rows], group_map)
            else:
                sources = rr
            res = simulate_layer(BatchAssignment(sources, batch_counts), placement, topology, cost, dests[name])
            raw.append((b, name, res))
    strategies = list(placements)
    ref = "linear" if "linear" in placements else strategies[0]
    linear_median = float(np.median([r.inter_node_bytes for _, s, r in raw if s == ref]))
    scale = linear_median if linear_median > 0 else np.nan
    rows_out = [
        BatchRow(b, s, r.inter_node_bytes, r.intra_node_bytes, r.dispatch_time, r.expert_compute_time,
                 r.combine_time, r.layer_time, r.inter_node_bytes / scale)
        for b, s, r in raw
    ]
    return ComparisonTable(rows_out, linear_median, strategies, cost.fixed_layer_overhead)


def latency_breakdown_report(table: ComparisonTable) -> list[dict]:
    """Median dispatch / compute / combine / overhead per strategy, with fractions."""
    out = []
    for s in table.strategies:
        parts = {
            "dispatch": float(np.median(table.column(s, "dispatch_s"))),
            "compute": float(np.median(table.column(s, "compute_s"))),
            "combine": float(np.median(table.column(s, "combine_s"))),
            "overhead": float(table.fixed_layer_overhead),
        }
        total = sum(parts.values())
        row = {"strategy": s, **{f"{k}_s": v for k, v in parts.items()}, "total_s": total}
        row.update({f"{k}_fraction": (v / total if total > 0 else 0.0) for k, v in parts.items()})
        out.append(row)
    return out
