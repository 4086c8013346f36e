"""Expert placement across EP groups.

Three strategies produce a :class:`Placement`:

* ``linear``: contiguous expert blocks per group.
* ``eplb``: historical-load balancing by greedy longest-processing-time packing.
* ``data_based``: usage-driven two-phase placement from request clusters,
  followed by size balancing and verification.

The placement text format is one line per group, ``group_id: e1 e2 ... eM``,
preceded by ``#`` metadata comments.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

from .clustering import ClusterModel, GroupMap, _aligned_labels
from .trace import ActivationMatrix

STRATEGIES = ("linear", "eplb", "data_based")


class PlacementConfigError(ValueError):
    pass


class PlacementInfeasibleError(ValueError):
    pass


class PlacementVerificationError(AssertionError):
    """A produced placement violates coverage or exact group size."""


@dataclass(frozen=True)
class Placement:
    groups: tuple[tuple[int, ...], ...]
    num_experts: int
    redundancy: int
    group_size: int
    strategy: str

    @property
    def num_groups(self) -> int:
        return len(self.groups)

    def holders(self) -> list[list[int]]:
        """For each expert, the ids of the groups holding a copy."""
        out: list[list[int]] = [[] for _ in range(self.num_experts)]
        for d, group in enumerate(self.groups):
            for e in group:
                out[e].append(d)
        return out


@dataclass(frozen=True)
class Topology:
    dp: int = 8
    tp: int = 1
    ep: int = 8
    tp_exp: int = 1
    nodes: int = 2
    gpus_per_node: int = 4
    group_to_node: tuple[int, ...] = field(default=())

    def __post_init__(self):
        if not self.group_to_node and self.nodes >= 1 and self.ep % self.nodes == 0:
            per_node = self.ep // self.nodes
            object.__setattr__(self, "group_to_node", tuple(g // per_node for g in range(self.ep)))

    @property
    def num_groups(self) -> int:
        return self.ep

    def node_array(self) -> np.ndarray:
        return np.asarray(self.group_to_node, dtype=np.int64)

    def violations(self) -> list[str]:
        out = []
        if min(self.dp, self.tp, self.ep, self.tp_exp, self.nodes, self.gpus_per_node) < 1:
            out.append("topology: all sizes must be >= 1")
            return out
        if self.ep * self.tp_exp != self.dp * self.tp:
            out.append("topology: ep * tp_exp must equal dp * tp")
        if self.gpus_per_node * self.nodes != self.dp * self.tp:
            out.append("topology: gpus_per_node * nodes must equal dp * tp")
        if len(self.group_to_node) != self.ep:
            out.append("topology.group_to_node: needs exactly one node per EP group")
        elif any(not 0 <= n < self.nodes for n in self.group_to_node):
            out.append("topology.group_to_node: node ids must lie in [0, nodes)")
        return out

    @property
    def scheme(self) -> str:
        return f"DP{self.dp}TP{self.tp}->EP{self.ep}TP{self.tp_exp}"

    @classmethod
    def from_scheme(cls, scheme: str, nodes: int) -> "Topology":
        """Parse ``DPaTPb->EPcTPd`` (``TPd`` and ``TPb`` optional, arrow may be ``→``)."""
        m = re.fullmatch(r"DP(\d+)(?:TP(\d+))?\s*(?:->|→)\s*EP(\d+)(?:TP(\d+))?", scheme.strip())
        if m is None:
            raise PlacementConfigError(f"unrecognised parallelism scheme {scheme!r}")
        dp, tp, ep, tp_exp = (int(v) if v else 1 for v in m.groups())
        if (dp * tp) % nodes:
            raise PlacementConfigError(f"{dp * tp} GPUs cannot be spread over {nodes} nodes")
        return cls(dp=dp, tp=tp, ep=ep, tp_exp=tp_exp, nodes=nodes, gpus_per_node=dp * tp // nodes)


def group_size_for(E: int, D: int, R: int) -> int:
    if D < 1 or E < 1 or R < 0:
        raise PlacementConfigError("need E >= 1, D >= 1, R >= 0")
    if (E + R) % D:
        raise PlacementConfigError(f"(E + R) = {E + R} is not divisible by D = {D}")
    M = (E + R) // D
    if M > E:
        raise PlacementConfigError(f"group size M = {M} exceeds E = {E}")
    return M


def verify_placement(groups, E: int, M: int) -> None:
    for d, group in enumerate(groups):
        if len(group) != M:
            raise PlacementVerificationError(f"group {d} holds {len(group)} experts, expected {M}")
        if len(set(group)) != len(group):
            raise PlacementVerificationError(f"group {d} holds a duplicated expert")
    covered = set().union(*map(set, groups)) if groups else set()
    if covered != set(range(E)):
        missing = sorted(set(range(E)) - covered)
        raise PlacementVerificationError(f"experts not covered: {missing[:10]}")


def _finish(groups, E: int, R: int, strategy: str) -> Placement:
    D = len(groups)
    M = (E + R) // D
    verify_placement(groups, E, M)
    return Placement(tuple(tuple(int(e) for e in g) for g in groups), E, R, M, strategy)


# -- data-based ---------------------------------------------------------------


def aggregate_usage(group_map: GroupMap, raw_matrix: ActivationMatrix, model: ClusterModel, D: int) -> np.ndarray:
    """Usage matrix ``U[d, e]``: summed counts of every cluster mapped to group d.

    A cluster mapped to several groups contributes its full counts to each.
    """
    labels = _aligned_labels(model, raw_matrix)
    per_cluster = np.zeros((model.K, raw_matrix.num_experts))
    np.add.at(per_cluster, labels, raw_matrix.values)
    U = np.zeros((D, raw_matrix.num_experts))
    for k, groups in group_map.assignment.items():
        for d in groups:
            U[d] += per_cluster[k]
    return U


def phase1_unique_distribution(U) -> list[list[int]]:
    """Place each expert once, most important first, into its highest-usage group with room."""
    U = np.asarray(U, dtype=np.float64)
    D, E = U.shape
    if not 1 <= D <= E:
        raise PlacementConfigError(f"phase 1 needs E >= D >= 1 (got E={E}, D={D})")
    cap = math.ceil(E / D)
    importance = U.max(axis=0)
    groups: list[list[int]] = [[] for _ in range(D)]
    for e in np.argsort(-importance, kind="stable"):
        for d in np.argsort(-U[:, e], kind="stable"):
            if len(groups[d]) < cap:
                groups[d].append(int(e))
                break
    return groups


def phase2_redundant_addition(groups, U, M: int) -> list[list[int]]:
    """Top up each group to M with its highest-usage experts not already present."""
    U = np.asarray(U, dtype=np.float64)
    E = U.shape[1]
    out = []
    for d, group in enumerate(groups):
        group = list(group)
        needed = M - len(group)
        if needed > 0:
            present = set(group)
            candidates = [int(e) for e in np.argsort(-U[d], kind="stable") if e not in present]
            if needed > len(candidates):
                raise PlacementInfeasibleError(f"group {d} needs {needed} experts, {len(candidates)} available")
            group.extend(candidates[:needed])
        out.append(group)
    return out


def balance_and_verify(groups, E: int, M: int, seed: int = 0, U=None, redundancy: int | None = None,
                       strategy: str = "data_based") -> Placement:
    """Force every group to exactly M distinct experts while covering all E.

    Oversized groups first drop experts that also live in another group,
    lowest usage first (or from the end of the list without *U*); a sole copy
    is instead moved to an undersized group. Experts missing everywhere are
    placed into random undersized groups, and any remaining free slots get
    random experts not yet in the group.
    """
    rng = np.random.default_rng(seed)
    D = len(groups)
    groups = [list(dict.fromkeys(int(e) for e in g)) for g in groups]
    usage = None if U is None else np.asarray(U, dtype=np.float64)

    def copies() -> np.ndarray:
        c = np.zeros(E, dtype=np.int64)
        for g in groups:
            c[g] += 1
        return c

    for d in range(D):
        while len(groups[d]) > M:
            count = copies()
            ranked = list(reversed(groups[d])) if usage is None else sorted(
                reversed(groups[d]), key=lambda e: usage[d, e])
            dup = [e for e in ranked if count[e] > 1]
            if dup:
                groups[d].remove(dup[0])
                continue
            e = ranked[0]
            targets = [h for h in range(D) if len(groups[h]) < M and e not in groups[h]]
            if not targets:
                raise PlacementVerificationError(f"group {d} cannot shed sole-copy expert {e}")
            groups[d].remove(e)
            groups[targets[0]].append(e)

    missing = [e for e in range(E) if copies()[e] == 0]
    for e in rng.permutation(missing):
        e = int(e)
        open_groups = [h for h in range(D) if len(groups[h]) < M]
        if open_groups:
            groups[int(rng.choice(open_groups))].append(e)
            continue
        # no free slot: overwrite a redundant copy somewhere
        count = copies()
        swaps = [(h, x) for h in range(D) for x in groups[h] if count[x] > 1]
        if not swaps:
            raise PlacementVerificationError(f"no slot available for missing expert {e}")
        h, x = swaps[int(rng.integers(len(swaps)))]
        groups[h][groups[h].index(x)] = e

    for d in range(D):
        needed = M - len(groups[d])
        if needed > 0:
            pool = np.setdiff1d(np.arange(E), groups[d])
            groups[d].extend(int(e) for e in rng.choice(pool, size=needed, replace=False))

    R = D * M - E if redundancy is None else redundancy
    verify_placement(groups, E, M)
    return Placement(tuple(tuple(g) for g in groups), E, R, M, strategy)


def data_based_placement(U, redundancy: int = 0, seed: int = 0) -> Placement:
    U = np.asarray(U, dtype=np.float64)
    D, E = U.shape
    M = group_size_for(E, D, redundancy)
    groups = phase1_unique_distribution(U)
    groups = phase2_redundant_addition(groups, U, M)
    return balance_and_verify(groups, E, M, seed=seed, U=U, redundancy=redundancy)


# -- baselines ----------------------------------------------------------------


def linear_placement(E: int, D: int, redundancy: int = 0) -> Placement:
    """Contiguous blocks: slot s of the flattened layout holds expert ``s mod E``."""
    M = group_size_for(E, D, redundancy)
    groups = [[(d * M + j) % E for j in range(M)] for d in range(D)]
    return _finish(groups, E, redundancy, "linear")


def _replica_counts(loads: np.ndarray, R: int, D: int) -> np.ndarray:
    """Hand R extra replicas, one at a time, to the expert with the highest per-replica load."""
    replicas = np.ones(loads.size, dtype=np.int64)
    for _ in range(R):
        per = np.where(replicas < D, loads / replicas, -np.inf)
        replicas[int(np.argmax(per))] += 1
    return replicas


def eplb_placement(historical_per_expert_load, E: int, D: int, redundancy: int = 0) -> Placement:
    """Greedy LPT packing of expert loads into D groups of equal expert count.

    Experts go, heaviest first, to the least-loaded group that still has a
    free slot (ties to the lowest group id). With a redundancy budget the
    heaviest experts are replicated first and each replica carries an equal
    share of its expert's load.
    """
    loads = np.asarray(historical_per_expert_load, dtype=np.float64)
    if loads.shape != (E,):
        raise PlacementConfigError(f"expected {E} historical loads, got shape {loads.shape}")
    M = group_size_for(E, D, redundancy)
    replicas = _replica_counts(loads, redundancy, D)
    items = [(loads[e] / replicas[e], e) for e in range(E) for _ in range(replicas[e])]
    items.sort(key=lambda t: (-t[0], t[1]))
    groups: list[list[int]] = [[] for _ in range(D)]
    totals = np.zeros(D)
    for w, e in items:
        open_groups = [d for d in range(D) if len(groups[d]) < M and e not in groups[d]]
        if open_groups:
            d = min(open_groups, key=lambda g: (totals[g], g))
        else:
            d = _swap_for_replica(groups, e, M, totals, loads, replicas)
        groups[d].append(e)
        totals[d] += w
    return _finish(groups, E, redundancy, "eplb")


def _swap_for_replica(groups, e, M, totals, loads, replicas) -> int:
    # every group with room already holds e: move some x out of a full group into it
    room = next(d for d in range(len(groups)) if len(groups[d]) < M)
    for h in range(len(groups)):
        if e in groups[h]:
            continue
        for x in groups[h]:
            if x not in groups[room]:
                groups[h].remove(x)
                groups[room].append(x)
                w = loads[x] / replicas[x]
                totals[h] -= w
                totals[room] += w
                return h
    raise PlacementInfeasibleError(f"cannot place replica of expert {e}")


def group_loads(placement: Placement, per_expert_load) -> np.ndarray:
    """Per-group load, splitting each expert's load evenly across its copies."""
    loads = np.asarray(per_expert_load, dtype=np.float64)
    holders = placement.holders()
    out = np.zeros(placement.num_groups)
    for e, hs in enumerate(holders):
        for d in hs:
            out[d] += loads[e] / len(hs)
    return out


# -- routing ------------------------------------------------------------------


def route_request(request_id: int, model: ClusterModel, group_map: GroupMap) -> tuple[int, ...]:
    """Groups recommended for a request: those mapped to its cluster."""
    return group_map.groups_of(model.cluster_of(request_id))


# -- placement files ----------------------------------------------------------


def format_placement(placement: Placement) -> str:
    lines = [
        f"# strategy: {placement.strategy}",
        f"# num_experts: {placement.num_experts}",
        f"# redundancy: {placement.redundancy}",
        f"# group_size: {placement.group_size}",
    ]
    lines += [f"{d}: " + " ".join(str(e) for e in g) for d, g in enumerate(placement.groups)]
    return "\n".join(lines) + "\n"


def parse_placement(text: str) -> Placement:
    meta: dict[str, str] = {}
    rows: dict[int, tuple[int, ...]] = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, _, value = line[1:].partition(":")
            meta[key.strip()] = value.strip()
            continue
        head, sep, body = line.partition(":")
        if not sep or not head.strip().isdigit():
            raise PlacementConfigError(f"placement line {n}: expected 'group_id: e1 e2 ...'")
        try:
            rows[int(head)] = tuple(int(t) for t in body.split())
        except ValueError:
            raise PlacementConfigError(f"placement line {n}: non-integer expert id") from None
    if sorted(rows) != list(range(len(rows))) or not rows:
        raise PlacementConfigError("placement group ids must be 0..D-1")
    groups = tuple(rows[d] for d in range(len(rows)))
    E = int(meta["num_experts"]) if "num_experts" in meta else len(set().union(*map(set, groups)))
    M = len(groups[0])
    verify_placement(groups, E, M)
    R = len(groups) * M - E
    return Placement(groups, E, R, M, meta.get("strategy", "unknown"))
