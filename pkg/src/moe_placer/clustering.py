"""Request clustering on normalized activation vectors and cluster-to-group mapping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .trace import ActivationMatrix


class NormalizationError(ValueError):
    pass


class InfeasibleClusteringError(ValueError):
    pass


@dataclass(frozen=True)
class ClusterModel:
    K: int
    labels: np.ndarray
    centroids: np.ndarray
    objective: float
    iterations_run: int
    objective_history: tuple[float, ...] = ()
    request_ids: np.ndarray | None = None

    def cluster_of(self, request_id: int) -> int:
        if self.request_ids is None:
            raise KeyError("cluster model carries no request ids")
        hits = np.flatnonzero(self.request_ids == request_id)
        if hits.size == 0:
            raise KeyError(f"request {request_id} was not clustered")
        return int(self.labels[hits[0]])

    def labels_for(self, request_ids) -> np.ndarray:
        """Cluster labels aligned to *request_ids*; raises KeyError on unknown ids."""
        index = {int(r): i for i, r in enumerate(self.request_ids)}
        try:
            return np.array([self.labels[index[int(r)]] for r in request_ids], dtype=np.int64)
        except KeyError as exc:
            raise KeyError(f"request {exc.args[0]} was not clustered") from None


@dataclass(frozen=True)
class GroupMap:
    K: int
    D: int
    assignment: dict[int, tuple[int, ...]]
    cluster_sizes: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def groups_of(self, cluster: int) -> tuple[int, ...]:
        return self.assignment[cluster]

    def clusters_of_group(self, group: int) -> list[int]:
        return [k for k, gs in sorted(self.assignment.items()) if group in gs]


def l2_normalize(a) -> np.ndarray:
    """Scale a vector (or each row of a matrix) to unit L2 norm."""
    a = np.asarray(a, dtype=np.float64)
    norms = np.linalg.norm(a, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise NormalizationError("cannot normalize a zero activation vector")
    return a / norms


def _sq_dists_exact(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)


def _kmeans_pp(X: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = [int(rng.integers(n))]
    closest = _sq_dists_exact(X, X[centers[0]][None, :])[:, 0]
    for _ in range(1, K):
        total = closest.sum()
        if total > 0:
            idx = int(rng.choice(n, p=closest / total))
        else:
            # all remaining points coincide with a chosen center
            unused = np.setdiff1d(np.arange(n), centers)
            idx = int(rng.choice(unused))
        centers.append(idx)
        closest = np.minimum(closest, _sq_dists_exact(X, X[idx][None, :])[:, 0])
    return X[centers].copy()


def _repair_empty(X, labels, centroids, dists) -> None:
    """Give each empty cluster the point farthest from its own centroid (in place)."""
    K = centroids.shape[0]
    for k in range(K):
        counts = np.bincount(labels, minlength=K)
        if counts[k] > 0:
            continue
        own = dists[np.arange(X.shape[0]), labels].copy()
        own[counts[labels] < 2] = -1.0  # never empty another cluster
        i = int(np.argmax(own))
        labels[i] = k
        centroids[k] = X[i]
        dists[:, k] = _sq_dists_exact(X, X[i][None, :])[:, 0]


def kmeans(
    rows,
    K: int,
    seed: int = 0,
    max_iterations: int = 300,
    tolerance: float = 1e-8,
    request_ids=None,
    n_init: int = 1,
) -> ClusterModel:
    """Lloyd's algorithm with k-means++ seeding.

    Stops when the largest centroid displacement drops below *tolerance* or
    after *max_iterations* update steps. Distance ties resolve to the lowest
    cluster id. ``objective_history`` records the sum of squared distances
    after every assignment step.

    With ``n_init > 1`` the fit is restarted from independently seeded
    k-means++ draws and the lowest-objective run is kept (earliest on ties);
    restart 0 is always the plain *seed* run.
    """
    X = np.asarray(rows, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("rows must be a 2-D array")
    R = X.shape[0]
    if K < 1 or R < K:
        raise InfeasibleClusteringError(f"cannot form K={K} clusters from R={R} rows")
    best = None
    for restart in range(max(1, n_init)):
        rng = np.random.default_rng(seed if restart == 0 else [seed, restart])
        model = _lloyd(X, K, rng, max_iterations, tolerance, request_ids)
        if best is None or model.objective < best.objective:
            best = model
    return best


def _lloyd(X, K, rng, max_iterations, tolerance, request_ids) -> ClusterModel:
    R = X.shape[0]
    centroids = _kmeans_pp(X, K, rng)
    history = []
    iterations = 0
    while True:
        dists = _sq_dists_exact(X, centroids)
        labels = np.argmin(dists, axis=1)
        history.append(float(dists[np.arange(R), labels].sum()))
        if iterations >= max_iterations:
            break
        new_centroids = centroids.copy()
        for k in range(K):
            members = labels == k
            if members.any():
                new_centroids[k] = X[members].mean(axis=0)
        if np.bincount(labels, minlength=K).min() == 0:
            _repair_empty(X, labels, new_centroids, _sq_dists_exact(X, new_centroids))
        shift = float(np.max(np.linalg.norm(new_centroids - centroids, axis=1)))
        centroids = new_centroids
        iterations += 1
        if shift < tolerance:
            dists = _sq_dists_exact(X, centroids)
            labels = np.argmin(dists, axis=1)
            history.append(float(dists[np.arange(R), labels].sum()))
            break
    if np.bincount(labels, minlength=K).min() == 0:
        # coincident centroids; keep the no-empty-cluster guarantee
        _repair_empty(X, labels, centroids, dists)
        history.append(float(dists[np.arange(R), labels].sum()))
    return ClusterModel(
        K=K,
        labels=labels.astype(np.int64),
        centroids=centroids,
        objective=history[-1],
        iterations_run=iterations,
        objective_history=tuple(history),
        request_ids=None if request_ids is None else np.asarray(request_ids, dtype=np.int64),
    )


def cluster_matrix(
    matrix: ActivationMatrix, K: int, seed: int = 0, max_iterations: int = 300, tolerance: float = 1e-8,
    n_init: int = 10,
) -> ClusterModel:
    """Normalize the rows of *matrix* and cluster them."""
    return kmeans(l2_normalize(matrix.values), K, seed, max_iterations, tolerance, matrix.request_ids, n_init)


def cluster_sizes(model: ClusterModel, raw_matrix: ActivationMatrix) -> np.ndarray:
    """Sum of raw L1 row norms per cluster."""
    labels = _aligned_labels(model, raw_matrix)
    l1 = np.abs(raw_matrix.values).sum(axis=1)
    return np.bincount(labels, weights=l1, minlength=model.K).astype(np.float64)


def _aligned_labels(model: ClusterModel, raw_matrix: ActivationMatrix) -> np.ndarray:
    if model.request_ids is not None and not np.array_equal(model.request_ids, raw_matrix.request_ids):
        return model.labels_for(raw_matrix.request_ids)
    if len(model.labels) != raw_matrix.num_rows:
        raise ValueError("cluster labels and activation matrix have different row counts")
    return model.labels


def cluster_vectors(model: ClusterModel, raw_matrix: ActivationMatrix) -> np.ndarray:
    """Per-cluster summed raw activation vectors, shape [K, E]."""
    labels = _aligned_labels(model, raw_matrix)
    out = np.zeros((model.K, raw_matrix.num_experts))
    np.add.at(out, labels, raw_matrix.values)
    return out


def _order_by_size(sizes: np.ndarray) -> list[int]:
    # descending size, ties -> lowest cluster id
    return sorted(range(len(sizes)), key=lambda k: (-sizes[k], k))


def assign_clusters_to_groups(
    model: ClusterModel, raw_matrix: ActivationMatrix, D: int, seed: int = 0
) -> GroupMap:
    """Map K request clusters onto D expert groups.

    * ``K == D``: cluster k owns group k.
    * ``D > K``: clusters ranked by descending size take groups
      ``0..D-1`` round-robin, so the largest clusters hold the extras.
    * ``K > D``: the per-cluster summed vectors are themselves clustered into
      D meta-clusters; meta-cluster j owns group j.
    """
    K = model.K
    if D < 1:
        raise ValueError("D must be >= 1")
    sizes = cluster_sizes(model, raw_matrix)
    if K == D:
        assignment = {k: (k,) for k in range(K)}
    elif D > K:
        order = _order_by_size(sizes)
        groups: dict[int, list[int]] = {k: [] for k in range(K)}
        for g in range(D):
            groups[order[g % K]].append(g)
        assignment = {k: tuple(gs) for k, gs in groups.items()}
    else:
        meta = kmeans(cluster_vectors(model, raw_matrix), D, seed=seed, n_init=10).labels.copy()
        _fill_empty_groups(meta, sizes, D)
        assignment = {k: (int(meta[k]),) for k in range(K)}
    return GroupMap(K, D, assignment, sizes)


def _fill_empty_groups(meta: np.ndarray, sizes: np.ndarray, D: int) -> None:
    """Steal the largest cluster of the most-populated group for every empty group."""
    for g in range(D):
        counts = np.bincount(meta, minlength=D)
        if counts[g] > 0:
            continue
        donor = int(np.argmax(counts))
        members = [k for k in _order_by_size(sizes) if meta[k] == donor]
        meta[members[0]] = g
