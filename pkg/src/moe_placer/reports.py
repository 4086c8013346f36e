"""CSV writers and the cluster-model text format.

Cluster model file: one ``key: value`` per line. Vector values are
space-separated; centroids are stored row-major as ``K*E`` floats::

    K: 2
    E: 3
    iterations: 4
    objective: 0.125
    stage: decode
    layer: all
    request_ids: 0 1 2
    labels: 0 0 1
    centroids: 0.1 0.2 0.3 0.4 0.5 0.6
    D: 2
    groups.0: 0
    groups.1: 1
"""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .clustering import ClusterModel, GroupMap


def fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value):
            return ""
        return repr(value)
    return str(value)


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def read_csv(path: Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def format_cluster_model(model: ClusterModel, group_map: GroupMap | None = None,
                         stage: str = "decode", layer: int | None = None) -> str:
    ids = model.request_ids if model.request_ids is not None else np.arange(len(model.labels))
    lines = [
        f"K: {model.K}",
        f"E: {model.centroids.shape[1]}",
        f"iterations: {model.iterations_run}",
        f"objective: {model.objective!r}",
        f"stage: {stage}",
        f"layer: {'all' if layer is None else layer}",
        "request_ids: " + " ".join(str(int(r)) for r in ids),
        "labels: " + " ".join(str(int(k)) for k in model.labels),
        "centroids: " + " ".join(repr(float(v)) for v in model.centroids.ravel()),
    ]
    if group_map is not None:
        lines.append(f"D: {group_map.D}")
        lines += [f"groups.{k}: " + " ".join(map(str, gs)) for k, gs in sorted(group_map.assignment.items())]
    return "\n".join(lines) + "\n"


def parse_cluster_model(text: str) -> tuple[ClusterModel, GroupMap | None, dict]:
    """Return (model, group map or None, metadata with ``stage`` and ``layer``)."""
    kv: dict[str, str] = {}
    for line in text.splitlines():
        if line.strip():
            key, sep, value = line.partition(":")
            if not sep:
                raise ValueError(f"cluster model line without ':': {line!r}")
            kv[key.strip()] = value.strip()
    try:
        K, E = int(kv["K"]), int(kv["E"])
        labels = np.array([int(t) for t in kv["labels"].split()], dtype=np.int64)
        ids = np.array([int(t) for t in kv["request_ids"].split()], dtype=np.int64)
        centroids = np.array([float(t) for t in kv["centroids"].split()]).reshape(K, E)
    except KeyError as exc:
        raise ValueError(f"cluster model missing key {exc.args[0]!r}") from None
    model = ClusterModel(K, labels, centroids, float(kv.get("objective", "nan")),
                         int(kv.get("iterations", 0)), (), ids)
    group_map = None
    if "D" in kv:
        assignment = {k: tuple(int(t) for t in kv[f"groups.{k}"].split()) for k in range(K)}
        group_map = GroupMap(K, int(kv["D"]), assignment)
    layer = kv.get("layer", "all")
    meta = {"stage": kv.get("stage", "decode"), "layer": None if layer == "all" else int(layer)}
    return model, group_map, meta
