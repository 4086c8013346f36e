"""Expert-load characterization: load, imbalance factor, Pearson correlations."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .trace import ActivationMatrix, ActivationRecord, STAGES, build_activation_matrix


class UndefinedLoadError(ValueError):
    pass


class UndefinedCorrelationError(ValueError):
    """Pearson r is undefined because one input is constant."""


@dataclass(frozen=True)
class ExpertLoadVector:
    loads: np.ndarray
    total_tokens: int
    top_k: int


@dataclass(frozen=True)
class CorrelationMatrix:
    labels: list[str]
    values: np.ndarray  # NaN marks an undefined entry


def expert_load(per_expert_token_counts, top_k: int) -> ExpertLoadVector:
    """Tokens per expert divided by the perfectly balanced share ``sum / E``.

    ``total_tokens`` is the number of routed tokens, i.e. the routed
    (token, expert) pairs divided by ``top_k``.
    """
    counts = np.asarray(per_expert_token_counts, dtype=np.float64)
    if counts.ndim != 1 or counts.size < 1:
        raise ValueError("counts must be a non-empty 1-D array")
    if np.any(counts < 0):
        raise ValueError("counts must be non-negative")
    total = counts.sum()
    if total <= 0:
        raise UndefinedLoadError("expert load is undefined when no tokens were routed")
    balanced = total / counts.size
    return ExpertLoadVector(counts / balanced, int(round(total / top_k)), top_k)


def imbalance_factor(loads: ExpertLoadVector) -> float:
    return float(np.max(loads.loads))


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ValueError("pearson needs two equal-length 1-D inputs of length >= 2")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelationError("correlation with a constant vector is undefined")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))


def _pearson_or_nan(x, y) -> float:
    try:
        return pearson(x, y)
    except UndefinedCorrelationError:
        return math.nan


def dataset_vectors(matrix: ActivationMatrix) -> tuple[list[str], np.ndarray]:
    """Per-dataset summed token counts, shape [n_datasets, E]."""
    labels = matrix.labels()
    row_labels = np.asarray(matrix.row_labels)
    vectors = np.vstack([matrix.values[row_labels == lab].sum(axis=0) for lab in labels])
    return labels, vectors


def dataset_correlation_matrix(matrix: ActivationMatrix) -> CorrelationMatrix:
    labels, vectors = dataset_vectors(matrix)
    n = len(labels)
    if n < 2:
        raise ValueError("dataset correlation needs at least two datasets")
    values = np.full((n, n), math.nan)
    for i in range(n):
        for j in range(i, n):
            r = 1.0 if i == j and np.ptp(vectors[i]) > 0 else _pearson_or_nan(vectors[i], vectors[j])
            values[i, j] = values[j, i] = r
    return CorrelationMatrix(labels, values)


def prefill_decode_correlation(prefill_matrix: ActivationMatrix, decode_matrix: ActivationMatrix) -> float:
    if prefill_matrix.num_experts != decode_matrix.num_experts:
        raise ValueError("prefill and decode matrices disagree on E")
    return pearson(prefill_matrix.values.sum(axis=0), decode_matrix.values.sum(axis=0))


def layer_imbalance_table(
    records: list[ActivationRecord], num_experts: int, top_k: int, num_layers: int,
    dataset: str | None = None,
) -> list[tuple[int, str, float]]:
    """(layer, stage, imbalance_factor) rows; layers/stages without data are skipped."""
    if dataset is not None:
        records = [r for r in records if r.dataset_label == dataset]
    per_key = {}
    for rec in records:
        vec = per_key.setdefault((rec.layer_index, rec.stage), np.zeros(num_experts))
        for e, c in rec.expert_counts.items():
            vec[e] += c
    rows = []
    for layer in range(num_layers):
        for stage in STAGES:
            vec = per_key.get((layer, stage))
            if vec is None or vec.sum() == 0:
                continue
            rows.append((layer, stage, imbalance_factor(expert_load(vec, top_k))))
    return rows


def layer_prefill_decode_correlations(
    records: list[ActivationRecord], num_experts: int, num_layers: int
) -> list[tuple[int, float]]:
    """Per-layer prefill/decode Pearson r; NaN where undefined."""
    out = []
    for layer in range(num_layers):
        try:
            pre = build_activation_matrix(records, layer, "prefill", num_experts)
            dec = build_activation_matrix(records, layer, "decode", num_experts)
            out.append((layer, prefill_decode_correlation(pre, dec)))
        except (UndefinedCorrelationError, ValueError):
            out.append((layer, math.nan))
    return out
