"""Trace data model, JSON-lines trace I/O and synthetic trace generation.

A trace is a list of :class:`ActivationRecord`, one per (request, layer,
stage). Each record maps expert ids to the number of tokens the request routed
to that expert at that layer and stage. Records serialize to one flat JSON
object per line::

    {"dataset": "gsm8k", "request_id": 7, "stage": "decode", "layer": 0,
     "input_len": 112, "gen_tokens": 31, "experts": {"3": 12, "17": 50}}
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from typing import IO, Iterable, Sequence

import numpy as np

PREFILL = "prefill"
DECODE = "decode"
STAGES = (PREFILL, DECODE)

_TRACE_KEYS = ("dataset", "request_id", "stage", "layer", "input_len", "gen_tokens", "experts")


class TraceError(ValueError):
    """Base class for trace problems."""


class TraceFormatError(TraceError):
    """A trace line could not be decoded."""

    def __init__(self, line_number: int, message: str):
        self.line_number = line_number
        super().__init__(f"line {line_number}: {message}")


class TraceValidationError(TraceError):
    """A decoded record violates the model configuration."""


class EmptySelectionError(TraceError):
    """No record matched a (layer, stage) filter."""


class SyntheticSpecError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    name: str = "synthetic-moe"
    num_experts_per_layer: int = 64
    top_k: int = 2
    num_moe_layers: int = 4
    has_shared_expert: bool = False

    def violations(self) -> list[str]:
        out = []
        if self.num_experts_per_layer < 1:
            out.append("model.num_experts_per_layer: must be >= 1")
        if not 1 <= self.top_k <= max(self.num_experts_per_layer, 1):
            out.append("model.top_k: must satisfy 1 <= top_k <= num_experts_per_layer")
        if self.num_moe_layers < 1:
            out.append("model.num_moe_layers: must be >= 1")
        return out


@dataclass(frozen=True)
class ActivationRecord:
    dataset_label: str
    request_id: int
    stage: str
    layer_index: int
    input_length: int
    generated_tokens: int
    expert_counts: dict[int, int] = field(default_factory=dict)

    def total_count(self) -> int:
        return sum(self.expert_counts.values())


def validate_record(record: ActivationRecord, model: ModelConfig) -> None:
    """Raise :class:`TraceValidationError` if *record* is inconsistent with *model*."""
    where = (
        f"record(dataset={record.dataset_label!r}, request_id={record.request_id}, "
        f"layer={record.layer_index}, stage={record.stage})"
    )
    if record.stage not in STAGES:
        raise TraceValidationError(f"{where}: unknown stage {record.stage!r}")
    if record.layer_index >= model.num_moe_layers:
        raise TraceValidationError(
            f"{where}: layer {record.layer_index} >= num_moe_layers {model.num_moe_layers}"
        )
    if not record.expert_counts:
        raise TraceValidationError(f"{where}: empty expert_counts")
    E = model.num_experts_per_layer
    for expert, count in record.expert_counts.items():
        if not 0 <= expert < E:
            raise TraceValidationError(f"{where}: expert id {expert} outside [0, {E})")
        if count < 1:
            raise TraceValidationError(f"{where}: expert {expert} has count {count} < 1")
    if record.stage == DECODE:
        expected = record.generated_tokens * model.top_k
        if record.total_count() != expected:
            raise TraceValidationError(
                f"{where}: decode counts sum to {record.total_count()}, "
                f"expected gen_tokens * top_k = {expected}"
            )


def _as_text_lines(stream) -> Iterable[str]:
    if isinstance(stream, (bytes, bytearray)):
        return io.StringIO(stream.decode("utf-8"))
    if isinstance(stream, str):
        return io.StringIO(stream)
    if isinstance(stream, io.BufferedIOBase) or "b" in getattr(stream, "mode", ""):
        return io.TextIOWrapper(stream, encoding="utf-8")
    return stream


def _uint(obj: dict, key: str, line_number: int) -> int:
    value = obj[key]
    if isinstance(value, bool) or not isinstance(value, int) or value < 0:
        raise TraceFormatError(line_number, f"{key!r} must be a non-negative integer")
    return value


def _decode_line(line: str, line_number: int) -> ActivationRecord:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise TraceFormatError(line_number, f"invalid JSON ({exc.msg})") from None
    if not isinstance(obj, dict):
        raise TraceFormatError(line_number, "record is not an object")
    if set(obj) != set(_TRACE_KEYS):
        missing = sorted(set(_TRACE_KEYS) - set(obj))
        extra = sorted(set(obj) - set(_TRACE_KEYS))
        raise TraceFormatError(line_number, f"bad keys (missing={missing}, unexpected={extra})")
    if not isinstance(obj["dataset"], str):
        raise TraceFormatError(line_number, "'dataset' must be a string")
    if obj["stage"] not in STAGES:
        raise TraceFormatError(line_number, f"'stage' must be one of {STAGES}")
    experts = obj["experts"]
    if not isinstance(experts, dict):
        raise TraceFormatError(line_number, "'experts' must be an object")
    counts: dict[int, int] = {}
    for key, value in experts.items():
        if not key.isdigit():
            raise TraceFormatError(line_number, f"expert id {key!r} is not a decimal integer")
        if isinstance(value, bool) or not isinstance(value, int):
            raise TraceFormatError(line_number, f"count for expert {key} is not an integer")
        counts[int(key)] = value
    return ActivationRecord(
        dataset_label=obj["dataset"],
        request_id=_uint(obj, "request_id", line_number),
        stage=obj["stage"],
        layer_index=_uint(obj, "layer", line_number),
        input_length=_uint(obj, "input_len", line_number),
        generated_tokens=_uint(obj, "gen_tokens", line_number),
        expert_counts=counts,
    )


def parse_trace(stream, model: ModelConfig | None = None) -> list[ActivationRecord]:
    """Parse a JSON-lines trace.

    *stream* may be bytes, a str, or a text/binary file object. Blank lines are
    skipped. When *model* is given every record is validated against it.
    """
    records = []
    for line_number, line in enumerate(_as_text_lines(stream), start=1):
        if not line.strip():
            continue
        record = _decode_line(line, line_number)
        if model is not None:
            validate_record(record, model)
        records.append(record)
    return records


def read_trace(path, model: ModelConfig | None = None) -> list[ActivationRecord]:
    with open(path, "rb") as fh:
        return parse_trace(fh, model)


def _encode_record(record: ActivationRecord) -> str:
    obj = {
        "dataset": record.dataset_label,
        "request_id": record.request_id,
        "stage": record.stage,
        "layer": record.layer_index,
        "input_len": record.input_length,
        "gen_tokens": record.generated_tokens,
        "experts": {str(e): int(c) for e, c in sorted(record.expert_counts.items())},
    }
    return json.dumps(obj, separators=(",", ":"))


def write_trace(records: Iterable[ActivationRecord], stream: IO[bytes] | None = None) -> bytes:
    """Serialize *records* in order, one line each; also write to *stream* if given."""
    data = "".join(_encode_record(r) + "\n" for r in records).encode("utf-8")
    if stream is not None:
        stream.write(data)
    return data


@dataclass
class ActivationMatrix:
    """Dense request-by-expert token counts for one selection of records."""

    values: np.ndarray
    row_labels: list[str]
    request_ids: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.request_ids = np.asarray(self.request_ids, dtype=np.int64)
        if self.values.ndim != 2 or self.values.shape[0] < 1:
            raise ValueError("activation matrix needs shape [R, E] with R >= 1")
        if len(self.row_labels) != self.values.shape[0] or len(self.request_ids) != self.values.shape[0]:
            raise ValueError("row_labels / request_ids length must match row count")

    @property
    def num_rows(self) -> int:
        return self.values.shape[0]

    @property
    def num_experts(self) -> int:
        return self.values.shape[1]

    def subset(self, rows: Sequence[int] | np.ndarray) -> "ActivationMatrix":
        rows = np.asarray(rows, dtype=np.int64)
        return ActivationMatrix(
            self.values[rows], [self.row_labels[i] for i in rows], self.request_ids[rows]
        )

    def labels(self) -> list[str]:
        """Distinct dataset labels in first-appearance order."""
        return list(dict.fromkeys(self.row_labels))

    def row_index(self) -> dict[int, int]:
        return {int(r): i for i, r in enumerate(self.request_ids)}


def build_activation_matrix(
    records: Iterable[ActivationRecord],
    layer_index: int | None,
    stage: str,
    num_experts: int,
) -> ActivationMatrix:
    """Sum counts per (request, expert) over records matching *layer_index* and *stage*.

    ``layer_index=None`` sums over every layer. Rows are sorted by request id.
    """
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    rows: dict[int, np.ndarray] = {}
    labels: dict[int, str] = {}
    for rec in records:
        if rec.stage != stage or (layer_index is not None and rec.layer_index != layer_index):
            continue
        row = rows.get(rec.request_id)
        if row is None:
            row = rows[rec.request_id] = np.zeros(num_experts)
            labels[rec.request_id] = rec.dataset_label
        elif labels[rec.request_id] != rec.dataset_label:
            raise TraceValidationError(
                f"request_id {rec.request_id} appears with datasets "
                f"{labels[rec.request_id]!r} and {rec.dataset_label!r}"
            )
        for expert, count in rec.expert_counts.items():
            row[expert] += count
    if not rows:
        where = "any layer" if layer_index is None else f"layer {layer_index}"
        raise EmptySelectionError(f"no {stage} records at {where}")
    ids = sorted(rows)
    return ActivationMatrix(
        np.vstack([rows[i] for i in ids]), [labels[i] for i in ids], np.array(ids)
    )


@dataclass(frozen=True)
class SyntheticTraceSpec:
    num_domains: int = 4
    requests_per_domain: int = 256
    preferred_experts_per_domain: int = 16
    affinity: float = 0.9
    decode_tokens_mean: float = 16.0
    prefill_tokens_mean: float = 32.0
    seed: int = 0
    domain_names: tuple[str, ...] = ()

    def violations(self, model: ModelConfig) -> list[str]:
        out = []
        if self.num_domains < 1:
            out.append("synthetic.num_domains: must be >= 1")
        if self.requests_per_domain < 1:
            out.append("synthetic.requests_per_domain: must be >= 1")
        if self.preferred_experts_per_domain > model.num_experts_per_layer:
            out.append("synthetic.preferred_experts_per_domain: must be <= num_experts_per_layer")
        if self.preferred_experts_per_domain < model.top_k:
            out.append("synthetic.preferred_experts_per_domain: must be >= top_k")
        if not 0.0 <= self.affinity <= 1.0:
            out.append("synthetic.affinity: must lie in [0, 1]")
        if self.decode_tokens_mean < 1 or self.prefill_tokens_mean < 1:
            out.append("synthetic.*_tokens_mean: must be >= 1")
        if self.domain_names and len(self.domain_names) != self.num_domains:
            out.append("synthetic.domain_names: length must equal num_domains")
        return out

    def names(self) -> list[str]:
        return list(self.domain_names) or [f"domain{d}" for d in range(self.num_domains)]


def preferred_expert_sets(spec: SyntheticTraceSpec, num_experts: int) -> list[np.ndarray]:
    """Each domain's preferred experts; contiguous disjoint blocks whenever they fit."""
    P = spec.preferred_experts_per_domain
    if spec.num_domains * P <= num_experts:
        return [np.arange(d * P, (d + 1) * P) for d in range(spec.num_domains)]
    rng = np.random.default_rng([spec.seed, 1])
    return [np.sort(rng.choice(num_experts, size=P, replace=False)) for _ in range(spec.num_domains)]


def _sample_counts(rng, n_tokens: int, log_weights: np.ndarray, top_k: int) -> dict[int, int]:
    # Gumbel-top-k: distinct experts per token, sequentially weighted without replacement.
    keys = log_weights + rng.gumbel(size=(n_tokens, log_weights.shape[0]))
    chosen = np.argpartition(-keys, top_k - 1, axis=1)[:, :top_k]
    counts = np.bincount(chosen.ravel(), minlength=log_weights.shape[0])
    return {int(e): int(counts[e]) for e in np.flatnonzero(counts)}


def generate_synthetic_trace(spec: SyntheticTraceSpec, model: ModelConfig) -> list[ActivationRecord]:
    """Generate a trace whose domains prefer disjoint expert subsets.

    Each token picks ``top_k`` distinct experts from the mixture
    ``affinity * Uniform(preferred) + (1 - affinity) * Uniform(all experts)``.
    Prefill and decode lengths are geometric with the configured means.
    Request ids are assigned domain-major starting at 0.
    """
    problems = model.violations() + spec.violations(model)
    if problems:
        raise SyntheticSpecError("; ".join(problems))
    E, k = model.num_experts_per_layer, model.top_k
    rng = np.random.default_rng(spec.seed)
    names = spec.names()
    preferred = preferred_expert_sets(spec, E)
    records = []
    request_id = 0
    with np.errstate(divide="ignore"):
        for d in range(spec.num_domains):
            weights = np.full(E, (1.0 - spec.affinity) / E)
            weights[preferred[d]] += spec.affinity / len(preferred[d])
            log_w = np.log(weights)
            for _ in range(spec.requests_per_domain):
                input_len = int(rng.geometric(1.0 / spec.prefill_tokens_mean))
                gen = int(rng.geometric(1.0 / spec.decode_tokens_mean))
                for layer in range(model.num_moe_layers):
                    for stage, n_tokens in ((PREFILL, input_len), (DECODE, gen)):
                        records.append(
                            ActivationRecord(
                                dataset_label=names[d],
                                request_id=request_id,
                                stage=stage,
                                layer_index=layer,
                                input_length=input_len,
                                generated_tokens=gen,
                                expert_counts=_sample_counts(rng, n_tokens, log_w, k),
                            )
                        )
                request_id += 1
    return records
