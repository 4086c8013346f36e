"""Run configuration: a YAML tree with one section per pipeline stage."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import yaml

from .placement import STRATEGIES, Topology
from .simulator import CostModelParams
from .trace import DECODE, STAGES, ModelConfig, SyntheticTraceSpec


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ClusteringParams:
    K: int | None = None  # None: number of dataset labels in the trace
    seed: int = 0
    max_iterations: int = 300
    tolerance: float = 1e-8
    n_init: int = 10
    stage: str = DECODE
    layer: int | None = None  # None: sum activations over all layers


@dataclass(frozen=True)
class PlacementParams:
    strategies: tuple[str, ...] = STRATEGIES
    redundancy: int = 0
    seed: int = 0


@dataclass(frozen=True)
class SimulationParams:
    batches: int = 200
    batch_size: int = 128
    seed: int = 0
    layer: int = 0


@dataclass(frozen=True)
class ClassificationParams:
    train_fraction: float = 0.8
    seed: int = 0
    learning_rate: float = 0.1
    l2_penalty: float = 1e-4
    epochs: int = 500
    scale_features: bool = False


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    synthetic: SyntheticTraceSpec = field(default_factory=SyntheticTraceSpec)
    topology: Topology = field(default_factory=lambda: Topology(dp=4, ep=4, nodes=2, gpus_per_node=2))
    cost: CostModelParams = field(default_factory=CostModelParams)
    clustering: ClusteringParams = field(default_factory=ClusteringParams)
    placement: PlacementParams = field(default_factory=PlacementParams)
    simulation: SimulationParams = field(default_factory=SimulationParams)
    classification: ClassificationParams = field(default_factory=ClassificationParams)

    def with_seed(self, seed: int) -> "RunConfig":
        """Copy with every stage seed replaced by *seed*."""
        r = dataclasses.replace
        return r(
            self,
            synthetic=r(self.synthetic, seed=seed),
            clustering=r(self.clustering, seed=seed),
            placement=r(self.placement, seed=seed),
            simulation=r(self.simulation, seed=seed),
            classification=r(self.classification, seed=seed),
        )


_TUPLE_FIELDS = {"domain_names", "strategies", "group_to_node"}


def _build(cls, section: str, data):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{section}: expected a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{section}: unknown keys {unknown}")
    values = {k: tuple(v) if k in _TUPLE_FIELDS and v is not None else v for k, v in data.items()}
    return cls(**values)


_SECTIONS = {
    "model": ModelConfig,
    "synthetic": SyntheticTraceSpec,
    "topology": Topology,
    "cost": CostModelParams,
    "clustering": ClusteringParams,
    "placement": PlacementParams,
    "simulation": SimulationParams,
    "classification": ClassificationParams,
}


def config_from_dict(data: dict | None) -> RunConfig:
    data = data or {}
    unknown = sorted(set(data) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config sections {unknown}")
    return RunConfig(**{name: _build(cls, name, data.get(name)) for name, cls in _SECTIONS.items()})


def load_config(path: str | Path | None = None) -> RunConfig:
    """Load a YAML run config; ``None`` loads the bundled default."""
    if path is None:
        text = resources.files("moe_placer").joinpath("data/default_config.yaml").read_text()
    else:
        text = Path(path).read_text()
    try:
        return config_from_dict(yaml.safe_load(text))
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_section(path: str | Path, cls):
    """Load a standalone section file (e.g. a topology or cost config)."""
    data = yaml.safe_load(Path(path).read_text())
    return _build(cls, cls.__name__, data)


def config_to_dict(config: RunConfig) -> dict:
    def plain(v):
        if isinstance(v, tuple):
            return [plain(x) for x in v]
        return v
    return {
        name: {k: plain(v) for k, v in dataclasses.asdict(getattr(config, name)).items()}
        for name in _SECTIONS
    }


def validate_config(config: RunConfig) -> list[str]:
    """Every invariant violation as ``"<field>: <rule>"``; empty means valid."""
    out = list(config.model.violations())
    out += config.synthetic.violations(config.model)
    out += config.topology.violations()
    out += config.cost.violations()
    E, D = config.model.num_experts_per_layer, config.topology.num_groups
    R = config.placement.redundancy
    if R < 0:
        out.append("placement.redundancy: must be >= 0")
    elif D >= 1 and (E + R) % D:
        out.append(f"placement.redundancy: (E + R) = {E + R} must be divisible by the {D} EP groups "
                   "so every group holds exactly (E + R) / D experts")
    elif D >= 1 and (E + R) // D > E:
        out.append("placement.redundancy: group size (E + R) / D must not exceed E")
    if D > E:
        out.append("topology.ep: number of EP groups must not exceed num_experts_per_layer")
    bad = [s for s in config.placement.strategies if s not in STRATEGIES]
    if bad:
        out.append(f"placement.strategies: unknown strategies {bad}; choose from {list(STRATEGIES)}")
    if not config.placement.strategies:
        out.append("placement.strategies: at least one strategy required")
    c = config.clustering
    if c.K is not None and c.K < 1:
        out.append("clustering.K: must be >= 1")
    if c.max_iterations < 0 or c.tolerance < 0 or c.n_init < 1:
        out.append("clustering: max_iterations, tolerance must be >= 0 and n_init >= 1")
    if c.stage not in STAGES:
        out.append(f"clustering.stage: must be one of {list(STAGES)}")
    if c.layer is not None and not 0 <= c.layer < config.model.num_moe_layers:
        out.append("clustering.layer: must index an MoE layer")
    s = config.simulation
    if s.batches < 1 or s.batch_size < 1:
        out.append("simulation: batches and batch_size must be >= 1")
    if not 0 <= s.layer < config.model.num_moe_layers:
        out.append("simulation.layer: must index an MoE layer")
    k = config.classification
    if not 0 < k.train_fraction < 1:
        out.append("classification.train_fraction: must lie in (0, 1)")
    if k.epochs < 0 or k.learning_rate <= 0 or k.l2_penalty < 0:
        out.append("classification: epochs >= 0, learning_rate > 0, l2_penalty >= 0 required")
    return out
