"""``moe-placer`` command line: synth, analyze, cluster, place, simulate, classify, pipeline."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import metrics
from .classifier import SplitSpec, TrainParams, per_layer_classification_report
from .clustering import assign_clusters_to_groups, cluster_matrix
from .config import ConfigError, RunConfig, load_config, load_section, validate_config
from .placement import (
    STRATEGIES,
    Topology,
    aggregate_usage,
    data_based_placement,
    eplb_placement,
    format_placement,
    linear_placement,
    parse_placement,
)
from .reports import format_cluster_model, parse_cluster_model, write_csv
from .simulator import CostModelParams, compare_strategies, latency_breakdown_report
from .trace import (
    DECODE,
    PREFILL,
    build_activation_matrix,
    generate_synthetic_trace,
    read_trace,
    write_trace,
)

log = logging.getLogger("moe_placer")

LOCK_NAME = ".moe_placer.lock"


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"stage {stage}: {message}")


@contextmanager
def output_lock(out: Path):
    path = out / LOCK_NAME
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise StageError("setup", f"{out} is locked by another run (remove {path} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        path.unlink(missing_ok=True)


# -- stages -------------------------------------------------------------------


def stage_synth(cfg: RunConfig, out: Path) -> Path:
    records = generate_synthetic_trace(cfg.synthetic, cfg.model)
    path = out / "trace.jsonl"
    path.write_bytes(write_trace(records))
    log.info("wrote %d records to %s", len(records), path)
    return path


def stage_analyze(cfg: RunConfig, records, out: Path) -> list[Path]:
    m = cfg.model
    E, L = m.num_experts_per_layer, m.num_moe_layers
    paths = [out / "imbalance.csv", out / "imbalance_by_dataset.csv"]
    write_csv(paths[0], ["layer", "stage", "imbalance_factor"],
              metrics.layer_imbalance_table(records, E, m.top_k, L))
    datasets = list(dict.fromkeys(r.dataset_label for r in records))
    rows = [(ds, *row) for ds in datasets for row in metrics.layer_imbalance_table(records, E, m.top_k, L, ds)]
    write_csv(paths[1], ["dataset", "layer", "stage", "imbalance_factor"], rows)
    for stage in (PREFILL, DECODE):
        try:
            matrix = build_activation_matrix(records, None, stage, E)
        except ValueError:
            continue
        if len(matrix.labels()) < 2:
            continue
        corr = metrics.dataset_correlation_matrix(matrix)
        path = out / f"dataset_correlation_{stage}.csv"
        write_csv(path, ["dataset", *corr.labels],
                  [(lab, *corr.values[i]) for i, lab in enumerate(corr.labels)])
        paths.append(path)
    pd = metrics.layer_prefill_decode_correlations(records, E, L)
    path = out / "prefill_decode_correlation.csv"
    vals = [r for _, r in pd if not math.isnan(r)]
    write_csv(path, ["layer", "pearson"], pd + [("mean", float(np.mean(vals)) if vals else math.nan)])
    paths.append(path)
    return paths


def resolve_K(cfg: RunConfig, matrix) -> int:
    return cfg.clustering.K if cfg.clustering.K is not None else len(matrix.labels())


def stage_cluster(cfg: RunConfig, records, out: Path):
    c = cfg.clustering
    E, D = cfg.model.num_experts_per_layer, cfg.topology.num_groups
    matrix = build_activation_matrix(records, c.layer, c.stage, E)
    model = cluster_matrix(matrix, resolve_K(cfg, matrix), c.seed, c.max_iterations, c.tolerance, c.n_init)
    group_map = assign_clusters_to_groups(model, matrix, D, c.seed)
    (out / "cluster_model.txt").write_text(format_cluster_model(model, group_map, c.stage, c.layer))
    write_csv(out / "cluster_report.csv", ["request_id", "cluster", "group_list"],
              [(int(r), int(k), " ".join(map(str, group_map.groups_of(int(k)))))
               for r, k in zip(matrix.request_ids, model.labels)])
    log.info("clustered %d requests into K=%d clusters over D=%d groups", matrix.num_rows, model.K, D)
    return model, group_map


def build_placements(cfg: RunConfig, records, model, group_map, strategies) -> dict:
    E, D = cfg.model.num_experts_per_layer, cfg.topology.num_groups
    R, layer = cfg.placement.redundancy, cfg.simulation.layer
    layer_matrix = build_activation_matrix(records, layer, DECODE, E)
    out = {}
    for s in strategies:
        if s == "linear":
            out[s] = linear_placement(E, D, R)
        elif s == "eplb":
            out[s] = eplb_placement(layer_matrix.values.sum(axis=0), E, D, R)
        elif s == "data_based":
            if model is None or group_map is None:
                raise ValueError("data_based placement needs a cluster model with its group map")
            U = aggregate_usage(group_map, layer_matrix, model, D)
            out[s] = data_based_placement(U, R, cfg.placement.seed)
        else:
            raise ValueError(f"unknown strategy {s!r}")
    return out


def write_placements(placements: dict, out: Path) -> list[Path]:
    paths = []
    for name, p in placements.items():
        path = out / f"placement_{name}.txt"
        path.write_text(format_placement(p))
        paths.append(path)
    return paths


def stage_simulate(cfg: RunConfig, records, model, group_map, placements: dict, out: Path):
    E, layer = cfg.model.num_experts_per_layer, cfg.simulation.layer
    matrix = build_activation_matrix(records, layer, DECODE, E)
    clusters = model.labels_for(matrix.request_ids) if model is not None else None
    s = cfg.simulation
    table = compare_strategies(matrix.values, clusters, group_map, placements, cfg.topology, cfg.cost,
                               s.batches, s.batch_size, s.seed)
    write_csv(out / "simulation_batches.csv",
              ["batch", "strategy", "inter_node_bytes", "dispatch_s", "compute_s", "combine_s", "layer_s",
               "normalized"],
              [(r.batch, r.strategy, r.inter_node_bytes, r.dispatch_s, r.compute_s, r.combine_s, r.layer_s,
                r.normalized) for r in table.rows])
    summary = table.summary()
    write_csv(out / "simulation_summary.csv", list(summary[0]), [list(r.values()) for r in summary])
    breakdown = latency_breakdown_report(table)
    write_csv(out / "latency_breakdown.csv", list(breakdown[0]), [list(r.values()) for r in breakdown])
    return table, summary


def stage_classify(cfg: RunConfig, records, out: Path):
    k = cfg.classification
    rows, mean, std = per_layer_classification_report(
        records, cfg.model.num_experts_per_layer, cfg.model.num_moe_layers,
        SplitSpec(k.train_fraction, True, k.seed),
        TrainParams(k.learning_rate, k.l2_penalty, k.epochs, k.scale_features, k.seed),
    )
    write_csv(out / "classification.csv", ["layer", "accuracy", "n_train", "n_test"],
              [(r.layer, math.nan if r.accuracy is None else r.accuracy, r.n_train, r.n_test) for r in rows])
    line = f"mean accuracy {mean:.4f} ± {std:.4f} over {sum(r.accuracy is not None for r in rows)} layers"
    (out / "classification_summary.txt").write_text(line + "\n")
    for r in rows:
        if r.accuracy is None:
            log.warning("layer %d not classified: %s", r.layer, r.error)
    return rows, mean, std, line


# -- argument handling ----------------------------------------------------------


def _config_from_args(args) -> RunConfig:
    cfg = load_config(args.config)
    r = dataclasses.replace
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "topology", None):
        cfg = r(cfg, topology=load_section(args.topology, Topology))
    if getattr(args, "cost", None):
        cfg = r(cfg, cost=load_section(args.cost, CostModelParams))
    if getattr(args, "K", None) is not None:
        cfg = r(cfg, clustering=r(cfg.clustering, K=args.K))
    if getattr(args, "D", None) is not None:
        cfg = r(cfg, topology=_topology_with_groups(cfg.topology, args.D))
    if getattr(args, "layer", None) is not None:
        cfg = r(cfg, clustering=r(cfg.clustering, layer=args.layer), simulation=r(cfg.simulation, layer=args.layer))
    if getattr(args, "stage", None):
        cfg = r(cfg, clustering=r(cfg.clustering, stage=args.stage))
    if getattr(args, "R", None) is not None:
        cfg = r(cfg, placement=r(cfg.placement, redundancy=args.R))
    if getattr(args, "strategies", None):
        cfg = r(cfg, placement=r(cfg.placement, strategies=tuple(args.strategies)))
    if getattr(args, "batches", None) is not None:
        cfg = r(cfg, simulation=r(cfg.simulation, batches=args.batches))
    if getattr(args, "batch_size", None) is not None:
        cfg = r(cfg, simulation=r(cfg.simulation, batch_size=args.batch_size))
    problems = validate_config(cfg)
    if problems:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(problems))
    return cfg


def _topology_with_groups(topo: Topology, D: int) -> Topology:
    if D == topo.ep:
        return topo
    nodes = topo.nodes if D % topo.nodes == 0 else 1
    return Topology(dp=D, tp=1, ep=D, tp_exp=1, nodes=nodes, gpus_per_node=D // nodes)


def _read(cfg: RunConfig, path) -> list:
    if path is None:
        raise ConfigError("--trace is required")
    if not Path(path).is_file():
        raise FileNotFoundError(f"trace file not found: {path}")
    return read_trace(path, cfg.model)


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth(args):
    cfg = _config_from_args(args)
    print(stage_synth(cfg, _outdir(args)))


def cmd_analyze(args):
    cfg = _config_from_args(args)
    records = _read(cfg, args.trace)
    for p in stage_analyze(cfg, records, _outdir(args)):
        print(p)


def cmd_cluster(args):
    cfg = _config_from_args(args)
    records = _read(cfg, args.trace)
    model, _ = stage_cluster(cfg, records, _outdir(args))
    print(f"K={model.K} objective={model.objective:.6g} iterations={model.iterations_run}")


def _load_cluster_model(path):
    model, group_map, meta = parse_cluster_model(Path(path).read_text())
    return model, group_map


def cmd_place(args):
    cfg = _config_from_args(args)
    records = _read(cfg, args.trace)
    model = group_map = None
    if args.cluster_model:
        model, group_map = _load_cluster_model(args.cluster_model)
        if group_map is None or group_map.D != cfg.topology.num_groups:
            c = cfg.clustering
            matrix = build_activation_matrix(records, c.layer, c.stage, cfg.model.num_experts_per_layer)
            group_map = assign_clusters_to_groups(model, matrix, cfg.topology.num_groups, c.seed)
    placements = build_placements(cfg, records, model, group_map, cfg.placement.strategies)
    for p in write_placements(placements, _outdir(args)):
        print(p)


def cmd_simulate(args):
    cfg = _config_from_args(args)
    records = _read(cfg, args.trace)
    placements = {}
    for path in args.placement:
        p = parse_placement(Path(path).read_text())
        name = p.strategy if p.strategy in STRATEGIES else Path(path).stem
        placements[name] = p
    model = group_map = None
    if args.clusters:
        model, group_map = _load_cluster_model(args.clusters)
    _, summary = stage_simulate(cfg, records, model, group_map, placements, _outdir(args))
    for row in summary:
        print(f"{row['strategy']}: normalized inter-node median {row['normalized_median']:.4f}")


def cmd_classify(args):
    cfg = _config_from_args(args)
    records = _read(cfg, args.trace)
    *_, line = stage_classify(cfg, records, _outdir(args))
    print(line)


def run_pipeline(cfg: RunConfig, trace_path, out: Path) -> int:
    """Run every stage into *out*; returns a process exit status."""
    if trace_path is not None and not Path(trace_path).is_file():
        log.error("trace file not found: %s", trace_path)
        return 2
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"stages": {}, "complete": False}

    def mark(stage, files):
        manifest["stages"][stage] = {"status": "complete", "files": sorted(Path(f).name for f in files)}
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    current = "trace"
    try:
        with output_lock(out):
            if trace_path is None:
                trace_path = stage_synth(cfg, out)
                mark("synth", [trace_path])
            records = read_trace(trace_path, cfg.model)
            current = "analyze"
            mark("analyze", stage_analyze(cfg, records, out))
            current = "cluster"
            model, group_map = stage_cluster(cfg, records, out)
            mark("cluster", [out / "cluster_model.txt", out / "cluster_report.csv"])
            current = "place"
            placements = build_placements(cfg, records, model, group_map, cfg.placement.strategies)
            mark("place", write_placements(placements, out))
            current = "simulate"
            _, summary = stage_simulate(cfg, records, model, group_map, placements, out)
            mark("simulate", [out / "simulation_batches.csv", out / "simulation_summary.csv",
                              out / "latency_breakdown.csv"])
            current = "classify"
            _, _, _, class_line = stage_classify(cfg, records, out)
            mark("classify", [out / "classification.csv", out / "classification_summary.txt"])
            current = "summary"
            lines = [f"trace: {trace_path}", f"topology: {cfg.topology.scheme} over {cfg.topology.nodes} nodes",
                     f"clusters: K={model.K}, groups D={group_map.D}",
                     f"simulated layer {cfg.simulation.layer}: {cfg.simulation.batches} batches of "
                     f"{cfg.simulation.batch_size} requests"]
            for row in summary:
                lines.append(f"  {row['strategy']:<11} normalized inter-node median {row['normalized_median']:.4f}"
                             f"  median layer time {row['layer_s_median'] * 1e3:.4f} ms")
            lines.append(f"classification: {class_line}")
            (out / "summary.txt").write_text("\n".join(lines) + "\n")
            manifest["complete"] = True
            mark("summary", [out / "summary.txt"])
            print("\n".join(lines))
    except StageError as exc:
        log.error("%s", exc)
        return 1
    except Exception as exc:  # any stage failure is reported with its stage name
        log.error("stage %s: %s", current, exc)
        return 1
    return 0


def cmd_pipeline(args):
    cfg = _config_from_args(args)
    status = run_pipeline(cfg, args.trace, Path(args.out))
    if status:
        raise SystemExit(status)


def _common(parent: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parent.add_argument("--config", default=default, help="YAML run config (default: bundled)")
    parent.add_argument("--out", default=argparse.SUPPRESS if suppress else "out", help="output directory")
    parent.add_argument("--seed", type=int, default=default, help="override every stage seed")
    parent.add_argument("--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moe-placer", description=__doc__)
    _common(parser, suppress=False)
    shared = argparse.ArgumentParser(add_help=False)
    _common(shared, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, parents=[shared], help=help_text)
        p.set_defaults(func=func)
        return p

    add("synth", cmd_synth, "generate a synthetic trace from the config")
    p = add("analyze", cmd_analyze, "imbalance and correlation CSVs")
    p.add_argument("--trace")
    p = add("cluster", cmd_cluster, "cluster requests and map clusters to EP groups")
    p.add_argument("--trace")
    p.add_argument("--K", type=int)
    p.add_argument("--D", type=int)
    p.add_argument("--layer", type=int, help="cluster on one layer instead of all layers")
    p.add_argument("--stage", choices=[PREFILL, DECODE])
    p = add("place", cmd_place, "compute expert placements")
    p.add_argument("--trace")
    p.add_argument("--cluster-model", dest="cluster_model")
    p.add_argument("--strategy", dest="strategies", action="append", choices=STRATEGIES)
    p.add_argument("--D", type=int)
    p.add_argument("--R", type=int, help="redundant expert slots")
    p.add_argument("--layer", type=int)
    p = add("simulate", cmd_simulate, "simulate placements on sampled decode batches")
    p.add_argument("--trace")
    p.add_argument("--placement", action="append", required=True)
    p.add_argument("--clusters", help="cluster model file (needed for data_based routing)")
    p.add_argument("--topology", help="YAML topology section")
    p.add_argument("--cost", help="YAML cost-model section")
    p.add_argument("--batches", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--layer", type=int)
    p = add("classify", cmd_classify, "per-layer prefill dataset classification")
    p.add_argument("--trace")
    p = add("pipeline", cmd_pipeline, "run every stage end to end")
    p.add_argument("--trace", help="trace file (default: synthesize from the config)")
    p.add_argument("--strategies", nargs="+", choices=STRATEGIES)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (ConfigError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"moe-placer {args.command}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
