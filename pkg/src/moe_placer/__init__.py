"""Workload-aware request clustering and expert placement for multi-node MoE decode."""

__version__ = "0.1.0"
