"""Tiled training runtime: plans, tile workers and cluster drivers."""
from .cluster import (METRIC_FIELDS, Metrics, SimulatedCluster, run_cooperative, run_tcp_node,
                      train_batch)
from .local import Region
from .plan import ExecutionPlan, build_plan
from .worker import TileWorker, weights_checksum

__all__ = [
    "ExecutionPlan", "build_plan", "TileWorker", "SimulatedCluster", "Metrics", "METRIC_FIELDS",
    "train_batch", "run_cooperative", "run_tcp_node", "Region", "weights_checksum",
]
