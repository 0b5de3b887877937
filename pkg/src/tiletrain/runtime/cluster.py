"""Cooperative scheduling of tile workers, batch metrics and cluster front-ends."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from ..errors import ConfigurationError, TransportTimeout
from ..geometry import BACKWARD, FORWARD, GridSpec, GroupingProfile
from ..tensor import Model, TensorMap
from ..transport import (CONTROL, DELTA_SCATTER, INPUT_SCATTER, OUTPUT_GATHER, PARTIAL_GRAD,
                         WEIGHT_BROADCAST, InProcessTransport, Transport, TransportStats)
from .plan import ExecutionPlan, build_plan
from .worker import PHASES, TileWorker, timed_step

log = logging.getLogger(__name__)

METRIC_FIELDS = ("phase", "wall_ns", "bytes_halo", "bytes_weights", "bytes_scatter", "msg_count",
                 "peak_tile_bytes")
SCATTER_KINDS = (INPUT_SCATTER, DELTA_SCATTER, OUTPUT_GATHER)
WEIGHT_KINDS = (PARTIAL_GRAD, WEIGHT_BROADCAST)


def _msgs(stats):
    return sum(stats.sent_msgs.values())


def run_cooperative(workers: Sequence[TileWorker], gens, transport: Transport, timeout=None):
    """Round-robin over worker generators until all finish.

    In-process, a round in which nobody sends or receives is a deadlock and
    fails at once; with remote peers the scheduler sleeps on the mailbox and
    gives up after ``timeout`` seconds without progress.
    """
    timeout = transport.timeout if timeout is None else timeout
    live = {w.tile: (w, g) for w, g in zip(workers, gens)}
    last = time.monotonic()
    while live:
        before = _msgs(transport.stats) + sum(transport.stats.recv_msgs.values())
        finished = False
        for tile in sorted(live):
            w, g = live[tile]
            try:
                timed_step(w, g)
            except StopIteration:
                del live[tile]
                finished = True
        after = _msgs(transport.stats) + sum(transport.stats.recv_msgs.values())
        if finished or after != before:
            last = time.monotonic()
            continue
        waiting = next((w.waiting_for for w, _ in live.values() if w.waiting_for is not None), None)
        if not transport.blocking_wait:
            transport.check()
            raise TransportTimeout(waiting, 0.0)
        transport.wait_for_activity(0.05)
        transport.check()
        if time.monotonic() - last > timeout:
            raise TransportTimeout(waiting, timeout)


@dataclass
class Metrics:
    """Counters for one batch; ``records`` follows :data:`METRIC_FIELDS`."""

    batch: int
    batch_size: int
    stats: TransportStats
    phase_ns: Dict[str, int]
    peak_tile_bytes: Dict[int, int]
    peak_index_bytes: Dict[int, int]
    macs: Dict[int, Dict[tuple, int]]
    actual_macs: Dict[int, Dict[tuple, int]]
    losses: List[float] = field(default_factory=list)
    outputs: List[np.ndarray] = field(default_factory=list)

    @property
    def halo_bytes(self):
        return sum(v for (d, _), v in self.stats.halo_bytes.items())

    def halo_bytes_at(self, direction, boundary):
        return self.stats.halo_bytes.get((direction, boundary), 0)

    @property
    def weight_bytes(self):
        return sum(self.stats.sent_bytes.get(k, 0) for k in WEIGHT_KINDS)

    @property
    def weight_msgs(self):
        return sum(self.stats.sent_msgs.get(k, 0) for k in WEIGHT_KINDS)

    @property
    def scatter_bytes(self):
        return sum(self.stats.sent_bytes.get(k, 0) for k in SCATTER_KINDS)

    def records(self):
        """One record per phase plus a ``total`` row."""
        s = self.stats
        peak = max(self.peak_tile_bytes.values()) if self.peak_tile_bytes else 0
        halo = {d: sum(v for (dd, _), v in s.halo_bytes.items() if dd == d) for d in (FORWARD, BACKWARD)}
        halo_n = {d: sum(v for (dd, _), v in s.halo_msgs.items() if dd == d) for d in (FORWARD, BACKWARD)}
        rows = {
            "scatter": (0, 0, self.scatter_bytes, sum(s.sent_msgs.get(k, 0) for k in SCATTER_KINDS)),
            "forward": (halo[FORWARD], 0, 0, halo_n[FORWARD]),
            "backward": (halo[BACKWARD], 0, 0, halo_n[BACKWARD]),
            "weights": (0, self.weight_bytes, 0, self.weight_msgs + s.sent_msgs.get(CONTROL, 0)),
        }
        out = []
        for phase in PHASES:
            hb, wb, sb, n = rows[phase]
            out.append(dict(zip(METRIC_FIELDS, (phase, self.phase_ns.get(phase, 0), hb, wb, sb, n, peak)),
                            batch=self.batch))
        out.append(dict(zip(METRIC_FIELDS, ("total", sum(self.phase_ns.get(p, 0) for p in PHASES),
                                            self.halo_bytes, self.weight_bytes, self.scatter_bytes,
                                            _msgs(s), peak)), batch=self.batch))
        return out


def _collect(batch, batch_size, workers, stats):
    phase_ns: Dict[str, int] = {}
    for w in workers:
        for k, v in w.phase_ns.items():
            phase_ns[k] = phase_ns.get(k, 0) + v
    coord = next((w for w in workers if w.is_coordinator), None)
    return Metrics(batch, batch_size, stats, phase_ns,
                   {w.tile: w.peak_bytes for w in workers},
                   {w.tile: w.peak_index_bytes for w in workers},
                   {w.tile: dict(w.macs) for w in workers},
                   {w.tile: dict(w.actual_macs) for w in workers},
                   list(coord.losses) if coord else [], list(coord.outputs) if coord else [])


def _check_batch(samples, targets):
    if samples is None or targets is None or len(samples) != len(targets) or not len(samples):
        raise ValueError("need a non-empty batch with one target per sample")


class SimulatedCluster:
    """Every tile of a grid in one process over the in-process transport."""

    def __init__(self, model: Model, grid: GridSpec, fwd_profile: Optional[GroupingProfile] = None,
                 bwd_profile: Optional[GroupingProfile] = None, learning_rate: float = 0.01,
                 coordinator: int = 0, roundtrip: bool = True):
        n = len(model.layers)
        fwd_profile = fwd_profile or GroupingProfile.per_layer(FORWARD, n)
        bwd_profile = bwd_profile or GroupingProfile.per_layer(BACKWARD, n)
        self.plan: ExecutionPlan = build_plan(model, grid, fwd_profile, bwd_profile, coordinator)
        self.transport = InProcessTransport(grid.tiles, roundtrip=roundtrip)
        self.workers = [TileWorker(t, self.plan, model.copy(), self.transport, learning_rate)
                        for t in range(grid.tiles)]
        self.batches = 0

    @property
    def model(self) -> Model:
        return self.workers[self.plan.coordinator].model

    def tile_weights(self, tile):
        return [fb.weights for fb in self.workers[tile].model.filters if fb is not None]

    def train_batch(self, samples: Sequence[TensorMap], targets: Sequence[TensorMap]) -> Metrics:
        """One SGD step over the batch; weights are left untouched if any phase fails."""
        _check_batch(samples, targets)
        saved = [w.model.copy() for w in self.workers]
        before = self.transport.stats.snapshot()
        gens = [w.run_batch(samples, targets, len(samples)) for w in self.workers]
        try:
            run_cooperative(self.workers, gens, self.transport)
        except BaseException:
            for w, m in zip(self.workers, saved):
                w.model = m
            for box in self.transport.mail.boxes.values():
                box.clear()
            raise
        if self.transport.mail.pending():
            raise ConfigurationError("messages left undelivered after the batch")
        self.batches += 1
        return _collect(self.batches - 1, len(samples), self.workers,
                        self.transport.stats.since(before))


def train_batch(cluster: SimulatedCluster, samples, targets) -> Metrics:
    return cluster.train_batch(samples, targets)


def run_tcp_node(transport: Transport, model: Model, grid: GridSpec, fwd_profile: GroupingProfile,
                 bwd_profile: GroupingProfile, learning_rate: float, steps: int, batch_size: int,
                 batches=None, timeout=None):
    """Drive the tiles hosted by ``transport`` for ``steps`` batches.

    ``batches`` yields ``(samples, targets)`` and is only consulted when the
    coordinator tile is local. Returns the local coordinator-or-first model
    and one :class:`Metrics` per batch (local traffic only).
    """
    plan = build_plan(model, grid, fwd_profile, bwd_profile)
    workers = [TileWorker(t, plan, model.copy(), transport, learning_rate) for t in transport.local_tiles]
    has_coord = any(w.is_coordinator for w in workers)
    batches = iter(batches) if batches is not None else None
    metrics = []
    for step in range(steps):
        samples = targets = None
        if has_coord:
            samples, targets = next(batches)
            _check_batch(samples, targets)
            if len(samples) != batch_size:
                raise ValueError(f"batch {step} has {len(samples)} samples, expected {batch_size}")
        before = transport.stats.snapshot()
        gens = [w.run_batch(samples, targets, batch_size) for w in workers]
        run_cooperative(workers, gens, transport, timeout)
        metrics.append(_collect(step, batch_size, workers, transport.stats.since(before)))
    return workers[0].model, metrics
