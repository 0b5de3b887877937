"""One tile's share of a training batch, written as a cooperative generator.

A worker yields only while it waits for a message, so a single-threaded
scheduler can interleave every tile of a grid deterministically, and the
same code runs unchanged against the TCP backend.
"""
from __future__ import annotations

import logging
import time
import zlib
from collections import defaultdict
from typing import Dict, List, Optional

import numpy as np

from ..errors import ConsistencyError, PlanInvariantError, ShapeError
from ..geometry import BACKWARD, FORWARD, TileRect
from ..grouping import mac_count
from ..tensor import F32, Model, TensorMap, activate, activation_backward, sgd_update
from ..transport import (CONTROL, DELTA_SCATTER, HALO_BLOCK, INPUT_SCATTER, OUTPUT_GATHER,
                         PARTIAL_GRAD, WEIGHT_BROADCAST, Message, Selector, Transport)
from ..transport.wire import control_payload, control_words
from .local import (Region, conv_region, maxpool_backward_region, maxpool_region,
                    transposed_region, wgrad_region)
from .plan import ExecutionPlan

log = logging.getLogger(__name__)

WAIT = "wait"
PHASES = ("scatter", "forward", "backward", "weights")


def weights_checksum(model: Model) -> int:
    crc = 0
    for fb in model.filters:
        if fb is not None:
            crc = zlib.crc32(np.ascontiguousarray(fb.weights, dtype="<f4").tobytes(), crc)
    return crc


def flatten_grads(model: Model, grads) -> np.ndarray:
    parts = [grads[l].reshape(-1) for l in model.conv_layers()]
    return np.concatenate(parts) if parts else np.zeros(0, dtype=F32)


def flatten_weights(model: Model) -> np.ndarray:
    parts = [model.filters[l].weights.reshape(-1) for l in model.conv_layers()]
    return np.concatenate(parts) if parts else np.zeros(0, dtype=F32)


def unflatten(model: Model, flat: np.ndarray):
    out, pos = {}, 0
    for l in model.conv_layers():
        shape = model.filters[l].weights.shape
        n = int(np.prod(shape))
        if pos + n > flat.size:
            raise ShapeError("weight vector shorter than the model")
        out[l] = flat[pos:pos + n].reshape(shape).astype(F32)
        pos += n
    if pos != flat.size:
        raise ShapeError("weight vector longer than the model")
    return out


def _line(n):
    return TileRect(0, 0, max(n, 1) - 1, 0)


class TileWorker:
    """State owned by one tile: its model replica, held regions and counters."""

    def __init__(self, tile: int, plan: ExecutionPlan, model: Model, transport: Transport,
                 learning_rate: float):
        self.tile = tile
        self.plan = plan
        self.model = model
        self.transport = transport
        self.lr = learning_rate
        self.is_coordinator = tile == plan.coordinator
        self.acts: Dict[int, Region] = {}
        self.deltas: Dict[int, Region] = {}
        self.pool_idx: Dict[int, tuple] = {}
        self.partials: Dict[int, np.ndarray] = {}
        self.phase = "idle"
        self.waiting_for: Optional[Selector] = None
        self.phase_ns = defaultdict(int)
        # MAC units charged by the cost model and the MACs actually issued, per (direction, layer)
        self.macs = defaultdict(int)
        self.actual_macs = defaultdict(int)
        self.peak_bytes = 0
        self.peak_index_bytes = 0
        self.losses: List[float] = []
        self.outputs: List[np.ndarray] = []

    # -- messaging -------------------------------------------------------------------

    def _send(self, kind, dst, direction, boundary, rect, depth, payload):
        self.transport.send(Message(kind, self.tile, dst, direction, boundary, rect, depth, payload))

    def _recv(self, selector: Selector):
        while True:
            msg = self.transport.try_recv(self.tile, selector)
            if msg is not None:
                self.waiting_for = None
                return msg
            self.waiting_for = selector
            yield WAIT

    # -- bookkeeping ------------------------------------------------------------------

    def reset_batch(self):
        self.partials = {l: np.zeros_like(self.model.filters[l].weights) for l in self.model.conv_layers()}
        self.macs.clear()
        self.actual_macs.clear()
        self.peak_bytes = 0
        self.peak_index_bytes = 0
        self.losses = []
        self.outputs = []
        self.phase_ns.clear()

    def retained_bytes(self):
        return sum(r.nbytes for r in self.acts.values()) + sum(r.nbytes for r in self.deltas.values())

    def _note_memory(self):
        self.peak_bytes = max(self.peak_bytes, self.retained_bytes())
        self.peak_index_bytes = max(self.peak_index_bytes,
                                    sum(a.nbytes for _, a in self.pool_idx.values()))

    def _charge(self, direction, layer, rect, actual):
        dims = self.plan.dims
        spec = self.plan.layers[layer]
        self.macs[(direction, layer)] += mac_count(spec, rect.width, rect.height, dims[layer][2],
                                                   dims[layer + 1][2])
        self.actual_macs[(direction, layer)] += actual

    # -- scatter / gather ----------------------------------------------------------------

    def scatter_input(self, sample: Optional[TensorMap]):
        """Coordinator sends every tile its first-group input region; all tiles receive theirs."""
        self.phase = "scatter"
        if self.is_coordinator:
            if sample is None or sample.dims != tuple(self.plan.dims[0]):
                raise ShapeError(f"sample dims {None if sample is None else sample.dims} "
                                 f"!= model input {tuple(self.plan.dims[0])}")
            for t in range(self.plan.tiles):
                r = self.plan.scatter_region(t)
                ys, xs = r.slices(TileRect(0, 0, sample.width - 1, sample.height - 1))
                self._send(INPUT_SCATTER, t, FORWARD, 0, r, sample.depth, sample.data[:, ys, xs])
        msg = yield from self._recv(Selector(INPUT_SCATTER, self.plan.coordinator))
        if msg.rect != self.plan.scatter_region(self.tile):
            raise PlanInvariantError(f"tile {self.tile} got input {tuple(msg.rect)}")
        self.acts = {0: Region(msg.rect, msg.block().copy())}
        self.deltas = {}
        self.pool_idx = {}

    def gather_and_scatter_delta(self, target: Optional[TensorMap]):
        """Final outputs go to the coordinator, which scatters the initial delta Y - T."""
        self.phase = "scatter"
        n = self.plan.num_layers
        w, h, d = self.plan.dims[n]
        own = self.plan.fwd.entry(self.tile, n).owned
        self._send(OUTPUT_GATHER, self.plan.coordinator, FORWARD, n, own, d, self.acts[n].view(own))
        if self.is_coordinator:
            if target is None or target.dims != (w, h, d):
                raise ShapeError(f"target dims {None if target is None else target.dims} != output {(w, h, d)}")
            full = Region.empty(TileRect(0, 0, w - 1, h - 1), d)
            for t in range(self.plan.tiles):
                msg = yield from self._recv(Selector(OUTPUT_GATHER, t))
                full.paste(msg.rect, msg.block())
            diff = full.data - target.data
            self.losses.append(0.5 * float(np.sum(diff.astype(np.float64) ** 2)))
            self.outputs.append(full.data.copy())
            delta = diff.astype(F32)
            for t in range(self.plan.tiles):
                r = self.plan.delta_scatter_region(t)
                ys, xs = r.slices(full.rect)
                self._send(DELTA_SCATTER, t, BACKWARD, n, r, d, delta[:, ys, xs])
        msg = yield from self._recv(Selector(DELTA_SCATTER, self.plan.coordinator))
        if msg.rect != self.plan.delta_scatter_region(self.tile):
            raise PlanInvariantError(f"tile {self.tile} got delta {tuple(msg.rect)}")
        self.deltas = {n: Region(msg.rect, msg.block().copy())}

    # -- halo exchange -------------------------------------------------------------------

    def exchange_boundaries(self, direction, m):
        """Send owned-core strips to neighbours and widen map ``m`` to the required region."""
        if direction == FORWARD:
            store, tplan, sched = self.acts, self.plan.fwd, self.plan.fwd_exchanges[m]
        else:
            store, tplan, sched = self.deltas, self.plan.bwd, self.plan.bwd_exchanges[m]
        recv, send = sched[self.tile]
        held = store[m]
        entry = tplan.entry(self.tile, m)
        if held.rect != entry.owned:
            raise PlanInvariantError(f"tile {self.tile} map {m}: exchange needs the owned core, "
                                     f"holds {tuple(held.rect)}")
        depth = held.data.shape[0]
        for blk in send:
            self._send(HALO_BLOCK, blk.peer, direction, m, blk.rect, depth, held.view(blk.rect))
        wide = Region.empty(entry.required, depth)
        wide.paste(held.rect, held.data)
        for blk in recv:
            msg = yield from self._recv(Selector(HALO_BLOCK, blk.peer, m, direction))
            if msg.rect != blk.rect:
                raise PlanInvariantError(f"halo from {blk.peer} at map {m} is {tuple(msg.rect)}, "
                                         f"expected {tuple(blk.rect)}")
            wide.paste(msg.rect, msg.block())
        store[m] = wide

    # -- groups --------------------------------------------------------------------------

    def tile_forward_group(self, group):
        self.phase = "forward"
        if group.s != 0:
            yield from self.exchange_boundaries(FORWARD, group.s)
        for l in range(group.s, group.e):
            self._forward_layer(l)

    def _forward_layer(self, l):
        spec = self.plan.layers[l]
        dims = self.plan.dims
        held = self.acts[l]
        out = self.plan.fwd.output_region(self.tile, l + 1)
        w, h, d = dims[l]
        if spec.is_conv:
            fb = self.model.filters[l]
            z = conv_region(held, (w, h), fb.weights, spec, out)
            self.acts[l + 1] = Region(out, activate(z, spec))
            actual = out.area * d * spec.kernel ** 2 * spec.out_channels
        else:
            y, idx = maxpool_region(held, (w, h), spec, out)
            self.acts[l + 1] = Region(out, y)
            q = self.plan.pool_index_regions[(self.tile, l)]
            if out.contains(q):
                ys, xs = q.slices(out)
                self.pool_idx[l] = (q, np.ascontiguousarray(idx[:, ys, xs]))
            else:
                self.pool_idx[l] = (q, maxpool_region(held, (w, h), spec, q)[1])
            actual = out.area * d * spec.kernel ** 2
        self._charge(FORWARD, l, held.rect, actual)

    def tile_backward_group(self, group):
        self.phase = "backward"
        if group.e != self.plan.num_layers:
            yield from self.exchange_boundaries(BACKWARD, group.e)
        for l in range(group.e - 1, group.s - 1, -1):
            self._backward_layer(l)

    def _backward_layer(self, l):
        spec = self.plan.layers[l]
        dims = self.plan.dims
        target = self.plan.bwd.output_region(self.tile, l)
        dy = self.deltas[l + 1]
        if spec.is_conv:
            if spec.activation != "linear":
                # the pre-activation delta replaces the output delta in place
                dy = Region(dy.rect, activation_backward(dy.data, self.acts[l + 1].view(dy.rect, "activation"),
                                                         spec))
                self.deltas[l + 1] = dy
            dx = transposed_region(dy, dims[l + 1][:2], self.model.filters[l].weights, spec, target)
            actual = target.area * dims[l + 1][2] * spec.kernel ** 2 * dims[l][2]
        else:
            q, idx = self.pool_idx[l]
            dx = maxpool_backward_region(dy, q, idx, spec, target)
            actual = dy.rect.area * dims[l + 1][2]
        self.deltas[l] = Region(target, dx)
        self._charge(BACKWARD, l, target, actual)

    # -- weights ----------------------------------------------------------------------------

    def compute_partial_weight_grads(self):
        """Accumulate this sample's gradient terms over the tile's owned output positions."""
        self.phase = "weights"
        for l in self.model.conv_layers():
            spec = self.plan.layers[l]
            own = self.plan.wgrad_regions[(self.tile, l)]
            dz = self.deltas[l + 1].view(own, "weight-gradient delta")
            w, h, _ = self.plan.dims[l]
            self.partials[l] += wgrad_region(self.acts[l], (w, h), dz, own, spec)

    def aggregate_and_update(self, batch_size):
        """Sum partials at the coordinator in ascending tile order, update, broadcast, verify."""
        self.phase = "weights"
        coord = self.plan.coordinator
        if not self.is_coordinator:
            flat = flatten_grads(self.model, self.partials)
            self._send(PARTIAL_GRAD, coord, BACKWARD, 0, _line(flat.size), 1, flat)
            msg = yield from self._recv(Selector(WEIGHT_BROADCAST, coord))
            for l, wts in unflatten(self.model, msg.payload).items():
                self.model.filters[l].weights[...] = wts
                self.model.filters[l].zero_grad()
            self._send(CONTROL, coord, FORWARD, 0, None, 0, control_payload(weights_checksum(self.model)))
            return
        total = None
        for t in range(self.plan.tiles):
            if t == coord:
                part = self.partials
            else:
                msg = yield from self._recv(Selector(PARTIAL_GRAD, t))
                part = unflatten(self.model, msg.payload)
            if total is None:
                total = {l: g.copy() for l, g in part.items()}
            else:
                for l in total:
                    total[l] += part[l]
        for l, g in total.items():
            fb = self.model.filters[l]
            fb.gradients[...] = g
            sgd_update(fb, self.lr, batch_size)
        flat = flatten_weights(self.model)
        for t in range(self.plan.tiles):
            if t != coord:
                self._send(WEIGHT_BROADCAST, t, FORWARD, 0, _line(flat.size), 1, flat)
        mine = weights_checksum(self.model)
        for t in range(self.plan.tiles):
            if t != coord:
                msg = yield from self._recv(Selector(CONTROL, t))
                (theirs,) = control_words(msg)
                if theirs != mine:
                    raise ConsistencyError(f"tile {t} weight checksum {theirs:#010x} != {mine:#010x}")

    # -- driver --------------------------------------------------------------------------------

    def run_batch(self, samples, targets, batch_size):
        """Generator over one batch; ``samples``/``targets`` are only read on the coordinator."""
        self.reset_batch()
        for i in range(batch_size):
            sample = samples[i] if self.is_coordinator else None
            target = targets[i] if self.is_coordinator else None
            yield from self.scatter_input(sample)
            for g in self.plan.fwd.profile.groups:
                yield from self.tile_forward_group(g)
            yield from self.gather_and_scatter_delta(target)
            for g in reversed(self.plan.bwd.profile.groups):
                yield from self.tile_backward_group(g)
            self.compute_partial_weight_grads()
            self._note_memory()
        yield from self.aggregate_and_update(batch_size)
        self.phase = "idle"


def timed_step(worker: TileWorker, gen):
    """Advance ``gen`` once and charge the elapsed time to the worker's current phase."""
    phase = worker.phase
    t0 = time.perf_counter_ns()
    try:
        return next(gen)
    finally:
        worker.phase_ns[phase] += time.perf_counter_ns() - t0
