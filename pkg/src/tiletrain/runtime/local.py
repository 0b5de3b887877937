"""Tensor-core operations on haloed tile regions.

A :class:`Region` is a block of a map placed at global coordinates. Every
operation here builds the exact input window its output needs, fills
off-map positions with zeros and reads everything else from the held
region. Because each output element then sees the same values in the same
order as in the untiled pass, forward activations and deltas are
bit-identical to the reference trainer.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import kernels
from ..errors import PlanInvariantError
from ..geometry import TileRect, input_window
from ..tensor import F32, LayerSpec, rotated_filters


@dataclass
class Region:
    rect: TileRect
    data: np.ndarray  # (depth, rect.height, rect.width)

    def __post_init__(self):
        if self.data.shape[1:] != (self.rect.height, self.rect.width):
            raise PlanInvariantError(f"array {self.data.shape} does not match rect {tuple(self.rect)}")

    @classmethod
    def empty(cls, rect, depth):
        return cls(rect, np.zeros((depth, rect.height, rect.width), dtype=F32))

    @property
    def nbytes(self):
        return self.data.nbytes

    def view(self, rect: TileRect, what="region"):
        if not self.rect.contains(rect):
            raise PlanInvariantError(f"{what} {tuple(rect)} not covered by held {tuple(self.rect)}")
        ys, xs = rect.slices(self.rect)
        return self.data[:, ys, xs]

    def paste(self, rect: TileRect, block):
        ys, xs = rect.slices(self.rect)
        self.data[:, ys, xs] = block


def _map_rect(dims):
    return TileRect(0, 0, dims[0] - 1, dims[1] - 1)


def gather_window(held: Region, window: TileRect, map_dims, what="input window"):
    """Zero-filled buffer over ``window`` with the in-map part copied from ``held``."""
    buf = np.zeros((held.data.shape[0], window.height, window.width), dtype=F32)
    inside = window.intersect(_map_rect(map_dims))
    if inside is not None:
        ys, xs = inside.slices(window)
        buf[:, ys, xs] = held.view(inside, what)
    return buf


def conv_region(held: Region, map_dims, weights, spec: LayerSpec, out_rect: TileRect):
    """Pre-activation convolution output over ``out_rect``."""
    buf = gather_window(held, input_window(out_rect, spec), map_dims)
    return kernels.conv_valid(buf, weights, spec.stride)


def maxpool_region(held: Region, map_dims, spec: LayerSpec, out_rect: TileRect):
    buf = gather_window(held, input_window(out_rect, spec), map_dims)
    return kernels.maxpool_valid(buf, spec.kernel, spec.stride)


def transposed_region(dz: Region, out_map_dims, weights, spec: LayerSpec, target: TileRect):
    """Delta at the layer input over ``target`` from pre-activation deltas ``dz``."""
    k, s, p = spec.kernel, spec.stride, spec.pad
    lo = p - k + 1
    u_y, u_x = target.y1 + lo, target.x1 + lo
    buf = np.zeros((dz.data.shape[0], target.height + k - 1, target.width + k - 1), dtype=F32)
    oy1, ox1 = max(0, -((-u_y) // s)), max(0, -((-u_x) // s))
    oy2 = min(out_map_dims[1] - 1, (target.y2 + p) // s)
    ox2 = min(out_map_dims[0] - 1, (target.x2 + p) // s)
    if oy1 <= oy2 and ox1 <= ox2:
        need = TileRect(ox1, oy1, ox2, oy2)
        block = dz.view(need, "delta dependency")
        buf[:, oy1 * s - u_y:oy2 * s - u_y + 1:s, ox1 * s - u_x:ox2 * s - u_x + 1:s] = block
    return kernels.conv_valid(buf, rotated_filters(weights), 1)


def wgrad_region(held: Region, map_dims, dz_block, out_rect: TileRect, spec: LayerSpec):
    """Partial weight gradient from output positions ``out_rect`` only."""
    buf = gather_window(held, input_window(out_rect, spec), map_dims, "weight-gradient window")
    return kernels.wgrad_valid(buf, np.ascontiguousarray(dz_block), spec.kernel, spec.stride)


def maxpool_backward_region(dy: Region, idx_rect: TileRect, idx, spec: LayerSpec, target: TileRect):
    """Route pooled deltas held over ``dy.rect`` back onto ``target`` of the pool input.

    ``idx`` is the argmax map retained over ``idx_rect``, shape ``(C, h, w, 2)``.
    """
    q = dy.rect
    if not idx_rect.contains(q):
        raise PlanInvariantError(f"pool index map {tuple(idx_rect)} does not cover {tuple(q)}")
    ys, xs = q.slices(idx_rect)
    indices = idx[:, ys, xs]
    win = input_window(q, spec)
    dx = kernels.maxpool_scatter(np.ascontiguousarray(dy.data), np.ascontiguousarray(indices),
                                 spec.stride, win.height, win.width)
    out = np.zeros((dy.data.shape[0], target.height, target.width), dtype=F32)
    both = win.intersect(target)
    if both is not None:
        out[(slice(None),) + both.slices(target)] = dx[(slice(None),) + both.slices(win)]
    return out
