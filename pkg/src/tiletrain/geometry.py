"""Coordinate calculus for tiled, fused execution.

All rectangles are inclusive and signed; nothing is clipped until ``clip``
is called, so the dependency recurrences can be checked in raw form.
Tile ids are row-major over the grid: ``tile = i * cols + j``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

from .errors import ConfigurationError
from .tensor import LayerSpec

FORWARD = "forward"
BACKWARD = "backward"
DIRECTIONS = (FORWARD, BACKWARD)


def _ceil_div(a, b):
    return -((-a) // b)


@dataclass(frozen=True, order=True)
class TileRect:
    x1: int
    y1: int
    x2: int
    y2: int

    def __post_init__(self):
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise ConfigurationError(f"empty rectangle {tuple(self)}")

    def __iter__(self):
        return iter((self.x1, self.y1, self.x2, self.y2))

    @property
    def width(self):
        return self.x2 - self.x1 + 1

    @property
    def height(self):
        return self.y2 - self.y1 + 1

    @property
    def area(self):
        return self.width * self.height

    def intersect(self, other: "TileRect") -> Optional["TileRect"]:
        x1, y1 = max(self.x1, other.x1), max(self.y1, other.y1)
        x2, y2 = min(self.x2, other.x2), min(self.y2, other.y2)
        if x1 > x2 or y1 > y2:
            return None
        return TileRect(x1, y1, x2, y2)

    def contains(self, other: "TileRect") -> bool:
        return (self.x1 <= other.x1 and self.y1 <= other.y1
                and self.x2 >= other.x2 and self.y2 >= other.y2)

    def hull(self, other: Optional["TileRect"]) -> "TileRect":
        if other is None:
            return self
        return TileRect(min(self.x1, other.x1), min(self.y1, other.y1),
                        max(self.x2, other.x2), max(self.y2, other.y2))

    def expand(self, n):
        return TileRect(self.x1 - n, self.y1 - n, self.x2 + n, self.y2 + n)

    def slices(self, origin: "TileRect"):
        """Row and column slices selecting this rect inside an array laid out over ``origin``."""
        return (slice(self.y1 - origin.y1, self.y2 - origin.y1 + 1),
                slice(self.x1 - origin.x1, self.x2 - origin.x1 + 1))


@dataclass(frozen=True)
class GridSpec:
    rows: int
    cols: int

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ConfigurationError(f"grid must be at least 1x1, got {self.rows}x{self.cols}")

    @classmethod
    def parse(cls, text: str) -> "GridSpec":
        try:
            n, m = text.lower().split("x")
            return cls(int(n), int(m))
        except ValueError:
            raise ConfigurationError(f"grid must look like NxM, got {text!r}") from None

    @property
    def tiles(self):
        return self.rows * self.cols

    def tile_id(self, i, j):
        return i * self.cols + j

    def coords(self, tile):
        return divmod(tile, self.cols)

    def adjacent(self, a, b):
        (ia, ja), (ib, jb) = self.coords(a), self.coords(b)
        return a != b and abs(ia - ib) <= 1 and abs(ja - jb) <= 1

    def __str__(self):
        return f"{self.rows}x{self.cols}"


class Group(NamedTuple):
    """Layers ``s .. e-1``; synchronization happens at map ``s`` (forward) or ``e`` (backward)."""
    s: int
    e: int


@dataclass(frozen=True)
class GroupingProfile:
    direction: str
    groups: Tuple[Group, ...]

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise ConfigurationError(f"direction must be one of {DIRECTIONS}")
        groups = tuple(Group(int(s), int(e)) for s, e in self.groups)
        object.__setattr__(self, "groups", groups)
        if not groups:
            raise ConfigurationError("a grouping profile needs at least one group")
        if groups[0].s != 0:
            raise ConfigurationError("first group must start at map 0")
        for g in groups:
            if g.s >= g.e:
                raise ConfigurationError(f"group {tuple(g)} is empty")
        for a, b in zip(groups, groups[1:]):
            if a.e != b.s:
                raise ConfigurationError(f"groups {tuple(a)} and {tuple(b)} are not contiguous")

    @property
    def num_layers(self):
        return self.groups[-1].e

    @property
    def boundaries(self):
        return (0,) + tuple(g.e for g in self.groups)

    @classmethod
    def from_boundaries(cls, direction, boundaries: Sequence[int]) -> "GroupingProfile":
        b = list(boundaries)
        return cls(direction, tuple(Group(s, e) for s, e in zip(b, b[1:])))

    @classmethod
    def per_layer(cls, direction, num_layers):
        return cls.from_boundaries(direction, range(num_layers + 1))

    @classmethod
    def single(cls, direction, num_layers):
        return cls(direction, (Group(0, num_layers),))

    def validate(self, num_layers):
        if self.num_layers != num_layers:
            raise ConfigurationError(
                f"profile covers {self.num_layers} layers but the model has {num_layers}")
        return self

    def group_of_layer(self, layer):
        for g in self.groups:
            if g.s <= layer < g.e:
                return g
        raise ConfigurationError(f"layer {layer} not covered by profile")

    def sync_maps(self):
        """Maps at which halos are exchanged, in execution order."""
        if self.direction == FORWARD:
            return [g.s for g in self.groups]
        return [g.e for g in reversed(self.groups)]

    def __str__(self):
        return ",".join(str(b) for b in self.boundaries)


@dataclass(frozen=True)
class TilePlanEntry:
    layer: int
    owned: TileRect
    required: TileRect


# -- partitioning --------------------------------------------------------------

def _split(n, parts):
    base, rem = divmod(n, parts)
    spans, start = [], 0
    for k in range(parts):
        size = base + (1 if k < rem else 0)
        spans.append((start, start + size - 1))
        start += size
    return spans


def partition_map(width, height, grid: GridSpec) -> List[TileRect]:
    """Equal split; leftmost columns and topmost rows absorb the remainder."""
    if width < grid.cols or height < grid.rows:
        raise ConfigurationError(f"{grid} grid does not fit a {width}x{height} map")
    cols = _split(width, grid.cols)
    rows = _split(height, grid.rows)
    return [TileRect(cx[0], ry[0], cx[1], ry[1]) for ry in rows for cx in cols]


# -- dependency recurrences ----------------------------------------------------------

def _reach(spec: LayerSpec):
    # pooling windows with K == S never leave their stride block
    return spec.kernel // 2 if spec.is_conv else 0


def backtrace_forward_region(rect: TileRect, prev: LayerSpec) -> TileRect:
    """Input region of layer ``prev`` needed to produce ``rect`` of its output."""
    s, r = prev.stride, _reach(prev)
    if prev.is_conv:
        return TileRect(rect.x1 * s - r, rect.y1 * s - r,
                        rect.x2 * s + r + (s - 1), rect.y2 * s + r + (s - 1))
    k, p = prev.kernel, prev.pad
    return TileRect(rect.x1 * s - p, rect.y1 * s - p,
                    rect.x2 * s - p + k - 1, rect.y2 * s - p + k - 1)


def forwardtrace_delta_region(rect: TileRect, spec: LayerSpec) -> TileRect:
    """Region of the delta at layer ``spec``'s output needed for ``rect`` of the delta at its input."""
    s = spec.stride
    if spec.is_conv:
        lo = hi = spec.kernel // 2
    else:
        lo, hi = spec.kernel - 1 - spec.pad, spec.pad
    x1, y1 = _ceil_div(rect.x1 - lo, s), _ceil_div(rect.y1 - lo, s)
    x2, y2 = (rect.x2 + hi) // s, (rect.y2 + hi) // s
    if x1 > x2 or y1 > y2:
        raise ConfigurationError(f"delta region {tuple(rect)} vanishes through layer {spec}")
    return TileRect(x1, y1, x2, y2)


def input_window(rect: TileRect, spec: LayerSpec) -> TileRect:
    """Exact input footprint of output ``rect`` (unclipped)."""
    s, p, k = spec.stride, spec.pad, spec.kernel
    return TileRect(rect.x1 * s - p, rect.y1 * s - p, rect.x2 * s - p + k - 1, rect.y2 * s - p + k - 1)


def clip(rect: TileRect, width, height) -> TileRect:
    out = rect.intersect(TileRect(0, 0, width - 1, height - 1))
    if out is None:
        raise ConfigurationError(f"rectangle {tuple(rect)} lies outside the {width}x{height} map")
    return out


def weight_grad_halo(kernel: int) -> int:
    """Boundary width the weight-gradient correlation reads around a tile."""
    return _ceil_div(kernel, 2)


def check_tileable(layers: Sequence[LayerSpec]):
    for i, spec in enumerate(layers):
        if spec.is_conv and (spec.kernel % 2 == 0 or spec.pad != spec.kernel // 2):
            raise ConfigurationError(
                f"layer {i}: tiled convolutions need an odd kernel with pad = K//2")
        if not spec.is_conv and spec.pad != 0:
            raise ConfigurationError(f"layer {i}: tiled maxpool must be unpadded")


# -- plans -------------------------------------------------------------------

@dataclass
class TilePlan:
    """Per-tile, per-map regions for one pass direction.

    ``entries[tile][m]`` describes map ``m`` (feature map ``X_m`` forward, delta
    ``dLoss/dX_m`` backward). ``required`` is what the tile holds once the map
    is available locally: after the halo exchange at a sync map, or after local
    computation inside a group.
    """

    direction: str
    grid: GridSpec
    dims: List[Tuple[int, int, int]]
    layers: List[LayerSpec]
    profile: GroupingProfile
    entries: List[List[TilePlanEntry]]

    @property
    def tiles(self):
        return self.grid.tiles

    def entry(self, tile, m) -> TilePlanEntry:
        return self.entries[tile][m]

    def owned(self, m):
        return [self.entries[t][m].owned for t in range(self.tiles)]

    def required(self, m):
        return [self.entries[t][m].required for t in range(self.tiles)]

    def is_sync_map(self, m):
        return m in self.profile.sync_maps()

    def output_region(self, tile, m) -> TileRect:
        """Region of map ``m`` a tile computes locally (before any exchange at ``m``)."""
        e = self.entries[tile][m]
        last = len(self.layers)
        if self.direction == FORWARD:
            return e.owned if (m in self.profile.boundaries and m not in (0, last)) else e.required
        return e.owned if m in self.profile.boundaries and m != last else e.required


def build_tile_plan(layers: Sequence[LayerSpec], dims: Sequence[Tuple[int, int, int]], grid: GridSpec,
                    profile: GroupingProfile,
                    needs: Optional[Dict[Tuple[int, int], TileRect]] = None) -> TilePlan:
    """Trace every tile's dependent regions through every group.

    ``needs`` maps ``(tile, map)`` to an extra region that must be held at that
    map; plans for the forward pass use it to retain what the backward pass
    reads.
    """
    layers = list(layers)
    n = len(layers)
    profile.validate(n)
    if len(dims) != n + 1:
        raise ConfigurationError("need dims for every map including the final output")
    needs = needs or {}
    owned = [partition_map(w, h, grid) for (w, h, _) in dims]
    entries: List[List[Optional[TilePlanEntry]]] = [[None] * (n + 1) for _ in range(grid.tiles)]

    def fit(t, m, rect):
        w, h, _ = dims[m]
        try:
            r = clip(rect, w, h)
        except ConfigurationError as exc:
            raise ConfigurationError(f"tile {t}, map {m}: {exc}") from None
        r = r.hull(owned[m][t]).hull(needs.get((t, m)))
        entries[t][m] = TilePlanEntry(m, owned[m][t], r)
        return r

    for t in range(grid.tiles):
        for g in profile.groups:
            if profile.direction == FORWARD:
                req = owned[g.e][t]
                if g.e == n:
                    req = fit(t, n, req)
                for m in range(g.e - 1, g.s - 1, -1):
                    try:
                        traced = backtrace_forward_region(req, layers[m])
                    except ConfigurationError as exc:
                        raise ConfigurationError(f"tile {t}, map {m}: {exc}") from None
                    req = fit(t, m, traced)
            else:
                req = owned[g.s][t]
                if g.s == 0:
                    req = fit(t, 0, req)
                for m in range(g.s, g.e):
                    try:
                        traced = forwardtrace_delta_region(req, layers[m])
                    except ConfigurationError as exc:
                        raise ConfigurationError(f"tile {t}, map {m + 1}: {exc}") from None
                    req = fit(t, m + 1, traced)
    return TilePlan(profile.direction, grid, [tuple(d) for d in dims], layers, profile, entries)


# -- halo exchange sets -------------------------------------------------------------

class HaloBlock(NamedTuple):
    peer: int
    rect: TileRect


def halo_decomposition(tile: int, required: Sequence[TileRect], owned: Sequence[TileRect],
                       grid: GridSpec) -> Tuple[List[HaloBlock], List[HaloBlock]]:
    """Receive and send sets of one tile at a sync map.

    ``required`` and ``owned`` hold every tile's rects at that map.
    """
    recv, send = [], []
    for peer in range(grid.tiles):
        if peer == tile:
            continue
        r = required[tile].intersect(owned[peer])
        s = owned[tile].intersect(required[peer])
        for rect, what in ((r, "receive from"), (s, "send to")):
            if rect is not None and not grid.adjacent(tile, peer):
                raise ConfigurationError(
                    f"tile {tile} would {what} non-adjacent tile {peer}; group too deep for tile size")
        if r is not None:
            recv.append(HaloBlock(peer, r))
        if s is not None:
            send.append(HaloBlock(peer, s))
    return recv, send


def exchange_schedule(plan: TilePlan, m: int):
    """``{tile: (recv, send)}`` at map ``m`` of ``plan``."""
    req, own = plan.required(m), plan.owned(m)
    return {t: halo_decomposition(t, req, own, plan.grid) for t in range(plan.tiles)}
