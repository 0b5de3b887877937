"""Dense CNN arithmetic and the untiled reference trainer.

Maps are stored channel-major as ``(depth, height, width)`` float32 arrays.
Filters are ``(K, K, in_channels, out_channels)``. Convolution is
cross-correlation with zero padding and no bias.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import kernels
from .errors import ConsistencyError, ShapeError

CONV = "convolutional"
MAXPOOL = "maxpool"
LEAKY = "leaky"
NO_ACTIVATION = "linear"

F32 = np.float32


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    kernel: int
    stride: int = 1
    pad: int = 0
    out_channels: Optional[int] = None
    activation: str = NO_ACTIVATION
    slope: float = 0.1

    def __post_init__(self):
        if self.kind not in (CONV, MAXPOOL):
            raise ShapeError(f"unknown layer kind {self.kind!r}")
        if self.kernel < 1 or self.stride < 1 or self.pad < 0:
            raise ShapeError(f"invalid kernel/stride/pad in {self}")
        if self.kind == CONV:
            if not self.out_channels or self.out_channels < 1:
                raise ShapeError("convolution needs a positive out_channels")
            if self.activation not in (NO_ACTIVATION, LEAKY):
                raise ShapeError(f"unknown activation {self.activation!r}")
        elif self.out_channels is not None or self.activation != NO_ACTIVATION:
            raise ShapeError("maxpool takes no filters and no activation")
        if self.pad >= self.kernel:
            raise ShapeError("padding must be smaller than the kernel")

    @property
    def is_conv(self):
        return self.kind == CONV

    def output_dims(self, width, height, depth):
        """Forward dimension formula; raises if the window does not fit."""
        k, s, p = self.kernel, self.stride, self.pad
        if width + 2 * p < k or height + 2 * p < k:
            raise ShapeError(f"{width}x{height} map too small for kernel {k} with pad {p}")
        out_d = self.out_channels if self.is_conv else depth
        return ((width + 2 * p - k) // s + 1, (height + 2 * p - k) // s + 1, out_d)


@dataclass
class TensorMap:
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=F32)
        if self.data.ndim == 2:
            self.data = self.data[None]
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ShapeError(f"expected a (depth, height, width) array, got {self.data.shape}")

    @classmethod
    def zeros(cls, width, height, depth=1):
        return cls(np.zeros((depth, height, width), dtype=F32))

    @property
    def depth(self):
        return self.data.shape[0]

    @property
    def height(self):
        return self.data.shape[1]

    @property
    def width(self):
        return self.data.shape[2]

    @property
    def dims(self):
        return (self.width, self.height, self.depth)

    def copy(self):
        return TensorMap(self.data.copy())


@dataclass
class FilterBank:
    kernel: int
    in_channels: int
    out_channels: int
    weights: np.ndarray = None
    gradients: np.ndarray = None

    def __post_init__(self):
        shape = (self.kernel, self.kernel, self.in_channels, self.out_channels)
        if self.weights is None:
            self.weights = np.zeros(shape, dtype=F32)
        self.weights = np.ascontiguousarray(self.weights, dtype=F32)
        if self.gradients is None:
            self.gradients = np.zeros(shape, dtype=F32)
        self.gradients = np.ascontiguousarray(self.gradients, dtype=F32)
        if self.weights.shape != shape or self.gradients.shape != shape:
            raise ShapeError(f"filter arrays must have shape {shape}")

    def zero_grad(self):
        self.gradients[...] = 0.0

    def copy(self):
        return FilterBank(self.kernel, self.in_channels, self.out_channels,
                          self.weights.copy(), self.gradients.copy())

    @property
    def nbytes(self):
        return self.weights.nbytes


@dataclass
class PoolIndexMap:
    """Argmax (row, col) inside each pooling window, shape (C, Ho, Wo, 2)."""

    indices: np.ndarray
    kernel: int
    stride: int
    pad: int = 0

    def __post_init__(self):
        idx = self.indices
        if idx.ndim != 4 or idx.shape[-1] != 2:
            raise ShapeError("pool indices must have shape (C, Ho, Wo, 2)")
        if idx.size and (idx.min() < 0 or idx.max() >= self.kernel):
            raise ConsistencyError("pool index outside its window")


# -- activation ---------------------------------------------------------------

def activate(z, spec):
    if spec.activation == LEAKY:
        return np.where(z > 0, z, z * F32(spec.slope)).astype(F32)
    return z


def activation_backward(delta, output, spec):
    """Turn a delta w.r.t. a layer's output into one w.r.t. its pre-activation.

    ``output`` is the post-activation value; its sign equals the sign of the
    pre-activation for any positive slope.
    """
    if spec.activation == LEAKY:
        return np.where(output > 0, delta, delta * F32(spec.slope)).astype(F32)
    return delta


# -- convolution ----------------------------------------------------------------

def _check_conv(spec, filters, depth):
    if spec.kind != CONV:
        raise ShapeError(f"expected a convolution spec, got {spec.kind}")
    if filters.kernel != spec.kernel or filters.out_channels != spec.out_channels:
        raise ShapeError("filter bank does not match layer spec")
    if depth != filters.in_channels:
        raise ShapeError(f"input depth {depth} != filter in_channels {filters.in_channels}")


def _pad(x, p, value=0.0):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (p, p), (p, p)), constant_values=value)


def conv_forward(x: TensorMap, filters: FilterBank, spec: LayerSpec) -> TensorMap:
    _check_conv(spec, filters, x.depth)
    spec.output_dims(*x.dims)
    z = kernels.conv_valid(_pad(x.data, spec.pad), filters.weights, spec.stride)
    return TensorMap(activate(z, spec))


def rotated_filters(weights):
    """Filters for the transposed pass: rotate 180 degrees and swap channels."""
    return np.ascontiguousarray(weights[::-1, ::-1].transpose(0, 1, 3, 2))


def dilate_into(buf, dz, first_row, first_col, stride):
    """Write ``dz`` into ``buf`` with ``stride - 1`` zeros between elements."""
    f, hq, wq = dz.shape
    buf[:, first_row:first_row + stride * (hq - 1) + 1:stride,
        first_col:first_col + stride * (wq - 1) + 1:stride] = dz


def transposed_conv(dz, weights, spec, in_height, in_width):
    """Delta at a convolution's input from the delta at its pre-activation output.

    Zero-inserts ``dz`` by the stride, pads by ``K - 1 - pad`` and correlates
    with the rotated filters.
    """
    k, s, p = spec.kernel, spec.stride, spec.pad
    f, ho, wo = dz.shape
    # dilated coordinate u = o * s; row y of the result reads u in [y + p - k + 1, y + p]
    lo = p - k + 1
    buf = np.zeros((f, in_height + k - 1, in_width + k - 1), dtype=F32)
    o_max_y = min(ho - 1, (in_height - 1 + p) // s)
    o_max_x = min(wo - 1, (in_width - 1 + p) // s)
    if o_max_y >= 0 and o_max_x >= 0:
        dilate_into(buf, dz[:, :o_max_y + 1, :o_max_x + 1], -lo, -lo, s)
    return kernels.conv_valid(buf, rotated_filters(weights), 1)


def conv_backward_delta(delta_out: TensorMap, filters: FilterBank, spec: LayerSpec,
                        input_dims: Optional[Tuple[int, int]] = None,
                        output: Optional[TensorMap] = None) -> TensorMap:
    """Delta w.r.t. the layer input.

    ``delta_out`` is taken w.r.t. the layer output; when ``output`` is given the
    activation derivative is applied first. ``input_dims`` is ``(width, height)``
    and defaults to the smallest input that produces ``delta_out``'s size.
    """
    if spec.kind != CONV:
        raise ShapeError("conv_backward_delta needs a convolution spec")
    if delta_out.depth != filters.out_channels:
        raise ShapeError(f"delta depth {delta_out.depth} != out_channels {filters.out_channels}")
    k, s, p = spec.kernel, spec.stride, spec.pad
    if input_dims is None:
        input_dims = ((delta_out.width - 1) * s + k - 2 * p, (delta_out.height - 1) * s + k - 2 * p)
    in_w, in_h = input_dims
    exp = spec.output_dims(in_w, in_h, filters.in_channels)
    if exp[:2] != (delta_out.width, delta_out.height):
        raise ShapeError(f"input {in_w}x{in_h} does not produce a {delta_out.width}x{delta_out.height} output")
    dz = delta_out.data
    if output is not None:
        if output.data.shape != dz.shape:
            raise ShapeError("output and delta shapes differ")
        dz = activation_backward(dz, output.data, spec)
    return TensorMap(transposed_conv(dz, filters.weights, spec, in_h, in_w))


def conv_backward_weights(x: TensorMap, delta_out: TensorMap, spec: LayerSpec,
                          filters: Optional[FilterBank] = None,
                          output: Optional[TensorMap] = None) -> np.ndarray:
    """Weight gradient of one convolution; accumulated into ``filters`` if given."""
    if spec.kind != CONV:
        raise ShapeError("conv_backward_weights needs a convolution spec")
    ow, oh, od = spec.output_dims(*x.dims)
    if (delta_out.width, delta_out.height, delta_out.depth) != (ow, oh, od):
        raise ShapeError(f"delta {delta_out.dims} inconsistent with input {x.dims}")
    dz = delta_out.data
    if output is not None:
        dz = activation_backward(dz, output.data, spec)
    k, s = spec.kernel, spec.stride
    xp = _pad(x.data, spec.pad)
    g = kernels.wgrad_valid(xp, np.ascontiguousarray(dz), k, s)
    if filters is not None:
        if filters.gradients.shape != g.shape:
            raise ShapeError("gradient shape does not match filter bank")
        filters.gradients += g
    return g


# -- pooling ----------------------------------------------------------------------

def maxpool_forward(x: TensorMap, spec: LayerSpec):
    if spec.kind != MAXPOOL:
        raise ShapeError("maxpool_forward needs a maxpool spec")
    spec.output_dims(*x.dims)
    xp = _pad(x.data, spec.pad, -np.inf)
    out, idx = kernels.maxpool_valid(np.ascontiguousarray(xp), spec.kernel, spec.stride)
    return TensorMap(out), PoolIndexMap(idx, spec.kernel, spec.stride, spec.pad)


def maxpool_backward(delta_out: TensorMap, indices: PoolIndexMap, input_dims) -> TensorMap:
    """Route each output delta to its window's argmax; ``input_dims`` is (width, height[, depth])."""
    in_w, in_h = input_dims[0], input_dims[1]
    idx = indices.indices
    if idx.shape[:3] != delta_out.data.shape:
        raise ConsistencyError(f"index map {idx.shape[:3]} does not match delta {delta_out.data.shape}")
    p, k, s = indices.pad, indices.kernel, indices.stride
    ho, wo = idx.shape[1], idx.shape[2]
    if (in_h + 2 * p - k) // s + 1 != ho or (in_w + 2 * p - k) // s + 1 != wo:
        raise ConsistencyError("index map was produced for different input dimensions")
    dx = kernels.maxpool_scatter(np.ascontiguousarray(delta_out.data), idx, s, in_h + 2 * p, in_w + 2 * p)
    return TensorMap(dx[:, p:p + in_h, p:p + in_w])


# -- SGD --------------------------------------------------------------------------

def sgd_update(filters: FilterBank, learning_rate: float, batch_size: int):
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    filters.weights -= F32(learning_rate) * filters.gradients / F32(batch_size)
    filters.zero_grad()


# -- model + reference trainer ---------------------------------------------------------

@dataclass
class Model:
    input_dims: Tuple[int, int, int]
    layers: List[LayerSpec]
    filters: List[Optional[FilterBank]] = field(default_factory=list)

    def __post_init__(self):
        self.input_dims = tuple(int(v) for v in self.input_dims)
        if not self.filters:
            self.filters = []
            for spec, (w, h, d) in zip(self.layers, self.map_dims()):
                self.filters.append(FilterBank(spec.kernel, d, spec.out_channels) if spec.is_conv else None)
        if len(self.filters) != len(self.layers):
            raise ShapeError("one filter slot per layer required")
        for spec, fb, (w, h, d) in zip(self.layers, self.filters, self.map_dims()):
            if spec.is_conv:
                if fb is None:
                    raise ShapeError("convolution without filters")
                _check_conv(spec, fb, d)
            elif fb is not None:
                raise ShapeError("maxpool layer cannot carry filters")

    def map_dims(self):
        """(width, height, depth) of every map, input first, final output last."""
        dims = [self.input_dims]
        for spec in self.layers:
            dims.append(spec.output_dims(*dims[-1]))
        return dims

    def copy(self):
        return Model(self.input_dims, list(self.layers), [f.copy() if f else None for f in self.filters])

    def conv_layers(self):
        return [i for i, s in enumerate(self.layers) if s.is_conv]

    def zero_grad(self):
        for fb in self.filters:
            if fb is not None:
                fb.zero_grad()

    @property
    def filter_bytes(self):
        return sum(fb.nbytes for fb in self.filters if fb is not None)


@dataclass
class StepResult:
    activations: List[TensorMap]
    deltas: List[TensorMap]
    gradients: List[Optional[np.ndarray]]
    loss: float


def reference_forward(model: Model, sample: TensorMap):
    if sample.dims != model.input_dims:
        raise ShapeError(f"sample dims {sample.dims} != model input {model.input_dims}")
    acts = [sample]
    pools = []
    for spec, fb in zip(model.layers, model.filters):
        if spec.is_conv:
            acts.append(conv_forward(acts[-1], fb, spec))
            pools.append(None)
        else:
            out, idx = maxpool_forward(acts[-1], spec)
            acts.append(out)
            pools.append(idx)
    return acts, pools


def reference_train_step(model: Model, sample: TensorMap, target: TensorMap,
                         accumulate: bool = True) -> StepResult:
    """Untiled forward + backward for one sample under half-sum-of-squares loss."""
    acts, pools = reference_forward(model, sample)
    out = acts[-1]
    if target.dims != out.dims:
        raise ShapeError(f"target dims {target.dims} != output dims {out.dims}")
    diff = out.data - target.data
    loss = 0.5 * float(np.sum(diff.astype(np.float64) ** 2))
    n = len(model.layers)
    deltas: List[Optional[TensorMap]] = [None] * (n + 1)
    grads: List[Optional[np.ndarray]] = [None] * n
    deltas[n] = TensorMap(diff.astype(F32))
    for l in range(n - 1, -1, -1):
        spec = model.layers[l]
        w, h, _ = acts[l].dims
        if spec.is_conv:
            dz = TensorMap(activation_backward(deltas[l + 1].data, acts[l + 1].data, spec))
            grads[l] = conv_backward_weights(acts[l], dz, spec,
                                             model.filters[l] if accumulate else None)
            deltas[l] = conv_backward_delta(dz, model.filters[l], spec, (w, h))
        else:
            deltas[l] = maxpool_backward(deltas[l + 1], pools[l], (w, h))
    return StepResult(acts, deltas, grads, loss)


def reference_train_batch(model: Model, samples: Sequence[TensorMap], targets: Sequence[TensorMap],
                          learning_rate: float) -> List[StepResult]:
    """One SGD step over a batch: accumulate every sample's gradient, then update once."""
    if len(samples) != len(targets) or not samples:
        raise ValueError("need one target per sample and a non-empty batch")
    model.zero_grad()
    results = [reference_train_step(model, x, t) for x, t in zip(samples, targets)]
    for fb in model.filters:
        if fb is not None:
            sgd_update(fb, learning_rate, len(samples))
    return results


__all__ = [
    "CONV", "MAXPOOL", "LEAKY", "NO_ACTIVATION", "LayerSpec", "TensorMap", "FilterBank",
    "PoolIndexMap", "Model", "StepResult", "activate", "activation_backward", "conv_forward",
    "conv_backward_delta", "conv_backward_weights", "maxpool_forward", "maxpool_backward",
    "sgd_update", "reference_forward", "reference_train_step", "reference_train_batch",
    "transposed_conv", "rotated_filters", "dilate_into",
]
