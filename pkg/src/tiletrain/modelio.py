"""Model configs, binary weight/tensor files and seeded synthetic fixtures.

Config grammar (Darknet-like)::

    # comment            ; also a comment
    [net]                width=, height=, channels=
    [convolutional]      filters=, size=, stride=1, pad=0|1, activation=linear|leaky
    [maxpool]            size=, stride=<size>

``pad=1`` means "same" padding of ``size // 2``. Keys outside these lists
are rejected.

Binary files are little-endian::

    weights: "TGWT" | version u32 | banks u32 | per bank: K K Cin Cout u32 | float32 data
    tensor:  "TGTN" | version u32 | ndim u32  | dims u32 ...                | float32 data

Weight banks appear in layer order; data is in ``(K, K, Cin, Cout)`` C order.
Tensors are stored ``(depth, height, width)``.
"""
from __future__ import annotations

import math
import struct
from importlib import resources
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import FormatError, ParseError, ShapeError
from .tensor import CONV, LEAKY, MAXPOOL, NO_ACTIVATION, F32, LayerSpec, Model, TensorMap

FORMAT_VERSION = 1
WEIGHTS_MAGIC = b"TGWT"
TENSOR_MAGIC = b"TGTN"

_SECTIONS = {
    "net": {"width": True, "height": True, "channels": True},
    "convolutional": {"filters": True, "size": True, "stride": False, "pad": False, "activation": False},
    "maxpool": {"size": True, "stride": False},
}
_INT_KEYS = {"width", "height", "channels", "filters", "size", "stride", "pad"}


def _sections(text):
    """Yield ``(name, line, {key: (value, line)})`` for every section."""
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].split(";", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ParseError(f"malformed section header {raw.strip()!r}", lineno)
            if current is not None:
                yield current
            name = line[1:-1].strip().lower()
            if name not in _SECTIONS:
                raise ParseError(f"unknown section [{name}]", lineno)
            current = (name, lineno, {})
            continue
        if current is None:
            raise ParseError("key outside any section", lineno)
        if "=" not in line:
            raise ParseError(f"expected key=value, got {line!r}", lineno)
        key, value = (p.strip() for p in line.split("=", 1))
        key = key.lower()
        if key not in _SECTIONS[current[0]]:
            raise ParseError(f"unknown key {key!r} in [{current[0]}]", lineno)
        if key in current[2]:
            raise ParseError(f"duplicate key {key!r}", lineno)
        if key in _INT_KEYS:
            try:
                value = int(value)
            except ValueError:
                raise ParseError(f"{key} must be an integer, got {value!r}", lineno) from None
        current[2][key] = (value, lineno)
    if current is not None:
        yield current


def parse_model_config(text: str) -> Tuple[Tuple[int, int, int], List[LayerSpec]]:
    """Return ``((width, height, channels), layers)``; every layer chain is shape-checked."""
    input_dims = None
    layers: List[LayerSpec] = []
    for name, lineno, keys in _sections(text):
        for key, required in _SECTIONS[name].items():
            if required and key not in keys:
                raise ParseError(f"[{name}] missing required key {key!r}", lineno)
        for key, (value, kl) in keys.items():
            if key in _INT_KEYS and key != "pad" and value <= 0:
                raise ParseError(f"{key} must be positive, got {value}", kl)
        get = lambda k, default=None: keys[k][0] if k in keys else default  # noqa: E731
        if name == "net":
            if input_dims is not None:
                raise ParseError("[net] given twice", lineno)
            if layers:
                raise ParseError("[net] must come before the layers", lineno)
            input_dims = (get("width"), get("height"), get("channels"))
            continue
        if input_dims is None:
            raise ParseError(f"[{name}] before [net]", lineno)
        try:
            if name == "convolutional":
                pad = get("pad", 0)
                if pad not in (0, 1):
                    raise ParseError(f"pad is a 0/1 flag, got {pad}", keys["pad"][1])
                act = str(get("activation", NO_ACTIVATION)).lower()
                if act not in (LEAKY, NO_ACTIVATION):
                    raise ParseError(f"unsupported activation {act!r}", keys["activation"][1])
                size = get("size")
                spec = LayerSpec(CONV, size, get("stride", 1), size // 2 if pad else 0, get("filters"), act)
            else:
                size = get("size")
                spec = LayerSpec(MAXPOOL, size, get("stride", size))
            dims = input_dims
            for s in layers:
                dims = s.output_dims(*dims)
            spec.output_dims(*dims)
        except ShapeError as exc:
            raise ParseError(str(exc), lineno) from None
        layers.append(spec)
    if input_dims is None:
        raise ParseError("config has no [net] section", None)
    if not layers:
        raise ParseError("config has no layers", None)
    return input_dims, layers


def format_model_config(input_dims, layers: Sequence[LayerSpec]) -> str:
    w, h, c = input_dims
    out = ["[net]", f"width={w}", f"height={h}", f"channels={c}"]
    for s in layers:
        if s.is_conv:
            if s.pad not in (0, s.kernel // 2):
                raise ShapeError("config grammar only expresses pad 0 or size//2")
            out += ["", "[convolutional]", f"filters={s.out_channels}", f"size={s.kernel}",
                    f"stride={s.stride}", f"pad={1 if s.pad else 0}", f"activation={s.activation}"]
        else:
            if s.pad:
                raise ShapeError("config grammar has no maxpool padding")
            out += ["", "[maxpool]", f"size={s.kernel}", f"stride={s.stride}"]
    return "\n".join(out) + "\n"


BUILTIN_MODELS = {"desk6": "desk6.cfg", "yolov2-16": "yolov2_16.cfg"}


def builtin_config(name: str) -> str:
    if name not in BUILTIN_MODELS:
        raise KeyError(f"unknown built-in model {name!r}; choose from {sorted(BUILTIN_MODELS)}")
    return resources.files("tiletrain").joinpath("configs").joinpath(BUILTIN_MODELS[name]).read_text()


def load_model_config(name_or_path: str):
    """Parse a built-in model name or a config file path."""
    if name_or_path in BUILTIN_MODELS:
        return parse_model_config(builtin_config(name_or_path))
    return parse_model_config(Path(name_or_path).read_text())


# -- binary formats ---------------------------------------------------------------

_U32 = struct.Struct("<I")


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data, self.pos, self.what = data, 0, what

    def take(self, n):
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated {self.what} file at byte {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self):
        return _U32.unpack(self.take(4))[0]

    def floats(self, count):
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(F32)

    def header(self, magic):
        got = self.take(4)
        if got != magic:
            raise FormatError(f"bad magic {got!r}, expected {magic!r}")
        version = self.u32()
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported {self.what} format version {version}")

    def finish(self):
        if self.pos != len(self.data):
            raise FormatError(f"{len(self.data) - self.pos} trailing bytes in {self.what} file")


def _f32_bytes(a):
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def encode_weights(model: Model) -> bytes:
    banks = [fb for fb in model.filters if fb is not None]
    out = [WEIGHTS_MAGIC, _U32.pack(FORMAT_VERSION), _U32.pack(len(banks))]
    for fb in banks:
        out.append(struct.pack("<4I", *fb.weights.shape))
        out.append(_f32_bytes(fb.weights))
    return b"".join(out)


def decode_weights(data: bytes, model: Model) -> None:
    """Load weight banks into ``model`` after checking every shape."""
    r = _Reader(data, "weights")
    r.header(WEIGHTS_MAGIC)
    slots = [i for i, fb in enumerate(model.filters) if fb is not None]
    count = r.u32()
    if count != len(slots):
        raise FormatError(f"file has {count} weight banks, model has {len(slots)}")
    loaded = []
    for i in slots:
        shape = tuple(r.u32() for _ in range(4))
        if shape != model.filters[i].weights.shape:
            raise FormatError(f"layer {i}: file shape {shape} != model {model.filters[i].weights.shape}")
        loaded.append(r.floats(int(np.prod(shape))).reshape(shape))
    r.finish()
    for i, w in zip(slots, loaded):
        model.filters[i].weights[...] = w


def save_weights(path, model: Model):
    Path(path).write_bytes(encode_weights(model))


def load_weights(path, model: Model):
    decode_weights(Path(path).read_bytes(), model)
    return model


def encode_tensor(t: TensorMap) -> bytes:
    shape = t.data.shape
    return b"".join([TENSOR_MAGIC, _U32.pack(FORMAT_VERSION), _U32.pack(len(shape)),
                     struct.pack(f"<{len(shape)}I", *shape), _f32_bytes(t.data)])


def decode_tensor(data: bytes, expect_dims: Optional[Tuple[int, int, int]] = None) -> TensorMap:
    r = _Reader(data, "tensor")
    r.header(TENSOR_MAGIC)
    ndim = r.u32()
    if ndim != 3:
        raise FormatError(f"tensor files hold 3-d maps, got ndim={ndim}")
    shape = tuple(r.u32() for _ in range(ndim))
    if 0 in shape:
        raise FormatError(f"empty tensor shape {shape}")
    arr = r.floats(int(np.prod(shape))).reshape(shape)
    r.finish()
    t = TensorMap(arr)
    if expect_dims is not None and t.dims != tuple(expect_dims):
        raise FormatError(f"tensor dims {t.dims} != expected {tuple(expect_dims)}")
    return t


def save_tensor(path, t: TensorMap):
    Path(path).write_bytes(encode_tensor(t))


def load_tensor(path, expect_dims=None) -> TensorMap:
    return decode_tensor(Path(path).read_bytes(), expect_dims)


# -- synthetic fixtures --------------------------------------------------------------

LCG_MULTIPLIER = 6364136223846793005
LCG_INCREMENT = 1442695040888963407
_MASK = (1 << 64) - 1


class Lcg:
    """64-bit LCG; each draw maps the top 24 state bits onto ``[-1, 1)``.

    ``state <- state * 6364136223846793005 + 1442695040888963407 (mod 2**64)``,
    ``value = 2 * (state >> 40) / 2**24 - 1``. The first draw advances the
    seed once, so seed 0 does not start at a fixed point.
    """

    def __init__(self, seed: int):
        self.state = seed & _MASK

    def next(self) -> float:
        self.state = (self.state * LCG_MULTIPLIER + LCG_INCREMENT) & _MASK
        return 2.0 * ((self.state >> 40) / float(1 << 24)) - 1.0

    def fill(self, count: int) -> np.ndarray:
        out = np.empty(count, dtype=np.float64)
        for i in range(count):
            out[i] = self.next()
        return out.astype(F32)


def synth_sample(seed: int, dims) -> TensorMap:
    """``(width, height, depth)`` map of LCG draws in row-major ``(depth, height, width)`` order."""
    w, h, d = dims
    return TensorMap(Lcg(seed).fill(w * h * d).reshape(d, h, w))


def synth_model(seed: int, depth: Optional[int] = None, config: Optional[str] = None) -> Model:
    """Seeded model from ``config`` text (default: the desk-scale six-layer front).

    ``depth`` keeps only the first layers. Each bank draws from one LCG stream
    in layer order and is scaled by ``min(1, sqrt(3 / fan_in))`` so weights
    stay in ``[-1, 1]`` and activations keep roughly unit scale.
    """
    input_dims, layers = parse_model_config(config if config is not None else builtin_config("desk6"))
    if depth is not None:
        if not 1 <= depth <= len(layers):
            raise ShapeError(f"depth must be in 1..{len(layers)}")
        layers = layers[:depth]
    model = Model(input_dims, layers)
    rng = Lcg(seed)
    for fb in model.filters:
        if fb is None:
            continue
        fan_in = fb.kernel * fb.kernel * fb.in_channels
        scale = min(1.0, math.sqrt(3.0 / fan_in))
        fb.weights[...] = (rng.fill(fb.weights.size) * F32(scale)).reshape(fb.weights.shape)
    return model


def synth_batch(seed: int, model: Model, batch: int, step: int = 0):
    """``batch`` (sample, target) pairs for training step ``step``.

    Sample ``i`` uses LCG seed ``base + 2i`` and its target ``base + 2i + 1``,
    with ``base = (seed * 1000003 + step) * 1000003``.
    """
    dims = model.map_dims()
    base = (seed * 1000003 + step) * 1000003
    samples = [synth_sample(base + 2 * i, dims[0]) for i in range(batch)]
    targets = [synth_sample(base + 2 * i + 1, dims[-1]) for i in range(batch)]
    return samples, targets


__all__ = [
    "parse_model_config", "format_model_config", "load_model_config", "builtin_config",
    "BUILTIN_MODELS", "save_weights", "load_weights", "encode_weights", "decode_weights",
    "save_tensor", "load_tensor", "encode_tensor", "decode_tensor", "Lcg", "synth_sample",
    "synth_model", "synth_batch", "LCG_MULTIPLIER", "LCG_INCREMENT",
]
