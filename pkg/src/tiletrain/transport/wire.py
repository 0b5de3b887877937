"""Binary frame layout shared by every backend.

::

    magic "TGRD" | version u8 | kind u8 | direction u8 | src u16 | dst u16 |
    boundary u16 | x1 y1 x2 y2 i32 | depth u32 | payload_len u32 |
    payload (float32) | crc32 u32

All integers and floats are little-endian. The checksum covers header and
payload.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..errors import FrameError
from ..geometry import BACKWARD, FORWARD, TileRect

MAGIC = b"TGRD"
VERSION = 1
HEADER = struct.Struct("<4sBBBHHHiiiiII")
CRC = struct.Struct("<I")
HEADER_SIZE = HEADER.size
TRAILER_SIZE = CRC.size

HALO_BLOCK = "HaloBlock"
INPUT_SCATTER = "InputScatter"
DELTA_SCATTER = "DeltaScatter"
PARTIAL_GRAD = "PartialGrad"
WEIGHT_BROADCAST = "WeightBroadcast"
CONTROL = "Control"
OUTPUT_GATHER = "OutputGather"

KINDS = (HALO_BLOCK, INPUT_SCATTER, DELTA_SCATTER, PARTIAL_GRAD, WEIGHT_BROADCAST, CONTROL,
         OUTPUT_GATHER)
KIND_CODES = {k: i for i, k in enumerate(KINDS)}
DIRECTION_CODES = {FORWARD: 0, BACKWARD: 1}
DIRECTION_NAMES = {v: k for k, v in DIRECTION_CODES.items()}

# payload is interpreted geometrically (rect area x depth) for every kind but Control
GEOMETRIC = frozenset(KINDS) - {CONTROL}


@dataclass(eq=False)
class Message:
    kind: str
    src: int
    dst: int
    direction: str
    boundary: int
    rect: Optional[TileRect]
    depth: int
    payload: np.ndarray

    def __post_init__(self):
        if self.kind not in KIND_CODES:
            raise FrameError(f"unknown message kind {self.kind!r}")
        if self.direction not in DIRECTION_CODES:
            raise FrameError(f"unknown direction {self.direction!r}")
        self.payload = np.ascontiguousarray(self.payload, dtype=np.float32).reshape(-1)
        if self.kind in GEOMETRIC:
            if self.rect is None:
                raise FrameError(f"{self.kind} needs a rect")
            if self.payload.size != self.rect.area * self.depth:
                raise FrameError(
                    f"{self.kind} payload has {self.payload.size} elements, "
                    f"rect x depth is {self.rect.area * self.depth}")

    @property
    def payload_bytes(self):
        return self.payload.size * 4

    @property
    def frame_bytes(self):
        return HEADER_SIZE + self.payload_bytes + TRAILER_SIZE

    def block(self):
        """Payload reshaped to ``(depth, height, width)``."""
        return self.payload.reshape(self.depth, self.rect.height, self.rect.width)

    def key(self):
        return (self.kind, self.src, self.dst, self.direction, self.boundary,
                None if self.rect is None else tuple(self.rect))


def encode_frame(msg: Message) -> bytes:
    rect = msg.rect if msg.rect is not None else (0, 0, 0, 0)
    x1, y1, x2, y2 = rect
    body = msg.payload.astype("<f4", copy=False).tobytes()
    header = HEADER.pack(MAGIC, VERSION, KIND_CODES[msg.kind], DIRECTION_CODES[msg.direction],
                         msg.src, msg.dst, msg.boundary, x1, y1, x2, y2, msg.depth, len(body))
    return header + body + CRC.pack(zlib.crc32(body, zlib.crc32(header)))


def parse_header(header: bytes):
    if len(header) < HEADER_SIZE:
        raise FrameError(f"truncated header ({len(header)} bytes)")
    fields = HEADER.unpack(header[:HEADER_SIZE])
    if fields[0] != MAGIC:
        raise FrameError(f"bad magic {fields[0]!r}")
    if fields[1] != VERSION:
        raise FrameError(f"unsupported version {fields[1]}")
    if fields[2] >= len(KINDS):
        raise FrameError(f"unknown kind code {fields[2]}")
    if fields[3] not in DIRECTION_NAMES:
        raise FrameError(f"unknown direction code {fields[3]}")
    if fields[12] % 4:
        raise FrameError("payload length is not a whole number of float32 values")
    return fields


def decode_frame(frame: bytes) -> Message:
    fields = parse_header(frame)
    payload_len = fields[12]
    if len(frame) != HEADER_SIZE + payload_len + TRAILER_SIZE:
        raise FrameError(f"frame is {len(frame)} bytes, header announces "
                         f"{HEADER_SIZE + payload_len + TRAILER_SIZE}")
    body = frame[HEADER_SIZE:HEADER_SIZE + payload_len]
    (crc,) = CRC.unpack(frame[HEADER_SIZE + payload_len:])
    if crc != zlib.crc32(body, zlib.crc32(frame[:HEADER_SIZE])):
        raise FrameError("checksum mismatch")
    _, _, kind, direction, src, dst, boundary, x1, y1, x2, y2, depth, _ = fields
    kind = KINDS[kind]
    rect = None
    if kind in GEOMETRIC or (x1, y1, x2, y2) != (0, 0, 0, 0):
        try:
            rect = TileRect(x1, y1, x2, y2)
        except ValueError as exc:
            raise FrameError(str(exc)) from None
    payload = np.frombuffer(body, dtype="<f4").astype(np.float32)
    try:
        return Message(kind, src, dst, DIRECTION_NAMES[direction], boundary, rect, depth, payload)
    except FrameError:
        raise
    except ValueError as exc:
        raise FrameError(str(exc)) from None


def read_frame(read_exact) -> Message:
    """Read one frame with ``read_exact(n) -> bytes`` (raises ``EOFError`` on a short read)."""
    header = read_exact(HEADER_SIZE)
    fields = parse_header(header)
    rest = read_exact(fields[12] + TRAILER_SIZE)
    return decode_frame(header + rest)


def control_payload(*words: int) -> np.ndarray:
    """Pack unsigned 32-bit words into a float32 payload without changing their bits."""
    return np.asarray(words, dtype="<u4").view("<f4").astype(np.float32)


def control_words(msg: Message):
    return [int(v) for v in msg.payload.astype("<f4").view("<u4")]
