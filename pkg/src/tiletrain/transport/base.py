from __future__ import annotations

import threading
import time
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Tuple

from ..errors import TransportTimeout
from .wire import HALO_BLOCK, Message, decode_frame, encode_frame


class Selector(NamedTuple):
    """Fields a receiver waits for; ``None`` matches anything."""
    kind: Optional[str] = None
    src: Optional[int] = None
    boundary: Optional[int] = None
    direction: Optional[str] = None

    def matches(self, msg: Message) -> bool:
        return ((self.kind is None or msg.kind == self.kind)
                and (self.src is None or msg.src == self.src)
                and (self.boundary is None or msg.boundary == self.boundary)
                and (self.direction is None or msg.direction == self.direction))


@dataclass
class TransportStats:
    """Payload-byte and message counters, by kind and by halo boundary."""

    sent_bytes: Dict[str, int] = field(default_factory=lambda: defaultdict(int))
    sent_msgs: Dict[str, int] = field(default_factory=lambda: defaultdict(int))
    recv_bytes: Dict[str, int] = field(default_factory=lambda: defaultdict(int))
    recv_msgs: Dict[str, int] = field(default_factory=lambda: defaultdict(int))
    frame_bytes: int = 0
    # (direction, boundary map) -> payload bytes of HaloBlocks sent there
    halo_bytes: Dict[Tuple[str, int], int] = field(default_factory=lambda: defaultdict(int))
    halo_msgs: Dict[Tuple[str, int], int] = field(default_factory=lambda: defaultdict(int))

    def on_send(self, msg: Message):
        self.sent_bytes[msg.kind] += msg.payload_bytes
        self.sent_msgs[msg.kind] += 1
        self.frame_bytes += msg.frame_bytes
        if msg.kind == HALO_BLOCK:
            self.halo_bytes[(msg.direction, msg.boundary)] += msg.payload_bytes
            self.halo_msgs[(msg.direction, msg.boundary)] += 1

    def on_recv(self, msg: Message):
        self.recv_bytes[msg.kind] += msg.payload_bytes
        self.recv_msgs[msg.kind] += 1

    def snapshot(self) -> "TransportStats":
        return TransportStats(defaultdict(int, self.sent_bytes), defaultdict(int, self.sent_msgs),
                              defaultdict(int, self.recv_bytes), defaultdict(int, self.recv_msgs),
                              self.frame_bytes, defaultdict(int, self.halo_bytes),
                              defaultdict(int, self.halo_msgs))

    def since(self, earlier: "TransportStats") -> "TransportStats":
        def diff(a, b):
            out = defaultdict(int)
            for k in set(a) | set(b):
                v = a.get(k, 0) - b.get(k, 0)
                if v:
                    out[k] = v
            return out
        return TransportStats(diff(self.sent_bytes, earlier.sent_bytes),
                              diff(self.sent_msgs, earlier.sent_msgs),
                              diff(self.recv_bytes, earlier.recv_bytes),
                              diff(self.recv_msgs, earlier.recv_msgs),
                              self.frame_bytes - earlier.frame_bytes,
                              diff(self.halo_bytes, earlier.halo_bytes),
                              diff(self.halo_msgs, earlier.halo_msgs))

    def merge(self, other: "TransportStats") -> "TransportStats":
        out = self.snapshot()
        for name in ("sent_bytes", "sent_msgs", "recv_bytes", "recv_msgs", "halo_bytes", "halo_msgs"):
            target = getattr(out, name)
            for k, v in getattr(other, name).items():
                target[k] += v
        out.frame_bytes += other.frame_bytes
        return out

    def as_dict(self):
        return {
            "sent_bytes": dict(self.sent_bytes), "sent_msgs": dict(self.sent_msgs),
            "recv_bytes": dict(self.recv_bytes), "recv_msgs": dict(self.recv_msgs),
            "frame_bytes": self.frame_bytes,
            "halo_bytes": {f"{d}:{b}": v for (d, b), v in sorted(self.halo_bytes.items())},
            "halo_msgs": {f"{d}:{b}": v for (d, b), v in sorted(self.halo_msgs.items())},
        }

    def conserved(self) -> bool:
        kinds = set(self.sent_bytes) | set(self.recv_bytes)
        return all(self.sent_bytes.get(k, 0) == self.recv_bytes.get(k, 0)
                   and self.sent_msgs.get(k, 0) == self.recv_msgs.get(k, 0) for k in kinds)


class Mailboxes:
    """Per-tile arrival-ordered queues with selector-based removal."""

    def __init__(self, tiles):
        self.cond = threading.Condition()
        self.boxes: Dict[int, List[Message]] = {t: [] for t in tiles}
        self.log: Dict[int, List[tuple]] = {t: [] for t in tiles}

    def put(self, msg: Message):
        with self.cond:
            self.boxes[msg.dst].append(msg)
            self.cond.notify_all()

    def take(self, tile, selector: Selector) -> Optional[Message]:
        with self.cond:
            box = self.boxes[tile]
            for i, msg in enumerate(box):
                if selector.matches(msg):
                    self.log[tile].append(msg.key())
                    return box.pop(i)
        return None

    def pending(self):
        with self.cond:
            return sum(len(b) for b in self.boxes.values())

    def wait(self, timeout):
        with self.cond:
            self.cond.wait(timeout)


class Transport:
    """Common surface of the in-process and TCP backends.

    Sends never block on the receiver; ``try_recv`` returns ``None`` when no
    queued message matches, which lets cooperative schedulers poll.
    """

    blocking_wait = False
    timeout = 30.0

    def __init__(self, local_tiles, roundtrip=True):
        self.local_tiles = sorted(local_tiles)
        self.mail = Mailboxes(self.local_tiles)
        self.stats = TransportStats()
        self.roundtrip = roundtrip
        self._lock = threading.Lock()

    def _deliver_local(self, msg: Message):
        if self.roundtrip:
            msg = decode_frame(encode_frame(msg))
        self.mail.put(msg)

    def send(self, msg: Message):
        raise NotImplementedError

    def try_recv(self, tile, selector: Selector) -> Optional[Message]:
        self.check()
        msg = self.mail.take(tile, selector)
        if msg is not None:
            with self._lock:
                self.stats.on_recv(msg)
        return msg

    def recv_matching(self, tile, selector: Selector, timeout: Optional[float] = None) -> Message:
        """Block until a message for ``tile`` matches ``selector``."""
        timeout = self.timeout if timeout is None else timeout
        deadline = time.monotonic() + timeout
        while True:
            msg = self.try_recv(tile, selector)
            if msg is not None:
                return msg
            left = deadline - time.monotonic()
            if left <= 0:
                raise TransportTimeout(selector, timeout)
            self.wait_for_activity(min(left, 0.05))

    def wait_for_activity(self, timeout):
        self.mail.wait(timeout)

    def check(self):
        """Raise any fatal error a background I/O thread recorded."""

    def quiesce(self, timeout=None) -> bool:
        """True once no message is queued or in flight for local tiles."""
        return self.mail.pending() == 0

    def close(self):
        pass

    def receive_log(self, tile):
        return list(self.mail.log[tile])
