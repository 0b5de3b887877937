from __future__ import annotations

from .base import Transport
from .wire import Message


class InProcessTransport(Transport):
    """All tiles in one process; every message still crosses the wire codec.

    Delivery order is the order in which the cooperative scheduler issues
    sends, which is fixed for a given plan, so runs are reproducible.
    """

    def __init__(self, tiles, roundtrip=True):
        super().__init__(range(tiles) if isinstance(tiles, int) else tiles, roundtrip)

    def send(self, msg: Message):
        if msg.dst not in self.mail.boxes:
            raise KeyError(f"no endpoint for tile {msg.dst}")
        with self._lock:
            self.stats.on_send(msg)
        self._deliver_local(msg)
