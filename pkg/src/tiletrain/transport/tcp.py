"""TCP backend: one listening socket per process, full mesh of outgoing links.

Each process hosts the tiles whose roster entry names its ``host:port``.
Frames to co-located tiles bypass the network. A reader thread per incoming
connection decodes frames into the shared mailboxes, so ``send`` never
waits on the peer's scheduler.
"""
from __future__ import annotations

import logging
import socket
import threading
import time
from typing import Dict, Tuple

from ..errors import FrameError, TransportError
from .base import Selector, Transport
from .wire import Message, encode_frame, read_frame

log = logging.getLogger(__name__)

Endpoint = Tuple[str, int]


def parse_roster(text: str) -> Dict[int, Endpoint]:
    """``tile host:port`` per line; blank lines and ``#`` comments ignored."""
    roster = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            tile, addr = line.split()
            host, port = addr.rsplit(":", 1)
            tile, ep = int(tile), (host, int(port))
        except ValueError:
            raise TransportError(f"roster line {lineno}: expected 'tile host:port', got {raw!r}") from None
        if tile in roster:
            raise TransportError(f"roster line {lineno}: tile {tile} listed twice")
        roster[tile] = ep
    if sorted(roster) != list(range(len(roster))):
        raise TransportError("roster must list tiles 0..T-1 exactly once")
    return roster


def format_roster(roster: Dict[int, Endpoint]) -> str:
    return "".join(f"{t} {h}:{p}\n" for t, (h, p) in sorted(roster.items()))


def _recv_exact(sock, n):
    chunks, got = [], 0
    while got < n:
        chunk = sock.recv(n - got)
        if not chunk:
            raise EOFError("connection closed")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


class TcpTransport(Transport):
    blocking_wait = True

    def __init__(self, roster: Dict[int, Endpoint], local_tile: int, timeout: float = 30.0,
                 connect_timeout: float = 30.0, roundtrip=True):
        self.roster = dict(roster)
        self.endpoint = self.roster[local_tile]
        local = [t for t, ep in self.roster.items() if ep == self.endpoint]
        super().__init__(local, roundtrip)
        self.timeout = timeout
        self.connect_timeout = connect_timeout
        self._error = None
        self._closing = False
        # tiles whose connection ended cleanly; waiting on them can never succeed
        self._closed_tiles = set()
        self._links: Dict[Endpoint, socket.socket] = {}
        self._link_locks: Dict[Endpoint, threading.Lock] = {}
        self._threads = []
        self._listener = socket.create_server(self.endpoint, reuse_port=False)
        self._listener.settimeout(0.2)
        peers = {ep for ep in self.roster.values() if ep != self.endpoint}
        self._expected_incoming = len(peers)
        self._incoming = 0
        t = threading.Thread(target=self._accept_loop, name="tcp-accept", daemon=True)
        t.start()
        self._threads.append(t)
        for ep in sorted(peers):
            self._links[ep] = self._connect(ep)
            self._link_locks[ep] = threading.Lock()

    def _connect(self, ep):
        deadline = time.monotonic() + self.connect_timeout
        while True:
            try:
                sock = socket.create_connection(ep, timeout=self.connect_timeout)
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                sock.settimeout(None)
                return sock
            except OSError:
                if time.monotonic() > deadline:
                    raise TransportError(f"could not connect to {ep[0]}:{ep[1]}") from None
                time.sleep(0.05)

    def _accept_loop(self):
        while not self._closing and self._incoming < self._expected_incoming:
            try:
                conn, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            conn.settimeout(None)
            self._incoming += 1
            t = threading.Thread(target=self._reader, args=(conn,), name="tcp-reader", daemon=True)
            t.start()
            self._threads.append(t)

    def _reader(self, conn):
        seen = set()
        try:
            while True:
                first = conn.recv(1)
                if not first:
                    break  # clean close between frames
                msg = read_frame(lambda n, pre=[first]: (pre.pop() + _recv_exact(conn, n - 1)) if pre
                                 else _recv_exact(conn, n))
                if msg.dst not in self.mail.boxes:
                    raise FrameError(f"frame for tile {msg.dst} reached the wrong process")
                seen.add(msg.src)
                self.mail.put(msg)
        except EOFError:
            if not self._closing:
                self._fail(TransportError("peer closed the connection mid-frame"))
        except FrameError as exc:
            self._fail(exc)
        except OSError as exc:
            if not self._closing:
                self._fail(TransportError(f"connection lost: {exc}"))
        finally:
            conn.close()
            with self.mail.cond:
                self._closed_tiles |= seen
                self.mail.cond.notify_all()

    def try_recv(self, tile, selector: Selector):
        msg = super().try_recv(tile, selector)
        if msg is None and selector.src is not None and selector.src in self._closed_tiles:
            # frames arrive in order, so nothing more can come from a closed peer
            msg = super().try_recv(tile, selector)
            if msg is None:
                raise TransportError(f"tile {selector.src} disconnected while {tile} waits for {selector}")
        return msg

    def _fail(self, exc):
        if self._error is None:
            log.error("transport failure: %s", exc)
            self._error = exc
        with self.mail.cond:
            self.mail.cond.notify_all()

    def check(self):
        if self._error is not None:
            raise TransportError(f"fatal transport error: {self._error}") from self._error

    def send(self, msg: Message):
        self.check()
        ep = self.roster[msg.dst]
        with self._lock:
            self.stats.on_send(msg)
        if ep == self.endpoint:
            self._deliver_local(msg)
            return
        frame = encode_frame(msg)
        try:
            with self._link_locks[ep]:
                self._links[ep].sendall(frame)
        except OSError as exc:
            self._fail(TransportError(f"send to tile {msg.dst} failed: {exc}"))
            self.check()

    def close(self):
        self._closing = True
        for sock in self._links.values():
            try:
                sock.shutdown(socket.SHUT_WR)
            except OSError:
                pass
            sock.close()
        self._listener.close()
