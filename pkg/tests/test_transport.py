import socket
import struct
import threading

import numpy as np
import pytest

from _checks import GOLDEN_FRAMES, corpus_accepted, corrupt_corpus, golden_messages
from tiletrain.errors import FrameError, TransportError, TransportTimeout
from tiletrain.geometry import FORWARD, TileRect
from tiletrain.transport import (CONTROL, HALO_BLOCK, PARTIAL_GRAD, InProcessTransport, Message, Selector,
                                 TcpTransport)
from tiletrain.transport.tcp import format_roster, parse_roster
from tiletrain.transport.wire import (HEADER_SIZE, control_payload, control_words, decode_frame,
                                      encode_frame, read_frame)


def halo(src, dst, boundary=1, value=0.0, rect=TileRect(0, 0, 0, 0)):
    return Message(HALO_BLOCK, src, dst, FORWARD, boundary, rect, 1,
                   np.full(rect.area, value, np.float32))


@pytest.mark.parametrize("name", sorted(GOLDEN_FRAMES))
def test_golden_frames(name):
    msg = golden_messages()[name]
    frame = encode_frame(msg)
    assert frame.hex() == GOLDEN_FRAMES[name]
    back = decode_frame(bytes.fromhex(GOLDEN_FRAMES[name]))
    assert back.key() == msg.key() and np.array_equal(back.payload, msg.payload)
    assert encode_frame(back) == frame


def test_frame_sizes():
    msgs = golden_messages()
    assert HEADER_SIZE == 37
    assert len(encode_frame(msgs["control_empty"])) == 41
    assert msgs["halo_2x2x2"].payload_bytes == 32


def test_corrupt_corpus_rejected():
    for msg in golden_messages().values():
        frames = corrupt_corpus(encode_frame(msg))
        assert corpus_accepted(frames) == 0


def test_payload_shape_mismatch():
    with pytest.raises(FrameError):
        Message(HALO_BLOCK, 0, 1, FORWARD, 0, TileRect(0, 0, 1, 1), 1, np.zeros(3))
    with pytest.raises(FrameError):
        Message("Gossip", 0, 1, FORWARD, 0, None, 0, np.zeros(0))


def test_control_words_roundtrip():
    words = [0, 1, 0xFFFFFFFF, 0x7FC00001]
    msg = Message(CONTROL, 0, 1, FORWARD, 0, None, 0, control_payload(*words))
    assert control_words(decode_frame(encode_frame(msg))) == words


def test_read_frame_eof():
    data = encode_frame(halo(0, 1))

    def reader(n, buf=[data[:10]]):
        chunk = buf.pop() if buf else b""
        if len(chunk) < n:
            raise EOFError
        return chunk

    with pytest.raises(EOFError):
        read_frame(reader)


def test_fifo_per_pair_and_selector():
    tr = InProcessTransport(3)
    for v in range(3):
        tr.send(halo(0, 2, value=v))
    tr.send(halo(1, 2, boundary=4, value=9))
    got = tr.try_recv(2, Selector(HALO_BLOCK, src=1))
    assert got.payload[0] == 9
    assert [tr.try_recv(2, Selector(src=0)).payload[0] for _ in range(3)] == [0, 1, 2]
    assert tr.try_recv(2, Selector()) is None
    assert tr.stats.conserved()


def test_recv_matching_timeout():
    tr = InProcessTransport(2)
    tr.send(halo(0, 1, boundary=2))
    with pytest.raises(TransportTimeout):
        tr.recv_matching(1, Selector(HALO_BLOCK, src=0, boundary=3), timeout=0.05)
    assert tr.recv_matching(1, Selector(boundary=2), timeout=0.05).boundary == 2


def test_unknown_destination():
    with pytest.raises(KeyError):
        InProcessTransport(2).send(halo(0, 5))


def test_stats_counts():
    tr = InProcessTransport(2)
    before = tr.stats.snapshot()
    tr.send(halo(0, 1, rect=TileRect(0, 0, 1, 2)))
    tr.send(Message(PARTIAL_GRAD, 1, 0, FORWARD, 0, TileRect(0, 0, 3, 0), 1, np.zeros(4)))
    delta = tr.stats.since(before)
    assert delta.halo_bytes[(FORWARD, 1)] == 24 and delta.sent_bytes[PARTIAL_GRAD] == 16
    assert delta.frame_bytes == 24 + 16 + 2 * 41


def test_roster_parsing():
    r = parse_roster("# cluster\n0 127.0.0.1:9000\n1 127.0.0.1:9001  # b\n\n")
    assert r == {0: ("127.0.0.1", 9000), 1: ("127.0.0.1", 9001)}
    assert parse_roster(format_roster(r)) == r
    for bad in ("0 host", "0 h:1\n0 h:2", "1 h:1", "x h:1"):
        with pytest.raises(TransportError):
            parse_roster(bad)


def free_ports(n):
    socks = [socket.socket() for _ in range(n)]
    for s in socks:
        s.bind(("127.0.0.1", 0))
    ports = [s.getsockname()[1] for s in socks]
    for s in socks:
        s.close()
    return ports


def test_tcp_loopback_exchange():
    p0, p1 = free_ports(2)
    roster = {0: ("127.0.0.1", p0), 1: ("127.0.0.1", p1), 2: ("127.0.0.1", p1)}
    out = {}

    def start(tile):
        out[tile] = TcpTransport(roster, tile, timeout=5, connect_timeout=5)

    threads = [threading.Thread(target=start, args=(t,)) for t in (0, 1)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    a, b = out[0], out[1]
    try:
        assert b.local_tiles == [1, 2]
        for v in range(5):
            a.send(halo(0, 2, value=v))
        b.send(halo(1, 0, value=7))
        b.send(halo(2, 1, value=8))
        assert [b.recv_matching(2, Selector(src=0)).payload[0] for _ in range(5)] == list(range(5))
        assert a.recv_matching(0, Selector(src=1)).payload[0] == 7
        assert b.recv_matching(1, Selector(src=2)).payload[0] == 8
    finally:
        a.close()
        b.close()


def test_tcp_garbage_frame_fails_loudly():
    p0, p1 = free_ports(2)
    roster = {0: ("127.0.0.1", p0), 1: ("127.0.0.1", p1)}
    holder = {}
    t = threading.Thread(target=lambda: holder.setdefault(0, TcpTransport(roster, 0, timeout=2,
                                                                         connect_timeout=5)))
    t.start()
    srv = socket.create_server(("127.0.0.1", p1))
    conn, _ = srv.accept()
    raw = socket.create_connection(("127.0.0.1", p0))
    t.join()
    tr = holder[0]
    try:
        raw.sendall(b"XXXX" + bytes(60))
        with pytest.raises((FrameError, TransportError, TransportTimeout)):
            tr.recv_matching(0, Selector(), timeout=2)
    finally:
        raw.close()
        conn.close()
        srv.close()
        tr.close()


def test_header_field_order():
    frame = encode_frame(halo(3, 1, boundary=5, rect=TileRect(2, 3, 4, 6)))
    fields = struct.unpack("<4sBBBHHHiiiiII", frame[:HEADER_SIZE])
    assert fields[4:11] == (3, 1, 5, 2, 3, 4, 6) and fields[11] == 1 and fields[12] == 12 * 4
