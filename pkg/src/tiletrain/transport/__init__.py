from .base import Selector, Transport, TransportStats
from .inproc import InProcessTransport
from .tcp import TcpTransport, format_roster, parse_roster
from .wire import (CONTROL, DELTA_SCATTER, HALO_BLOCK, HEADER_SIZE, INPUT_SCATTER, KINDS,
                   OUTPUT_GATHER, PARTIAL_GRAD, TRAILER_SIZE, WEIGHT_BROADCAST, Message,
                   decode_frame, encode_frame, read_frame)

__all__ = [
    "Selector", "Transport", "TransportStats", "InProcessTransport", "TcpTransport",
    "parse_roster", "format_roster", "Message", "encode_frame", "decode_frame", "read_frame",
    "HALO_BLOCK", "INPUT_SCATTER", "DELTA_SCATTER", "PARTIAL_GRAD", "WEIGHT_BROADCAST",
    "CONTROL", "OUTPUT_GATHER", "KINDS", "HEADER_SIZE", "TRAILER_SIZE",
]
