"""UDP symbol packets.

Header (16 bytes, big-endian)::

    magic u32 = 0x4D4D524F | frame_id u32 | slot_id u8 | symbol_id u8
    | antenna_id u8 | flags u8 | payload_len u32

With ``flags & 1`` a u16 fragment index follows the header. The payload is
N complex samples as big-endian float32 (re, im) pairs. Symbols that do not
fit one 1400-byte datagram are split into fragments of exactly
:data:`FRAGMENT_PAYLOAD` bytes (the last one shorter); fragment ``i``
carries payload bytes ``[i * FRAGMENT_PAYLOAD, ...)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = 0x4D4D524F
HEADER = struct.Struct(">IIBBBBI")
FRAG_INDEX = struct.Struct(">H")
HEADER_LEN = HEADER.size
FRAG_HEADER_LEN = HEADER_LEN + FRAG_INDEX.size
MAX_DATAGRAM = 1400
FRAGMENT_PAYLOAD = (MAX_DATAGRAM - FRAG_HEADER_LEN) // 8 * 8
FLAG_FRAGMENTED = 0x01
WIRE_DTYPE = np.dtype(">c8")


class PacketError(ValueError):
    """Datagram rejected by validation."""


@dataclass(frozen=True)
class UdpSymbolPacket:
    frame_id: int
    slot_id: int
    symbol_id: int
    antenna_id: int
    payload_len: int
    payload: bytes
    fragment: int | None = None

    @property
    def offset(self) -> int:
        return 0 if self.fragment is None else self.fragment * FRAGMENT_PAYLOAD


def encode_symbol(frame_id: int, slot_id: int, symbol_id: int, antenna_id: int,
                  samples: np.ndarray) -> list[bytes]:
    """Datagrams carrying one OFDM symbol of one antenna."""
    payload = np.ascontiguousarray(samples, dtype=WIRE_DTYPE).tobytes()
    n = len(payload)
    if HEADER_LEN + n <= MAX_DATAGRAM:
        return [HEADER.pack(MAGIC, frame_id, slot_id, symbol_id, antenna_id, 0, n) + payload]
    head = HEADER.pack(MAGIC, frame_id, slot_id, symbol_id, antenna_id, FLAG_FRAGMENTED, n)
    return [head + FRAG_INDEX.pack(i) + payload[off:off + FRAGMENT_PAYLOAD]
            for i, off in enumerate(range(0, n, FRAGMENT_PAYLOAD))]


def decode_packet(datagram: bytes, n_subcarriers: int | None = None) -> UdpSymbolPacket:
    """Parse and validate one datagram; raises :class:`PacketError`."""
    if len(datagram) < HEADER_LEN:
        raise PacketError("truncated header")
    magic, frame_id, slot_id, symbol_id, antenna_id, flags, plen = HEADER.unpack_from(datagram)
    if magic != MAGIC:
        raise PacketError(f"bad magic 0x{magic:08X}")
    if n_subcarriers is not None and plen != 8 * n_subcarriers:
        raise PacketError(f"payload_len {plen} != 8 * {n_subcarriers}")
    if flags & FLAG_FRAGMENTED:
        if len(datagram) < FRAG_HEADER_LEN:
            raise PacketError("truncated fragment header")
        (frag,) = FRAG_INDEX.unpack_from(datagram, HEADER_LEN)
        body = datagram[FRAG_HEADER_LEN:]
        off = frag * FRAGMENT_PAYLOAD
        expected = min(FRAGMENT_PAYLOAD, plen - off)
        if expected <= 0 or len(body) != expected:
            raise PacketError("fragment outside payload or truncated")
    else:
        frag = None
        body = datagram[HEADER_LEN:]
        if len(body) != plen:
            raise PacketError(f"payload truncated: {len(body)} of {plen} bytes")
    return UdpSymbolPacket(frame_id, slot_id, symbol_id, antenna_id, plen, bytes(body), frag)


def reassemble(packets: list[UdpSymbolPacket]) -> np.ndarray:
    """Join the fragments of one symbol back into complex64 samples."""
    if not packets:
        raise PacketError("no packets")
    plen = packets[0].payload_len
    out = bytearray(plen)
    seen = 0
    for p in packets:
        out[p.offset:p.offset + len(p.payload)] = p.payload
        seen += len(p.payload)
    if seen != plen:
        raise PacketError(f"reassembled {seen} of {plen} bytes")
    return np.frombuffer(bytes(out), dtype=WIRE_DTYPE).astype(np.complex64)


def fragment_count(payload_len: int) -> int:
    if HEADER_LEN + payload_len <= MAX_DATAGRAM:
        return 1
    return -(-payload_len // FRAGMENT_PAYLOAD)
