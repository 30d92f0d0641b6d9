"""Per-packet XOR parity FEC over blocks of 2..14 media packets."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

from .types import FEC_HEADER_SIZE, FecPacket, MediaPacket, seq_add, seq_diff

MIN_INTERVAL = 2
MAX_INTERVAL = 14


class FecError(ValueError):
    pass


class BlockLengthOutOfRange(FecError):
    pass


class NonConsecutiveSequence(FecError):
    pass


class IntervalOutOfRange(FecError):
    pass


def _xor_bytes(a: bytes, b: bytes) -> bytes:
    if len(a) < len(b):
        a, b = b, a
    n = len(a)
    x = int.from_bytes(a, "big") ^ (int.from_bytes(b, "big") << (8 * (n - len(b))))
    return x.to_bytes(n, "big")


def encode_block(packets: Sequence[MediaPacket], send_ts: int = 0) -> FecPacket:
    """Build the parity packet for ``packets``.

    Shorter payloads are zero-padded at the tail; the XOR of all payload
    lengths goes into ``length_field`` so the receiver can trim a rebuilt
    payload.
    """
    n = len(packets)
    if not MIN_INTERVAL <= n <= MAX_INTERVAL:
        raise BlockLengthOutOfRange(f"block length {n} not in [{MIN_INTERVAL}, {MAX_INTERVAL}]")
    base = packets[0].seq
    for i, p in enumerate(packets):
        if p.seq != seq_add(base, i):
            raise NonConsecutiveSequence(f"expected seq {seq_add(base, i)}, got {p.seq}")
    parity = b""
    length = 0
    for p in packets:
        parity = _xor_bytes(parity, p.payload)
        length ^= p.payload_size
    return FecPacket(packets[0].ssrc, base, n, parity, length, send_ts)


@dataclass
class FecBlockState:
    """Receiver-side view of one protected block."""

    base_seq: int
    expected: int
    deadline: int
    received_packets: Dict[int, MediaPacket] = field(default_factory=dict)
    fec: Optional[FecPacket] = None

    def covers(self, seq: int) -> bool:
        return 0 <= seq_diff(seq, self.base_seq) < self.expected

    def add(self, pkt: MediaPacket) -> None:
        if not self.covers(pkt.seq):
            raise ValueError(f"seq {pkt.seq} outside block at {self.base_seq}")
        self.received_packets[pkt.seq] = pkt

    def missing(self) -> list:
        return [s for s in (seq_add(self.base_seq, i) for i in range(self.expected))
                if s not in self.received_packets]

    @classmethod
    def for_fec(cls, fec: FecPacket, deadline: int) -> "FecBlockState":
        return cls(fec.base_seq, fec.block_len, deadline, fec=fec)


def try_recover(state: FecBlockState, now: int) -> Optional[MediaPacket]:
    """Rebuild the single missing packet of a block, if that is possible.

    Only the payload and sequence number are restored here; the endpoint
    re-reads the remaining header fields from the payload descriptor.
    """
    if state.fec is None or now > state.deadline:
        return None
    missing = state.missing()
    if len(missing) != 1:
        return None
    payload = state.fec.parity_payload
    length = state.fec.length_field
    for pkt in state.received_packets.values():
        payload = _xor_bytes(payload, pkt.payload)
        length ^= pkt.payload_size
    if length > len(payload):
        return None
    return MediaPacket(state.fec.ssrc, missing[0], payload[:length])


def fec_bitrate(media_rate: int, fec_interval: int, avg_packet_size: int) -> int:
    """Nominal parity bitrate for one FEC packet per ``fec_interval`` media packets."""
    if not MIN_INTERVAL <= fec_interval <= MAX_INTERVAL:
        raise IntervalOutOfRange(f"fec_interval {fec_interval} not in [2, 14]")
    if avg_packet_size <= 0:
        raise ValueError("avg_packet_size must be positive")
    return media_rate * (avg_packet_size + FEC_HEADER_SIZE) // (fec_interval * avg_packet_size)
