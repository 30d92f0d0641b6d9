"""Shared packet, report and sequence-number types.

All times are integer microseconds on the simulated clock and all rates are
integer bits per second.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import List, Tuple

SEQ_MOD = 1 << 16
SEQ_HALF = 1 << 15

MTU = 1500
RTP_HEADER_SIZE = 12
FEC_HEADER_SIZE = 16
MAX_PAYLOAD = MTU - RTP_HEADER_SIZE

MIN_RATE = 32_000
START_RATE = 128_000

US_PER_MS = 1000
US_PER_S = 1_000_000

RTP_VERSION = 2
MEDIA_PT = 96

# frame_id u32, fragment_index u16, fragment_count u16, frame_ts u64, send_ts u64
_DESCRIPTOR = struct.Struct("!IHHQQ")
DESCRIPTOR_SIZE = _DESCRIPTOR.size


def seq_after(a: int, b: int) -> bool:
    """True iff ``a`` follows ``b`` under 16-bit wraparound ordering.

    Two numbers exactly half the space apart are ordered by plain value so
    that every distinct pair has a definite order.
    """
    d = (a - b) % SEQ_MOD
    if d == SEQ_HALF:
        return a > b
    return 0 < d < SEQ_HALF


def seq_add(a: int, n: int) -> int:
    return (a + n) % SEQ_MOD


def seq_diff(a: int, b: int) -> int:
    """Signed distance from ``b`` to ``a``, in (-32768, 32768]."""
    d = (a - b) % SEQ_MOD
    return d - SEQ_MOD if d > SEQ_HALF else d


def clamp_rate(rate: float, floor: int = MIN_RATE) -> int:
    return max(int(rate), floor)


@dataclass(frozen=True)
class MediaPacket:
    """One RTP-like media packet.

    The payload starts with a 24-byte descriptor carrying the frame id,
    fragment position and timestamps, so a packet rebuilt from FEC parity
    restores every field.
    """

    ssrc: int
    seq: int
    payload: bytes
    frame_id: int = 0
    frame_ts: int = 0
    send_ts: int = 0
    fragment_index: int = 0
    fragment_count: int = 1

    header_size = RTP_HEADER_SIZE

    def __post_init__(self) -> None:
        if not 0 <= self.seq < SEQ_MOD:
            raise ValueError(f"seq out of range: {self.seq}")
        if not self.fragment_index < self.fragment_count:
            raise ValueError("fragment_index must be < fragment_count")
        if self.payload_size + RTP_HEADER_SIZE > MTU:
            raise ValueError(f"packet exceeds MTU: {self.payload_size} B payload")

    @property
    def payload_size(self) -> int:
        return len(self.payload)

    @property
    def size(self) -> int:
        return len(self.payload) + RTP_HEADER_SIZE

    @property
    def is_fragment(self) -> bool:
        return self.fragment_count > 1

    @classmethod
    def build(
        cls,
        ssrc: int,
        seq: int,
        payload_size: int,
        frame_id: int,
        frame_ts: int,
        send_ts: int,
        fragment_index: int = 0,
        fragment_count: int = 1,
    ) -> "MediaPacket":
        """Create a packet whose payload embeds its own descriptor."""
        head = _DESCRIPTOR.pack(frame_id, fragment_index, fragment_count, frame_ts, send_ts)
        filler = max(payload_size, DESCRIPTOR_SIZE) - DESCRIPTOR_SIZE
        payload = head + bytes((seq + i) & 0xFF for i in range(min(filler, 8))) + bytes(max(filler - 8, 0))
        return cls(ssrc, seq, payload, frame_id, frame_ts, send_ts, fragment_index, fragment_count)

    @classmethod
    def from_payload(cls, ssrc: int, seq: int, payload: bytes) -> "MediaPacket":
        if len(payload) < DESCRIPTOR_SIZE:
            raise ValueError("payload too short for media descriptor")
        frame_id, idx, count, frame_ts, send_ts = _DESCRIPTOR.unpack_from(payload)
        return cls(ssrc, seq, payload, frame_id, frame_ts, send_ts, idx, count)

    def to_bytes(self) -> bytes:
        marker = 0x80 if self.fragment_index == self.fragment_count - 1 else 0
        header = struct.pack(
            "!BBHII",
            RTP_VERSION << 6,
            marker | MEDIA_PT,
            self.seq,
            self.frame_ts & 0xFFFFFFFF,
            self.ssrc,
        )
        return header + self.payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "MediaPacket":
        vpxcc, _mpt, seq, _ts, ssrc = struct.unpack_from("!BBHII", data)
        if vpxcc >> 6 != RTP_VERSION:
            raise ValueError("not an RTP packet")
        return cls.from_payload(ssrc, seq, data[RTP_HEADER_SIZE:])


@dataclass(frozen=True)
class FecPacket:
    """Parity packet protecting ``block_len`` consecutive media packets."""

    ssrc: int
    base_seq: int
    block_len: int
    parity_payload: bytes
    length_field: int
    send_ts: int = 0

    # ssrc u32, base_seq u16, block_len u8, pad u8, length_field u16, pad u16, send_ts u32
    _HEADER = struct.Struct("!IHBxHxxI")

    @property
    def size(self) -> int:
        return len(self.parity_payload) + FEC_HEADER_SIZE

    @property
    def covered(self) -> List[int]:
        return [seq_add(self.base_seq, i) for i in range(self.block_len)]

    def to_bytes(self) -> bytes:
        head = self._HEADER.pack(
            self.ssrc, self.base_seq, self.block_len, self.length_field, self.send_ts & 0xFFFFFFFF
        )
        return head + self.parity_payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "FecPacket":
        ssrc, base_seq, block_len, length_field, send_ts = cls._HEADER.unpack_from(data)
        return cls(ssrc, base_seq, block_len, data[cls._HEADER.size:], length_field, send_ts)


Event = Tuple[int, int]  # (seq, receiver event time)


@dataclass
class FeedbackReport:
    """Receiver report with per-packet loss and discard event times."""

    ssrc: int
    report_ts: int
    interval_start: int
    highest_seq: int
    cumulative_lost: int = 0
    interval_sent: int = 0
    loss_events: List[Event] = field(default_factory=list)
    discard_events: List[Event] = field(default_factory=list)
    owd_sample: int = 0
    jitter: int = 0
    lsr: int = 0
    dlsr: int = 0
    is_early: bool = False

    def __post_init__(self) -> None:
        lost = {s for s, _ in self.loss_events}
        if any(s in lost for s, _ in self.discard_events):
            raise ValueError("loss and discard events overlap")

    @property
    def clean(self) -> bool:
        return not self.loss_events and not self.discard_events

    @property
    def size(self) -> int:
        # RR (32) + two loss-RLE style blocks (12 + 2 per chunk)
        return 32 + 24 + 2 * (len(self.loss_events) + len(self.discard_events))

    _HEAD = struct.Struct("!IQQHIIQIQQB")

    def to_bytes(self) -> bytes:
        head = self._HEAD.pack(
            self.ssrc,
            self.report_ts,
            self.interval_start,
            self.highest_seq,
            self.cumulative_lost,
            self.interval_sent,
            self.owd_sample,
            self.jitter,
            self.lsr,
            self.dlsr,
            1 if self.is_early else 0,
        )
        return head + _encode_events(self.loss_events, self.interval_start) + _encode_events(
            self.discard_events, self.interval_start
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "FeedbackReport":
        fields = cls._HEAD.unpack_from(data)
        (ssrc, report_ts, start, highest, cum, sent, owd, jitter, lsr, dlsr, early) = fields
        pos = cls._HEAD.size
        losses, pos = _decode_events(data, pos, start)
        discards, pos = _decode_events(data, pos, start)
        return cls(ssrc, report_ts, start, highest, cum, sent, losses, discards, owd, jitter,
                   lsr, dlsr, bool(early))


@dataclass(frozen=True)
class SenderReport:
    """Sender report; carries the sender's RTT estimate so the receiver can
    pace its regular reports."""

    ssrc: int
    ntp_ts: int
    rtt: int
    packet_count: int
    octet_count: int

    size = 28

    _FMT = struct.Struct("!IQQII")

    def to_bytes(self) -> bytes:
        return self._FMT.pack(self.ssrc, self.ntp_ts, self.rtt, self.packet_count, self.octet_count)

    @classmethod
    def from_bytes(cls, data: bytes) -> "SenderReport":
        return cls(*cls._FMT.unpack_from(data))


# --- run-length encoding of event sequence numbers -------------------------
#
# Wire layout of one event block:
#   begin_seq u16, chunk_count u16, chunks u16*, offsets u32* (one per event,
#   microseconds after interval start, in seq order).
# Chunks follow the run-length chunk form: bit15 = 0, bit14 = run type
# (1 = event, 0 = no event), bits 0-13 = run length.

_RUN_MAX = (1 << 14) - 1


def rle_encode(seqs: List[int]) -> Tuple[int, List[int]]:
    """Run-length encode a set of 16-bit sequence numbers.

    Returns ``(begin_seq, chunks)``; ``seqs`` must be sorted in wraparound
    order and span fewer than 32768 numbers.
    """
    if not seqs:
        return 0, []
    begin = seqs[0]
    offsets = [seq_diff(s, begin) for s in seqs]
    chunks: List[int] = []
    pos = 0
    i = 0
    while i < len(offsets):
        gap = offsets[i] - pos
        while gap > 0:
            n = min(gap, _RUN_MAX)
            chunks.append(n)
            gap -= n
        run = 1
        while i + run < len(offsets) and offsets[i + run] == offsets[i] + run:
            run += 1
        pos = offsets[i] + run
        left = run
        while left > 0:
            n = min(left, _RUN_MAX)
            chunks.append(0x4000 | n)
            left -= n
        i += run
    return begin, chunks


def rle_decode(begin: int, chunks: List[int]) -> List[int]:
    out: List[int] = []
    pos = 0
    for c in chunks:
        if c & 0x8000:
            raise ValueError("bit-vector chunks are not produced by this encoder")
        n = c & 0x3FFF
        if c & 0x4000:
            out.extend(seq_add(begin, pos + k) for k in range(n))
        pos += n
    return out


def _sort_events(events: List[Event]) -> List[Event]:
    if not events:
        return []
    anchor = events[0][0]
    return sorted(events, key=lambda e: seq_diff(e[0], anchor))


def _encode_events(events: List[Event], start: int) -> bytes:
    ordered = _sort_events(events)
    begin, chunks = rle_encode([s for s, _ in ordered])
    out = struct.pack("!HH", begin, len(chunks))
    out += struct.pack(f"!{len(chunks)}H", *chunks)
    out += struct.pack(f"!{len(ordered)}I", *(t - start for _, t in ordered))
    return out


def _decode_events(data: bytes, pos: int, start: int) -> Tuple[List[Event], int]:
    begin, n = struct.unpack_from("!HH", data, pos)
    pos += 4
    chunks = list(struct.unpack_from(f"!{n}H", data, pos))
    pos += 2 * n
    seqs = rle_decode(begin, chunks)
    offsets = struct.unpack_from(f"!{len(seqs)}I", data, pos)
    pos += 4 * len(seqs)
    return [(s, start + o) for s, o in zip(seqs, offsets)], pos
