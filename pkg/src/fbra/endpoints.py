"""Media sender and receiver models.

The sender turns the controller's target rate into 30 FPS frames, protects
them with parity FEC while probing, and feeds receiver reports back into
the controller. The receiver plays or discards packets against the 400 ms
deadline, detects losses, repairs them from FEC and builds reports.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

from .controller import Action, ControllerDecision, FbraController, State
from .fec import FecBlockState, encode_block, try_recover
from .trace import SimTrace
from .types import (
    MAX_PAYLOAD,
    MIN_RATE,
    MTU,
    RTP_HEADER_SIZE,
    SEQ_MOD,
    START_RATE,
    US_PER_MS,
    US_PER_S,
    FecPacket,
    FeedbackReport,
    MediaPacket,
    SenderReport,
)

logger = logging.getLogger(__name__)

Transmit = Callable[[object, int], None]
Scheduler = Callable[..., None]


@dataclass(frozen=True)
class SenderConfig:
    fps: int = 30
    start_rate: int = START_RATE
    min_rate: int = MIN_RATE
    mtu: int = MTU

    def __post_init__(self) -> None:
        if min(self.fps, self.start_rate, self.min_rate, self.mtu) <= 0:
            raise ValueError("sender config values must be positive")
        if self.start_rate < self.min_rate:
            raise ValueError("start_rate below min_rate")


@dataclass(frozen=True)
class ReceiverConfig:
    delay_max: int = 400 * US_PER_MS
    rtcp_interval_factor: int = 2
    rtcp_min_interval: int = 500 * US_PER_MS
    # early feedback allowed once per this many regular intervals
    early_budget_intervals: int = 2
    early_owd_fraction: float = 0.9
    early_loss_burst: int = 3
    reorder_tolerance: int = 3
    default_rtt: int = 200 * US_PER_MS

    def __post_init__(self) -> None:
        if self.delay_max <= 0:
            raise ValueError("delay_max must be positive")


def frame_sizes(target_rate: int, fps: int = 30, mtu: int = MTU) -> List[int]:
    """Payload sizes of the fragments of one frame at ``target_rate``."""
    total = target_rate // (8 * fps)
    budget = mtu - RTP_HEADER_SIZE
    count = max(1, -(-total // budget))
    q, r = divmod(total, count)
    return [q + 1 if i < r else q for i in range(count)]


def generate_frame(
    now: int,
    target_rate: int,
    *,
    ssrc: int = 0,
    first_seq: int = 0,
    frame_id: int = 0,
    fps: int = 30,
    mtu: int = MTU,
) -> List[MediaPacket]:
    sizes = frame_sizes(target_rate, fps, mtu)
    return [
        MediaPacket.build(ssrc, (first_seq + i) % SEQ_MOD, size, frame_id, now, now, i, len(sizes))
        for i, size in enumerate(sizes)
    ]


class FecScheduler:
    """Groups outgoing media into blocks and emits one parity packet per
    completed block. The interval in force when a block opens is kept for
    the whole block; disabling FEC drops the partial block."""

    def __init__(self) -> None:
        self.block: List[MediaPacket] = []
        self.block_len = 0

    def push(self, pkt: MediaPacket, fec_enabled: bool, fec_interval: int,
             now: int = 0) -> Optional[FecPacket]:
        if not fec_enabled:
            self.block = []
            return None
        if not self.block:
            self.block_len = fec_interval
        self.block.append(pkt)
        if len(self.block) < self.block_len:
            return None
        fec = encode_block(self.block, now)
        self.block = []
        return fec

    def abandon(self) -> None:
        self.block = []


def schedule_fec(
    packets: List[MediaPacket],
    fec_enabled: bool,
    fec_interval: int,
) -> List[object]:
    """Interleave parity packets into a media stream (offline helper)."""
    sched = FecScheduler()
    out: List[object] = []
    for pkt in packets:
        out.append(pkt)
        fec = sched.push(pkt, fec_enabled, fec_interval)
        if fec is not None:
            out.append(fec)
    return out


class Sender:
    def __init__(
        self,
        flow_id: str,
        ssrc: int,
        at: Scheduler,
        clock: Callable[[], int],
        transmit: Transmit,
        trace: SimTrace,
        config: SenderConfig = SenderConfig(),
        controller: Optional[FbraController] = None,
        start_time: int = 0,
    ):
        self.flow_id = flow_id
        self.ssrc = ssrc
        self.at = at
        self.clock = clock
        self.transmit = transmit
        self.trace = trace
        self.config = config
        self.controller = controller or FbraController(config.start_rate, config.min_rate,
                                                       now=start_time)
        self.start_time = start_time
        self.frame_no = 0
        self.next_ext = 0
        # cum_bits[i] = wire bits of media packets with extended seq < i
        self.cum_bits: List[int] = [0]
        # send_times[i] = send time of the media packet with extended seq i - 1
        self.send_times: List[int] = [start_time - US_PER_S // self.config.fps]
        self.fec = FecScheduler()
        self.fec_bits_since_report = 0
        self.fec_bits_total = 0
        self.last_report_arrival: Optional[int] = None
        self.last_report_ts: Optional[int] = None
        self.prev_highest_ext = -1
        self.srtt = 0
        self.packet_count = 0
        self.octet_count = 0

    def start(self) -> None:
        t = self.start_time
        self.trace.add(t, "STATE", self.flow_id, 0, 0, self.controller.state.value)
        self._trace_rate(t, None)
        self.at(t, self._on_frame)
        self.at(t, self._send_sr)
        self.at(t + 100 * US_PER_MS, self._on_timer)

    # --- media path ----------------------------------------------------

    def _on_frame(self) -> None:
        now = self.frame_time(self.frame_no)
        ctl = self.controller
        packets = generate_frame(
            now, ctl.rate, ssrc=self.ssrc, first_seq=self.next_ext % SEQ_MOD,
            frame_id=self.frame_no, fps=self.config.fps, mtu=self.config.mtu,
        )
        for pkt in packets:
            self.next_ext += 1
            bits = pkt.size * 8
            self.cum_bits.append(self.cum_bits[-1] + bits)
            self.send_times.append(now)
            self.packet_count += 1
            self.octet_count += pkt.payload_size
            self.trace.add(now, "SEND_RTP", self.flow_id, pkt.seq, pkt.size,
                           f"{pkt.frame_id}:{pkt.fragment_index}/{pkt.fragment_count}")
            self.transmit(pkt, pkt.size)
            fec = self.fec.push(pkt, ctl.fec_enabled and ctl.state is State.PROBE,
                                ctl.fec_interval, now)
            if fec is not None:
                self.fec_bits_since_report += fec.size * 8
                self.fec_bits_total += fec.size * 8
                self.trace.add(now, "SEND_FEC", self.flow_id, fec.base_seq, fec.size,
                               str(fec.block_len))
                self.transmit(fec, fec.size)
        self.frame_no += 1
        self.at(self.frame_time(self.frame_no), self._on_frame)

    def frame_time(self, n: int) -> int:
        return self.start_time + n * US_PER_S // self.config.fps

    # --- feedback path -------------------------------------------------

    def _send_sr(self, now: Optional[int] = None) -> None:
        now = self.start_time if now is None else now
        sr = SenderReport(self.ssrc, now, self.srtt, self.packet_count, self.octet_count)
        self.transmit(sr, sr.size)

    def _ext(self, seq: int) -> int:
        top = self.next_ext - 1
        return top - ((top - seq) % SEQ_MOD)

    def goodput(self, report: FeedbackReport) -> int:
        """Media bits newly covered by ``highest_seq`` minus the reported
        losses and discards, per unit of sending time.

        The divisor is the time over which those packets were sent, so
        queueing jitter on the path does not leak into the estimate.
        """
        highest = self._ext(report.highest_seq)
        lo = max(self.prev_highest_ext, -1)
        if highest < lo:
            highest = lo
        bits = self.cum_bits[highest + 1] - self.cum_bits[lo + 1]
        for seq, _ in report.loss_events + report.discard_events:
            ext = self._ext(seq)
            if 0 <= ext < self.next_ext:
                bits -= self.cum_bits[ext + 1] - self.cum_bits[ext]
        self.prev_highest_ext = highest
        span = self.send_times[highest + 1] - self.send_times[lo + 1]
        if span <= 0:
            start = self.last_report_ts if self.last_report_ts is not None else report.interval_start
            span = max(report.report_ts - start, 1)
        self.last_report_ts = report.report_ts
        return max(0, bits * US_PER_S // span)

    def on_report(self, report: FeedbackReport, now: int) -> Optional[ControllerDecision]:
        ctl = self.controller
        if report.lsr:
            rtt = now - report.lsr - report.dlsr
            if rtt > 0:
                ctl.add_rtt(rtt)
                self.srtt = rtt if not self.srtt else (9 * self.srtt + rtt) // 10
        gp = self.goodput(report)
        span = now - self.last_report_arrival if self.last_report_arrival is not None else 0
        fec_rate = self.fec_bits_since_report * US_PER_S // span if span > 0 else 0
        self.fec_bits_since_report = 0
        self.last_report_arrival = now
        self.trace.add(now, "RTCP_RECV", self.flow_id, report.highest_seq, report.size,
                       "early" if report.is_early else "regular")
        decision = ctl.on_report(report, now, gp, fec_rate)
        if decision is not None:
            self._after_decision(decision, now, gp)
        self._send_sr(now)
        return decision

    def _on_timer(self) -> None:
        now = self.clock()
        decision = self.controller.on_timer(now)
        if decision is not None:
            self._after_decision(decision, now, None)
        self.at(now + 100 * US_PER_MS, self._on_timer)

    def _after_decision(self, decision: ControllerDecision, now: int, goodput: Optional[int]) -> None:
        if not decision.fec_enabled:
            self.fec.abandon()
        self.trace.add(now, "STATE", self.flow_id, 0, 0, decision.new_state.value)
        self._trace_rate(now, decision, goodput)

    def _trace_rate(self, now: int, decision: Optional[ControllerDecision],
                    goodput: Optional[int] = None) -> None:
        ctl = self.controller
        action = decision.action.value if decision is not None else Action.NONE.value
        gp = "" if goodput is None else str(goodput)
        self.trace.add(
            now, "RATE", self.flow_id, 0, 0,
            f"media={ctl.rate};fec={int(ctl.fec_enabled)};interval={ctl.fec_interval};"
            f"action={action};goodput={gp}",
        )


class Receiver:
    def __init__(
        self,
        flow_id: str,
        ssrc: int,
        at: Scheduler,
        clock: Callable[[], int],
        transmit: Transmit,
        trace: SimTrace,
        config: ReceiverConfig = ReceiverConfig(),
        start_time: int = 0,
    ):
        self.flow_id = flow_id
        self.ssrc = ssrc
        self.at = at
        self.clock = clock
        self.transmit = transmit
        self.trace = trace
        self.config = config
        self.start_time = start_time
        self.highest: Optional[int] = None
        self.packets: Dict[int, MediaPacket] = {}
        # extended seq -> (time the gap was first seen, playout deadline estimate)
        self.pending: Dict[int, Tuple[int, int]] = {}
        self.lost: set = set()
        self.recovered: set = set()
        self.disposition: Dict[int, str] = {}
        self.blocks: Dict[int, FecBlockState] = {}
        self.loss_events: List[Tuple[int, int]] = []
        self.discard_events: List[Tuple[int, int]] = []
        self.cumulative_lost = 0
        self.interval_received = 0
        self.interval_start = start_time
        self.last_owd = 0
        self.jitter = 0.0
        self._last_transit: Optional[int] = None
        self.last_sr: Optional[SenderReport] = None
        self.last_sr_arrival = 0
        self.rtt = config.default_rtt
        self.last_early: Optional[int] = None
        self._timer_token = 0
        self.reports_sent = 0

    def start(self) -> None:
        self._schedule_regular(self.start_time)

    def report_interval(self) -> int:
        return max(self.config.rtcp_interval_factor * self.rtt, self.config.rtcp_min_interval)

    def _schedule_regular(self, now: int) -> None:
        self._timer_token += 1
        self.at(now + self.report_interval(), self._on_regular, self._timer_token)

    # --- arrivals ------------------------------------------------------

    def _ext(self, seq: int) -> int:
        if self.highest is None:
            return seq
        d = (seq - self.highest) % SEQ_MOD
        if d >= SEQ_MOD // 2:
            d -= SEQ_MOD
        return self.highest + d

    def on_datagram(self, body: object, now: int) -> None:
        if isinstance(body, MediaPacket):
            self.on_media(body, now)
        elif isinstance(body, FecPacket):
            self.on_fec(body, now)
        elif isinstance(body, SenderReport):
            self.last_sr = body
            self.last_sr_arrival = now
            if body.rtt > 0:
                self.rtt = body.rtt

    def on_media(self, pkt: MediaPacket, now: int) -> None:
        ext = self._ext(pkt.seq)
        if ext in self.disposition:
            return
        if ext in self.pending:
            del self.pending[ext]
        owd = now - pkt.send_ts
        self.last_owd = owd
        self._update_jitter(pkt, now)
        self.interval_received += 1
        self.packets[ext] = pkt
        if owd > self.config.delay_max:
            self.disposition[ext] = "discarded_late"
            self.discard_events.append((pkt.seq, now))
            self.trace.add(now, "DISCARD", self.flow_id, pkt.seq, pkt.size, str(owd))
        else:
            self.disposition[ext] = "played"
            self.trace.add(now, "RECV", self.flow_id, pkt.seq, pkt.size, str(owd))
        burst = self._advance_highest(ext, now, pkt.send_ts)
        for block in self._blocks_covering(ext):
            block.add(pkt)
            self._try_block(block, now)
        self._expire(now)
        self._prune(ext)
        if owd > self.config.early_owd_fraction * self.config.delay_max or (
            burst >= self.config.early_loss_burst
        ):
            self.maybe_early(now)

    def _advance_highest(self, ext: int, now: int, send_ts: int) -> int:
        """Register gaps below ``ext``; returns the longest run of packets
        newly declared lost."""
        if self.highest is None:
            self.highest = ext
        elif ext > self.highest:
            deadline = send_ts + self.config.delay_max
            for gap in range(self.highest + 1, ext):
                if gap not in self.disposition:
                    self.pending[gap] = (now, deadline)
            self.highest = ext
        return self._finalize_gaps(now)

    def _finalize_gaps(self, now: int) -> int:
        tol = self.config.reorder_tolerance
        done = [g for g, (_, dl) in self.pending.items()
                if self.highest - g >= tol or now > dl]
        run = best = 0
        prev = None
        for g in sorted(done):
            seen, _ = self.pending.pop(g)
            self._declare_lost(g, max(seen, self.interval_start))
            run = run + 1 if prev is not None and g == prev + 1 else 1
            best = max(best, run)
            prev = g
        return best

    def _declare_lost(self, ext: int, when: int) -> None:
        seq = ext % SEQ_MOD
        self.disposition[ext] = "lost"
        self.lost.add(ext)
        self.cumulative_lost += 1
        self.loss_events.append((seq, when))
        self.trace.add(self.clock(), "LOSS", self.flow_id, seq, 0, "")

    def on_fec(self, fec: FecPacket, now: int) -> None:
        base = self._ext(fec.base_seq)
        if base in self.blocks:
            return
        block = FecBlockState.for_fec(fec, now_deadline(fec, now, self.config.delay_max))
        block.base_seq = fec.base_seq
        for i in range(fec.block_len):
            pkt = self.packets.get(base + i)
            if pkt is not None:
                block.add(pkt)
        self.blocks[base] = block
        self._try_block(block, now)

    def _blocks_covering(self, ext: int) -> List[FecBlockState]:
        return [b for base, b in self.blocks.items()
                if base <= ext < base + b.expected and b.fec is not None]

    def _try_block(self, block: FecBlockState, now: int) -> None:
        missing = block.missing()
        if len(missing) != 1:
            return
        rebuilt = try_recover(block, now)
        if rebuilt is None:
            return
        pkt = MediaPacket.from_payload(rebuilt.ssrc, rebuilt.seq, rebuilt.payload)
        if now - pkt.send_ts > self.config.delay_max:
            return
        ext = self._ext(pkt.seq)
        if self.disposition.get(ext, "lost") != "lost":
            return
        if ext in self.pending:
            seen, _ = self.pending.pop(ext)
            self._declare_lost(ext, max(seen, self.interval_start))
        elif ext not in self.lost:
            # tail of the block, never seen as a gap
            if self.highest is None or ext > self.highest:
                self._advance_highest(ext, now, pkt.send_ts)
            self._declare_lost(ext, now)
        self.lost.discard(ext)
        self.recovered.add(ext)
        self.disposition[ext] = "recovered"
        self.packets[ext] = pkt
        block.add(pkt)
        self.trace.add(now, "RECOVERED", self.flow_id, pkt.seq, pkt.size,
                       f"{pkt.frame_id}:{pkt.fragment_index}/{pkt.fragment_count}")

    def _expire(self, now: int) -> None:
        if self.pending and any(now > dl for _, dl in self.pending.values()):
            self._finalize_gaps(now)

    def _prune(self, ext: int) -> None:
        if len(self.packets) > 512:
            keep = ext - 256
            self.packets = {k: v for k, v in self.packets.items() if k >= keep}
            self.blocks = {k: v for k, v in self.blocks.items() if k >= keep}
            self.disposition = {k: v for k, v in self.disposition.items() if k >= keep}
            self.lost = {k for k in self.lost if k >= keep}

    def _update_jitter(self, pkt: MediaPacket, now: int) -> None:
        transit = now - pkt.frame_ts
        if self._last_transit is not None:
            d = abs(transit - self._last_transit)
            self.jitter += (d - self.jitter) / 16
        self._last_transit = transit

    # --- reports -------------------------------------------------------

    def _on_regular(self, token: int) -> None:
        if token != self._timer_token:
            return
        now = self.clock()
        self.send_report(now, early=False)
        self._schedule_regular(now)

    def early_allowed(self, now: int) -> bool:
        if self.last_early is None:
            return True
        return now - self.last_early >= self.config.early_budget_intervals * self.report_interval()

    def maybe_early(self, now: int) -> bool:
        # an early report right after another report carries no information
        if not self.early_allowed(now) or now - self.interval_start < self.report_interval() // 4:
            return False
        self.last_early = now
        self.send_report(now, early=True)
        self._schedule_regular(now)
        return True

    def build_report(self, now: int, early: bool = False) -> FeedbackReport:
        self._expire(now)
        highest = (self.highest if self.highest is not None else 0) % SEQ_MOD
        lsr = self.last_sr.ntp_ts if self.last_sr is not None else 0
        dlsr = now - self.last_sr_arrival if self.last_sr is not None else 0
        report = FeedbackReport(
            ssrc=self.ssrc,
            report_ts=now,
            interval_start=self.interval_start,
            highest_seq=highest,
            cumulative_lost=self.cumulative_lost,
            interval_sent=self.interval_received,
            loss_events=sorted(self.loss_events, key=lambda e: e[1]),
            discard_events=sorted(self.discard_events, key=lambda e: e[1]),
            owd_sample=self.last_owd,
            jitter=int(self.jitter),
            lsr=lsr,
            dlsr=dlsr,
            is_early=early,
        )
        self.loss_events = []
        self.discard_events = []
        self.interval_received = 0
        self.interval_start = now
        return report

    def send_report(self, now: int, early: bool) -> FeedbackReport:
        report = self.build_report(now, early)
        self.reports_sent += 1
        self.trace.add(now, "RTCP_SENT", self.flow_id, report.highest_seq, report.size,
                       "early" if early else "regular")
        self.transmit(report, report.size)
        return report


def now_deadline(fec: FecPacket, now: int, delay_max: int) -> int:
    """Recovery cutoff for a block: the parity packet follows the newest
    covered packet, so no covered packet can still be playable after the
    parity packet's own deadline."""
    return fec.send_ts + delay_max
