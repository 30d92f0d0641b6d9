"""On-off TCP-like cross traffic.

Each flow alternates between downloading a file and idling. The transfer
uses slow start and additive increase; any loss (three duplicate ACKs or a
retransmission timeout) is handled timeout-style: ssthresh = cwnd / 2,
cwnd = 1, go-back-N from the first unacknowledged segment. There is no
fast recovery and no delayed ACK.
"""
from __future__ import annotations

import random
from typing import Optional, Sequence, Set

from ..trace import SimTrace
from ..types import US_PER_MS, US_PER_S
from .engine import Datagram, EventLoop, Link

MSS = 1460
HEADER = 40
ACK_SIZE = 40
MIN_FILE = 100_000
MAX_FILE = 1_500_000
IDLE_MEAN_US = 10 * US_PER_S
MIN_RTO = 200 * US_PER_MS
INITIAL_RTO = 1 * US_PER_S
MAX_RTO = 60 * US_PER_S


class TcpFlowModel:
    """Sender-side window state of one transfer (plain AIMD arithmetic)."""

    def __init__(self, ssthresh: float = 64.0, rwnd: int = 64):
        self.cwnd = 1.0
        self.ssthresh = ssthresh
        self.rwnd = rwnd

    @property
    def window(self) -> int:
        return max(1, min(int(self.cwnd), self.rwnd))

    def on_ack(self, newly_acked: int = 1) -> None:
        for _ in range(newly_acked):
            if self.cwnd < self.ssthresh:
                self.cwnd += 1.0
            else:
                self.cwnd += 1.0 / self.cwnd
        self.cwnd = min(self.cwnd, float(self.rwnd))

    def on_loss(self) -> None:
        self.ssthresh = max(self.cwnd / 2.0, 2.0)
        self.cwnd = 1.0


def tcp_step(flow: TcpFlowModel, event: str, acked: int = 1) -> TcpFlowModel:
    if event == "ack":
        flow.on_ack(acked)
    elif event == "loss":
        flow.on_loss()
    else:
        raise ValueError(f"unknown tcp event {event!r}")
    return flow


class TcpFlow:
    """One on-off flow between a left-side sender and a right-side receiver."""

    def __init__(
        self,
        loop: EventLoop,
        name: str,
        fwd: Sequence[Link],
        rev: Sequence[Link],
        rng: random.Random,
        trace: SimTrace,
        rwnd: int = 64,
    ):
        self.loop = loop
        self.name = name
        self.fwd = fwd
        self.rev = rev
        self.rng = rng
        self.trace = trace
        self.rwnd = rwnd
        self.state = "idle"
        self.epoch = 0
        self.transfers_started = 0
        self.transfers_done = 0
        self.bytes_delivered = 0
        self.model = TcpFlowModel(rwnd=rwnd)
        self.file_size = 0
        self.nseg = 0
        self.snd_una = 0
        self.snd_nxt = 0
        self.recover = -1
        self.dupacks = 0
        self.rcv_next = 0
        self.ooo: Set[int] = set()
        self.srtt: Optional[float] = None
        self.rttvar = 0.0
        self.rto = INITIAL_RTO
        self.timer_token = 0
        self.timer_armed = False

    def start(self) -> None:
        self._idle()

    def _idle(self) -> None:
        self.state = "idle"
        gap = int(self.rng.expovariate(1.0 / IDLE_MEAN_US))
        self.loop.after(gap, self._begin)

    def _begin(self) -> None:
        self.transfer(self.rng.randint(MIN_FILE, MAX_FILE))

    def transfer(self, file_size: int) -> None:
        """Start downloading ``file_size`` bytes now."""
        self.epoch += 1
        self.state = "transferring"
        self.transfers_started += 1
        self.file_size = file_size
        self.nseg = -(-self.file_size // MSS)
        self.model = TcpFlowModel(rwnd=self.rwnd)
        self.snd_una = self.snd_nxt = 0
        self.recover = -1
        self.dupacks = 0
        self.rcv_next = 0
        self.ooo = set()
        self.trace.add(self.loop.now, "STATE", self.name, self.epoch, self.file_size, "on")
        self._send_more()

    def remaining_bytes(self) -> int:
        return max(0, self.file_size - self.snd_una * MSS) if self.state == "transferring" else 0

    def _seg_bytes(self, seg: int) -> int:
        return min(MSS, self.file_size - seg * MSS)

    def _send_more(self) -> None:
        limit = self.snd_una + self.model.window
        while self.snd_nxt < self.nseg and self.snd_nxt < limit:
            self._transmit(self.snd_nxt)
            self.snd_nxt += 1

    def _transmit(self, seg: int) -> None:
        size = self._seg_bytes(seg) + HEADER
        dg = Datagram(size, (self.epoch, seg, self.loop.now), self.fwd, self._on_data)
        self.fwd[0].enqueue(dg)
        if not self.timer_armed:
            self._arm_timer()

    # receiver side
    def _on_data(self, dg: Datagram, now: int) -> None:
        epoch, seg, ts = dg.body
        if epoch != self.epoch:
            return
        if seg == self.rcv_next:
            start = self.rcv_next
            self.rcv_next += 1
            while self.rcv_next in self.ooo:
                self.ooo.discard(self.rcv_next)
                self.rcv_next += 1
            delivered = sum(self._seg_bytes(s) for s in range(start, self.rcv_next))
            self.bytes_delivered += delivered
            self.trace.add(now, "RECV", self.name, start, delivered, "")
        elif seg > self.rcv_next:
            self.ooo.add(seg)
        ack = Datagram(ACK_SIZE, (epoch, self.rcv_next, ts), self.rev, self._on_ack)
        self.rev[0].enqueue(ack)

    # sender side
    def _on_ack(self, dg: Datagram, now: int) -> None:
        epoch, ack, ts = dg.body
        if epoch != self.epoch or self.state != "transferring":
            return
        if ack > self.snd_una:
            self._rtt_sample(now - ts)
            self.model.on_ack(ack - self.snd_una)
            self.snd_una = ack
            self.snd_nxt = max(self.snd_nxt, ack)
            self.dupacks = 0
            if self.snd_una >= self.nseg:
                self._complete(now)
                return
            self._arm_timer()
            self._send_more()
        elif ack == self.snd_una:
            self.dupacks += 1
            if self.dupacks == 3 and self.snd_una > self.recover:
                self._loss()

    def _loss(self) -> None:
        self.model.on_loss()
        self.recover = self.snd_nxt - 1
        self.snd_nxt = self.snd_una
        self.dupacks = 0
        self._arm_timer()
        self._send_more()

    def _complete(self, now: int) -> None:
        self.transfers_done += 1
        self.timer_token += 1
        self.timer_armed = False
        self.trace.add(now, "STATE", self.name, self.epoch, self.file_size, "off")
        self._idle()

    def _rtt_sample(self, rtt: int) -> None:
        if self.srtt is None:
            self.srtt = float(rtt)
            self.rttvar = rtt / 2.0
        else:
            self.rttvar = 0.75 * self.rttvar + 0.25 * abs(self.srtt - rtt)
            self.srtt = 0.875 * self.srtt + 0.125 * rtt
        self.rto = int(min(MAX_RTO, max(MIN_RTO, self.srtt + 4 * self.rttvar)))

    def _arm_timer(self) -> None:
        self.timer_token += 1
        self.timer_armed = True
        self.loop.after(self.rto, self._on_timeout, self.timer_token)

    def _on_timeout(self, token: int) -> None:
        if token != self.timer_token or self.state != "transferring":
            return
        self.timer_armed = False
        self.rto = min(MAX_RTO, self.rto * 2)
        self.recover = self.snd_nxt - 1
        self.model.on_loss()
        self.snd_nxt = self.snd_una
        self.dupacks = 0
        self._send_more()
