"""Per-flow and per-run metrics computed from a :class:`SimTrace`.

Besides goodput, loss rate, lost frames and bandwidth utilization this
covers the three FEC-specific metrics: FEC rate-control correctness (FRCC),
FEC frame recovery efficiency (FFRE) and TCP fair share (TFS).
"""
from __future__ import annotations

import math
import statistics
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, List, Optional, Sequence

from .trace import SimTrace, TraceEvent, is_rtp_flow, is_tcp_flow
from .types import US_PER_S


class UnknownFlow(KeyError):
    pass


class NoTcpFlows(ValueError):
    pass


@dataclass
class FlowSummary:
    flow: str
    goodput: float
    loss_rate: float
    lost_frames: int
    fec_rate: float
    frcc: Optional[float]
    ffre: Optional[float]
    abu: float
    sending_rate: float
    sent: int
    played: int
    discarded: int
    lost: int
    recovered: int

    def to_dict(self) -> dict:
        return asdict(self)


def state_sequence(events: Iterable[TraceEvent]) -> List[str]:
    return [e.extra for e in events if e.kind == "STATE"]


def classify_episodes(states: Sequence[str]) -> List[str]:
    """Label every FEC probing episode as ``raise``, ``keep`` or ``incorrect``.

    An episode opens on a STAY -> PROBE transition and closes when the
    machine is back in STAY. Entering DOWN first makes it incorrect;
    otherwise it raised the rate if it passed through UP. An episode still
    open at the end of the trace counts as kept (or raised) unless it
    already hit DOWN.
    """
    labels: List[str] = []
    current: Optional[str] = None
    prev = None
    for s in states:
        if current is None:
            if prev == "STAY" and s == "PROBE":
                current = "keep"
        else:
            if s == "DOWN":
                labels.append("incorrect")
                current = None
            elif s == "UP":
                current = "raise"
            elif s == "STAY":
                labels.append(current)
                current = None
        prev = s
    if current is not None:
        labels.append(current)
    return labels


def frcc_from_states(states: Sequence[str]) -> Optional[float]:
    labels = classify_episodes(states)
    if not labels:
        return None
    good = sum(1 for x in labels if x in ("raise", "keep"))
    return good / len(labels)


def frcc(trace: SimTrace, flow: Optional[str] = None) -> Optional[float]:
    """FRCC for one RTP flow, or pooled over all RTP flows' episodes."""
    flows = [flow] if flow else [f for f in trace.flows() if is_rtp_flow(f)]
    labels: List[str] = []
    for f in flows:
        labels += classify_episodes(state_sequence(trace.of_flow(f)))
    if not labels:
        return None
    return sum(1 for x in labels if x != "incorrect") / len(labels)


class _FlowPass:
    """Single pass over one RTP flow's events."""

    def __init__(self, events: Iterable[TraceEvent]):
        self.sent = self.sent_bits = 0
        self.fec_bits = 0
        self.played = self.played_bits = 0
        self.discarded = 0
        self.recovered_bits = 0
        self.frame_of: Dict[int, int] = {}
        self.frames_sent: set = set()
        self.lost_seq: Dict[int, int] = {}
        self.recovered_seq: Dict[int, int] = {}
        self.discarded_frames: set = set()
        self.protected_frames: set = set()
        for e in events:
            k = e.kind
            if k == "SEND_RTP":
                self.sent += 1
                self.sent_bits += 8 * e.size
                frame = int(e.extra.split(":", 1)[0])
                self.frame_of[e.seq] = frame
                self.frames_sent.add(frame)
            elif k == "SEND_FEC":
                self.fec_bits += 8 * e.size
                for i in range(int(e.extra)):
                    frame = self.frame_of.get((e.seq + i) & 0xFFFF)
                    if frame is not None:
                        self.protected_frames.add(frame)
            elif k == "RECV":
                self.played += 1
                self.played_bits += 8 * e.size
            elif k == "DISCARD":
                self.discarded += 1
                self.discarded_frames.add(self.frame_of.get(e.seq, -1))
            elif k == "LOSS":
                self.lost_seq[e.seq] = self.frame_of.get(e.seq, -1)
            elif k == "RECOVERED":
                self.recovered_seq[e.seq] = self.frame_of.get(e.seq, -1)
                self.recovered_bits += 8 * e.size

    @property
    def lost_unrecovered(self) -> int:
        return sum(1 for s in self.lost_seq if s not in self.recovered_seq)

    def frame_outcomes(self):
        """(frames recovered, frames protected but lost, frames lost)."""
        lost_frames: Dict[int, bool] = {}
        for seq, frame in self.lost_seq.items():
            ok = seq in self.recovered_seq
            lost_frames[frame] = lost_frames.get(frame, True) and ok
        recovered = {f for f, ok in lost_frames.items() if ok}
        unrecovered = {f for f, ok in lost_frames.items() if not ok}
        protected_lost = unrecovered & self.protected_frames
        bad = unrecovered | self.discarded_frames
        bad.discard(-1)
        return recovered, protected_lost, bad


def ffre(trace: SimTrace, flow: Optional[str] = None) -> Optional[float]:
    flows = [flow] if flow else [f for f in trace.flows() if is_rtp_flow(f)]
    rec = pbl = 0
    for f in flows:
        recovered, protected_lost, _ = _FlowPass(trace.of_flow(f)).frame_outcomes()
        rec += len(recovered)
        pbl += len(protected_lost)
    if rec + pbl == 0:
        return None
    return rec / (pbl + rec)


def ffre_counts(recovered: int, protected_but_lost: int) -> Optional[float]:
    if recovered + protected_but_lost == 0:
        return None
    return recovered / (protected_but_lost + recovered)


def flow_throughput(trace: SimTrace, flow: str) -> float:
    """Delivered bits per second: played + recovered media for RTP flows,
    in-order bytes for TCP flows."""
    dur = trace.duration
    if dur <= 0:
        return 0.0
    bits = sum(8 * e.size for e in trace.of_flow(flow) if e.kind in ("RECV", "RECOVERED"))
    return bits * US_PER_S / dur


def tfs_value(tcp_throughput: float, n_tcp: int, total_throughput: float, n_flows: int) -> float:
    if n_tcp <= 0:
        raise NoTcpFlows("TFS needs at least one TCP flow")
    if total_throughput <= 0:
        return 0.0
    return (tcp_throughput / n_tcp) / (total_throughput / n_flows)


def tfs(trace: SimTrace) -> float:
    flows = trace.flows()
    tcp = [f for f in flows if is_tcp_flow(f)]
    if not tcp:
        raise NoTcpFlows("trace has no TCP flows")
    per = {f: flow_throughput(trace, f) for f in flows}
    tcp_tp = sum(per[f] for f in tcp)
    return tfs_value(tcp_tp, len(tcp), sum(per.values()), len(flows))


def flow_summary(trace: SimTrace, flow_id: str, link_capacity: Optional[float] = None) -> FlowSummary:
    if flow_id not in trace.flows():
        raise UnknownFlow(flow_id)
    events = list(trace.of_flow(flow_id))
    p = _FlowPass(events)
    dur = trace.duration or 1
    if link_capacity is None:
        link_capacity = float(trace.meta.get("mean_capacity_bps", 0)) or None
    sending = (p.sent_bits + p.fec_bits) * US_PER_S / dur
    _, _, bad_frames = p.frame_outcomes()
    lost_unrec = p.lost_unrecovered
    return FlowSummary(
        flow=flow_id,
        goodput=(p.played_bits + p.recovered_bits) * US_PER_S / dur,
        loss_rate=lost_unrec / p.sent if p.sent else 0.0,
        lost_frames=len(bad_frames),
        fec_rate=p.fec_bits * US_PER_S / dur,
        frcc=frcc_from_states(state_sequence(events)),
        ffre=ffre(trace, flow_id),
        abu=min(1.0, sending / link_capacity) if link_capacity else 0.0,
        sending_rate=p.sent_bits * US_PER_S / dur,
        sent=p.sent,
        played=p.played,
        discarded=p.discarded,
        lost=len(p.lost_seq),
        recovered=len(p.recovered_seq),
    )


def run_summary(trace: SimTrace) -> dict:
    """Everything written to summary.json for one run."""
    flows = trace.flows()
    rtp = [f for f in flows if is_rtp_flow(f)]
    tcp = [f for f in flows if is_tcp_flow(f)]
    out: dict = {
        "schema": "fbra-summary/1",
        "meta": dict(trace.meta),
        "flows": {f: flow_summary(trace, f).to_dict() for f in rtp},
        "frcc": frcc(trace),
        "ffre": ffre(trace),
    }
    if tcp:
        out["tcp_throughput"] = sum(flow_throughput(trace, f) for f in tcp) / len(tcp)
        out["tfs"] = tfs(trace)
    return out


def flatten(summary: dict) -> Dict[str, float]:
    """Numeric metrics of a run summary as a flat ``name -> value`` map."""
    flat: Dict[str, float] = {}
    for flow, fs in summary["flows"].items():
        for key, value in fs.items():
            if isinstance(value, (int, float)) and not isinstance(value, bool):
                flat[f"{flow}.{key}"] = float(value)
    for key in ("frcc", "ffre", "tfs", "tcp_throughput"):
        value = summary.get(key)
        if value is not None:
            flat[key] = float(value)
    return flat


def aggregate(summaries: Sequence[dict]) -> Dict[str, Dict[str, float]]:
    """Mean and population standard deviation per metric across runs."""
    keys: Dict[str, List[float]] = {}
    for s in summaries:
        for k, v in flatten(s).items():
            keys.setdefault(k, []).append(v)
    out = {}
    for k, vals in sorted(keys.items()):
        out[k] = {
            "avg": statistics.fmean(vals),
            "sigma": statistics.pstdev(vals) if len(vals) > 1 else 0.0,
            "n": len(vals),
        }
    return out


def timeseries(trace: SimTrace, bucket_us: int = US_PER_S) -> List[dict]:
    """Per-flow 1 s buckets of sending rate, FEC rate, goodput and mean OWD."""
    dur = trace.duration
    n = max(1, math.ceil(dur / bucket_us)) if dur > 0 else 0
    rows = []
    for flow in [f for f in trace.flows() if is_rtp_flow(f)]:
        send = [0] * n
        fec = [0] * n
        good = [0] * n
        owd_sum = [0] * n
        owd_n = [0] * n
        for e in trace.of_flow(flow):
            i = min(e.time // bucket_us, n - 1) if n else 0
            if e.kind == "SEND_RTP":
                send[i] += 8 * e.size
            elif e.kind == "SEND_FEC":
                fec[i] += 8 * e.size
            elif e.kind in ("RECV", "RECOVERED"):
                good[i] += 8 * e.size
                if e.kind == "RECV":
                    owd_sum[i] += int(e.extra)
                    owd_n[i] += 1
        scale = US_PER_S / bucket_us
        for i in range(n):
            rows.append({
                "time_s": i * bucket_us / US_PER_S,
                "flow_id": flow,
                "sending_rate_kbps": send[i] * scale / 1000,
                "fec_rate_kbps": fec[i] * scale / 1000,
                "goodput_kbps": good[i] * scale / 1000,
                "owd_ms": owd_sum[i] / owd_n[i] / 1000 if owd_n[i] else "",
            })
    return rows
