"""Simulation trace: an ordered list of timestamped events plus CSV I/O."""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, NamedTuple, Optional, Union

TRACE_SCHEMA = "fbra-trace v1"
COLUMNS = "time_us,event_kind,flow_id,seq,size_bytes,extra"

EVENT_KINDS = (
    "SEND_RTP",
    "SEND_FEC",
    "RECV",
    "LOSS",
    "DISCARD",
    "RECOVERED",
    "RTCP_SENT",
    "RTCP_RECV",
    "STATE",
    "RATE",
)


class TraceEvent(NamedTuple):
    time: int
    kind: str
    flow: str
    seq: int = 0
    size: int = 0
    extra: str = ""


@dataclass
class SimTrace:
    """Everything the metrics module needs from one run.

    ``meta`` holds run-level facts (duration, scenario name, mean bottleneck
    capacity) and is written into the CSV header line.
    """

    events: List[TraceEvent] = field(default_factory=list)
    meta: Dict[str, str] = field(default_factory=dict)

    def add(self, time: int, kind: str, flow: str, seq: int = 0, size: int = 0,
            extra: str = "") -> None:
        self.events.append(TraceEvent(time, kind, flow, seq, size, extra))

    @property
    def duration(self) -> int:
        return int(self.meta.get("duration_us", 0))

    def flows(self) -> List[str]:
        seen: Dict[str, None] = {}
        for f in self.meta.get("flows", "").split(";"):
            if f:
                seen[f] = None
        for ev in self.events:
            seen.setdefault(ev.flow, None)
        return list(seen)

    def of_flow(self, flow: str) -> Iterator[TraceEvent]:
        return (ev for ev in self.events if ev.flow == flow)

    def write(self, dest: Union[str, Path, io.TextIOBase]) -> None:
        if isinstance(dest, (str, Path)):
            with open(dest, "w", newline="") as fh:
                self.write(fh)
            return
        meta = " ".join(f"{k}={v}" for k, v in sorted(self.meta.items()))
        dest.write(f"# {TRACE_SCHEMA} {meta}".rstrip() + "\n")
        dest.write(COLUMNS + "\n")
        dest.writelines(
            f"{e.time},{e.kind},{e.flow},{e.seq},{e.size},{e.extra}\n" for e in self.events
        )

    @classmethod
    def read(cls, src: Union[str, Path, Iterable[str]]) -> "SimTrace":
        if isinstance(src, (str, Path)):
            with open(src) as fh:
                return cls.read(fh)
        lines = iter(src)
        first = next(lines).rstrip("\n")
        if not first.startswith("# " + TRACE_SCHEMA):
            raise ValueError(f"unsupported trace header: {first!r}")
        meta = dict(
            tok.split("=", 1) for tok in first[len(TRACE_SCHEMA) + 2:].split() if "=" in tok
        )
        header = next(lines).rstrip("\n")
        if header != COLUMNS:
            raise ValueError(f"unexpected column header: {header!r}")
        trace = cls(meta=meta)
        for line in lines:
            t, kind, flow, seq, size, extra = line.rstrip("\n").split(",", 5)
            trace.events.append(TraceEvent(int(t), kind, flow, int(seq), int(size), extra))
        return trace


def is_rtp_flow(flow: str) -> bool:
    return flow.startswith("rtp")


def is_tcp_flow(flow: str) -> bool:
    return flow.startswith("tcp")


def parse_rate_extra(extra: str) -> Dict[str, str]:
    """RATE events carry ``key=value`` pairs separated by ``;``."""
    return dict(kv.split("=", 1) for kv in extra.split(";") if kv)


def last_state_before(events: List[TraceEvent], index: int) -> Optional[str]:
    for ev in reversed(events[:index]):
        if ev.kind == "STATE":
            return ev.extra
    return None
