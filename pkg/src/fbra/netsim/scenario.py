"""Scenario configuration and the three dumbbell topologies."""
from __future__ import annotations

import logging
import random
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

from ..controller import FbraController
from ..endpoints import Receiver, ReceiverConfig, Sender, SenderConfig
from ..fec import MAX_INTERVAL, MIN_INTERVAL
from ..trace import SimTrace
from ..types import US_PER_MS, US_PER_S
from .engine import DEFAULT_SCHEDULE, Datagram, EventLoop, Link, StepSchedule
from .tcp import TcpFlow

logger = logging.getLogger(__name__)

TOPOLOGIES = ("single_var_link", "rtp_vs_tcp", "multi_rtp_vs_tcp")
BOTTLENECK_DELAYS_MS = (50, 100, 240)
ACCESS_CAPACITY = 100_000_000
ACCESS_DELAY = 1 * US_PER_MS
QUEUE_LIMIT = 50
VAR_MIN = 100_000
VAR_MAX = 256_000
REQUIRED_KEYS = ("topology", "bottleneck_delay_ms", "duration_s")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Scenario:
    topology: str
    bottleneck_delay_ms: int = 50
    bottleneck_capacity_kbps: Optional[int] = None
    schedule: Optional[Tuple[Tuple[int, int], ...]] = None
    schedule_cycle_s: Optional[int] = None
    rtp_flows: int = 1
    tcp_flows: int = 0
    duration_s: float = 300.0
    seed: int = 1
    fec_interval_min: int = MIN_INTERVAL
    fec_interval_max: int = MAX_INTERVAL
    rtcp_min_interval_ms: int = 500
    tcp_rwnd: int = 64

    def __post_init__(self) -> None:
        if self.topology not in TOPOLOGIES:
            raise ConfigError(f"unknown topology {self.topology!r}; expected one of {TOPOLOGIES}")
        if self.bottleneck_delay_ms <= 0:
            raise ConfigError("bottleneck_delay_ms must be positive")
        if self.duration_s < 0:
            raise ConfigError("duration_s must be >= 0")
        if self.rtp_flows < 0 or self.tcp_flows < 0:
            raise ConfigError("flow counts must be >= 0")
        if not MIN_INTERVAL <= self.fec_interval_min <= self.fec_interval_max <= MAX_INTERVAL:
            raise ConfigError("FEC interval bounds must satisfy 2 <= min <= max <= 14")
        if self.topology == "single_var_link" and self.schedule is not None:
            rates = [bps for _, bps in self.schedule]
            if min(rates) < VAR_MIN or max(rates) > VAR_MAX:
                raise ConfigError("variable link schedule must stay within [100, 256] kbps")
        if self.bottleneck_capacity_kbps is not None and self.bottleneck_capacity_kbps <= 0:
            raise ConfigError("bottleneck_capacity_kbps must be positive")

    @property
    def duration_us(self) -> int:
        return int(round(self.duration_s * US_PER_S))

    def capacity(self):
        """Bottleneck capacity: constant bps or a :class:`StepSchedule`."""
        if self.schedule is not None:
            cycle = self.schedule_cycle_s * US_PER_S if self.schedule_cycle_s else None
            return StepSchedule(self.schedule, cycle)
        if self.bottleneck_capacity_kbps is not None:
            return self.bottleneck_capacity_kbps * 1000
        if self.topology == "single_var_link":
            return DEFAULT_SCHEDULE
        return 5_000_000

    def mean_capacity(self) -> float:
        cap = self.capacity()
        if isinstance(cap, StepSchedule):
            return cap.mean(self.duration_us)
        return float(cap)


def default_scenario(topology: str, delay_ms: int = 50, **kw) -> Scenario:
    if topology == "single_var_link":
        base = dict(rtp_flows=1, tcp_flows=0)
    elif topology == "rtp_vs_tcp":
        base = dict(rtp_flows=1, tcp_flows=10, bottleneck_capacity_kbps=5000)
    elif topology == "multi_rtp_vs_tcp":
        base = dict(rtp_flows=2, tcp_flows=10, bottleneck_capacity_kbps=5000)
    else:
        raise ConfigError(f"unknown topology {topology!r}")
    base.update(kw)
    return Scenario(topology=topology, bottleneck_delay_ms=delay_ms, **base)


_INT_KEYS = {"bottleneck_delay_ms", "bottleneck_capacity_kbps", "rtp_flows", "tcp_flows", "seed",
             "fec_interval_min", "fec_interval_max", "rtcp_min_interval_ms", "tcp_rwnd",
             "schedule_cycle_s"}
_FLOAT_KEYS = {"duration_s"}
_KNOWN_KEYS = _INT_KEYS | _FLOAT_KEYS | {"topology", "schedule"}


def parse_config(text: str, base_dir: Optional[Path] = None) -> Scenario:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _KNOWN_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = value
    for key in REQUIRED_KEYS:
        if key not in values:
            raise ConfigError(f"missing required key {key!r}")
    kwargs: Dict[str, object] = {}
    try:
        for key, value in values.items():
            if key in _INT_KEYS:
                kwargs[key] = int(value)
            elif key in _FLOAT_KEYS:
                kwargs[key] = float(value)
            elif key == "schedule":
                path = Path(value)
                if base_dir is not None and not path.is_absolute():
                    path = base_dir / path
                kwargs["schedule"] = load_schedule(path)
            else:
                kwargs[key] = value
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad value for {key!r}: {exc}") from None
    topology = str(kwargs.pop("topology"))
    if topology not in TOPOLOGIES:
        raise ConfigError(f"unknown topology {topology!r}; expected one of {TOPOLOGIES}")
    defaults = default_scenario(topology)
    return replace(defaults, **kwargs)


def load_config(path: Union[str, Path]) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, path.parent)


def load_schedule(path: Path) -> Tuple[Tuple[int, int], ...]:
    """Schedule file: one ``start_seconds capacity_kbps`` pair per line."""
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read schedule {path}: {exc}") from None
    steps = []
    for raw in lines:
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        start, kbps = line.replace(",", " ").split()
        steps.append((int(float(start) * US_PER_S), int(float(kbps) * 1000)))
    if not steps or steps[0][0] != 0:
        raise ConfigError("schedule must start at time 0")
    return tuple(steps)


@dataclass
class Network:
    """Built simulation: the loop, the shared links and every endpoint."""

    scenario: Scenario
    loop: EventLoop
    trace: SimTrace
    bottleneck_fwd: Link
    bottleneck_rev: Link
    senders: List[Sender] = field(default_factory=list)
    receivers: List[Receiver] = field(default_factory=list)
    tcp: List[TcpFlow] = field(default_factory=list)
    links: List[Link] = field(default_factory=list)


def build(scenario: Scenario) -> Network:
    loop = EventLoop()
    trace = SimTrace()
    cap = scenario.capacity()
    delay = scenario.bottleneck_delay_ms * US_PER_MS
    fwd = Link(loop, "bottleneck>", cap, delay, QUEUE_LIMIT)
    rev = Link(loop, "bottleneck<", cap, delay, QUEUE_LIMIT)
    net = Network(scenario, loop, trace, fwd, rev, links=[fwd, rev])
    master = random.Random(scenario.seed)

    def access(name: str) -> Link:
        link = Link(loop, name, ACCESS_CAPACITY, ACCESS_DELAY, QUEUE_LIMIT)
        net.links.append(link)
        return link

    rx_cfg = ReceiverConfig(rtcp_min_interval=scenario.rtcp_min_interval_ms * US_PER_MS)
    bounds = (scenario.fec_interval_min, scenario.fec_interval_max)
    for i in range(scenario.rtp_flows):
        flow = f"rtp{i}"
        rng = random.Random(master.getrandbits(64))
        start = rng.randrange(0, US_PER_S // 30)
        path_fwd = [access(f"{flow}.src>"), fwd, access(f"{flow}.dst>")]
        path_rev = [access(f"{flow}.dst<"), rev, access(f"{flow}.src<")]
        ssrc = 0x1000 + i
        ctl = FbraController(interval_bounds=bounds, now=start)
        holder: Dict[str, object] = {}

        def to_receiver(body, size, _path=path_fwd, _h=holder):
            _send(Datagram(size, body, _path, _h["rx_sink"]))

        def to_sender(body, size, _path=path_rev, _h=holder):
            _send(Datagram(size, body, _path, _h["tx_sink"]))

        sender = Sender(flow, ssrc, loop.at, lambda: loop.now, to_receiver, trace,
                        SenderConfig(), ctl, start)
        receiver = Receiver(flow, ssrc, loop.at, lambda: loop.now, to_sender, trace, rx_cfg,
                            start)
        holder["rx_sink"] = lambda dg, now, _r=receiver: _r.on_datagram(dg.body, now)
        holder["tx_sink"] = lambda dg, now, _s=sender: _s.on_report(dg.body, now)
        net.senders.append(sender)
        net.receivers.append(receiver)

    for i in range(scenario.tcp_flows):
        name = f"tcp{i}"
        rng = random.Random(master.getrandbits(64))
        path_fwd = [access(f"{name}.src>"), fwd, access(f"{name}.dst>")]
        path_rev = [access(f"{name}.dst<"), rev, access(f"{name}.src<")]
        net.tcp.append(TcpFlow(loop, name, path_fwd, path_rev, rng, trace, scenario.tcp_rwnd))

    trace.meta.update(
        duration_us=str(scenario.duration_us),
        topology=scenario.topology,
        delay_ms=str(scenario.bottleneck_delay_ms),
        seed=str(scenario.seed),
        mean_capacity_bps=str(int(scenario.mean_capacity())),
        flows=";".join([f"rtp{i}" for i in range(scenario.rtp_flows)]
                       + [f"tcp{i}" for i in range(scenario.tcp_flows)]),
    )
    return net


def _send(dg: Datagram) -> None:
    dg.route[0].enqueue(dg)


def run(scenario: Scenario) -> SimTrace:
    """Run ``scenario`` to completion and return its trace.

    The result is a pure function of the scenario (seed included).
    """
    net = build(scenario)
    end = scenario.duration_us
    if end > 0:
        for s in net.senders:
            s.start()
        for r in net.receivers:
            r.start()
        for t in net.tcp:
            t.start()
        net.loop.run(end)
    trace = net.trace
    trace.events = [e for e in trace.events if e.time <= end]
    trace.events.sort(key=lambda e: e.time)
    logger.info("run %s seed=%d: %d events", scenario.topology, scenario.seed, len(trace.events))
    return trace
