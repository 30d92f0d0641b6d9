"""FEC-based rate adaptation: the STAY/PROBE/UP/DOWN state machine.

The pure functions (:func:`step`, :func:`undershoot`, :func:`bounce_back`,
:func:`select_fec_interval`, ...) hold the decision logic.
:class:`FbraController` keeps the per-flow state around them: OWD history,
rate history, RTT samples, the rate-control disable window and bounce-back.
"""
from __future__ import annotations

import enum
import logging
import statistics
from collections import deque
from dataclasses import dataclass
from typing import Deque, Optional, Tuple

from .fec import MAX_INTERVAL, MIN_INTERVAL
from .owd import NEUTRAL, OwdCorrelation, OwdHistory
from .types import MIN_RATE, START_RATE, US_PER_S, FeedbackReport

logger = logging.getLogger(__name__)

RATE_WINDOW_US = 2 * US_PER_S
FEEDBACK_TIMEOUT_US = 2 * US_PER_S
RTT_SAMPLES = 10
EARLY_GAP_FACTOR = 1.5
DISABLE_FACTOR = 1.25


class State(str, enum.Enum):
    STAY = "STAY"
    PROBE = "PROBE"
    UP = "UP"
    DOWN = "DOWN"


class Action(str, enum.Enum):
    NONE = "none"
    UNDERSHOOT = "undershoot"
    UNDERSHOOT_DISABLE = "undershoot+disable"
    INCREASE = "increase"
    FEC_INTERVAL_UP = "fec_interval+1"
    BOUNCE_BACK = "bounce_back"
    TIMEOUT_HALVE = "timeout_halve"


class ReportTiming(str, enum.Enum):
    REGULAR = "regular"
    EARLY = "early"


@dataclass(frozen=True)
class Thresholds:
    alpha_stay: float = 1.1
    alpha_down_probe: float = 1.6
    alpha_down_up: float = 1.4
    alpha_undershoot: float = 2.0
    beta: float = 1.2

    def __post_init__(self) -> None:
        for name, value in vars(self).items():
            if not 1.0 <= value <= 2.0:
                raise ValueError(f"{name}={value} outside [1, 2]")


DEFAULT_THRESHOLDS = Thresholds()


@dataclass(frozen=True)
class CongestionCues:
    losses: bool = False
    recent_losses: bool = False
    discards: bool = False
    recent_discards: bool = False
    corr: OwdCorrelation = NEUTRAL

    def __post_init__(self) -> None:
        if (self.recent_losses and not self.losses) or (self.recent_discards and not self.discards):
            raise ValueError("recent events imply events")


@dataclass(frozen=True)
class ControllerDecision:
    new_state: State
    target_media_rate: int
    fec_enabled: bool
    fec_interval: int
    action: Action = Action.NONE
    rate_control_disabled_until: Optional[int] = None


class RateHistory:
    """Goodput, sending rate and combined media+FEC rate over the last 2 s."""

    def __init__(self, initial_goodput: int = 0, window: int = RATE_WINDOW_US):
        self.window = window
        self.initial_goodput = initial_goodput
        self.entries: Deque[Tuple[int, int, int, int]] = deque()

    def record(self, now: int, goodput: int, sending_rate: int, combined_rate: int) -> None:
        if not self.initial_goodput and goodput > 0:
            self.initial_goodput = goodput
        self.entries.append((now, goodput, sending_rate, combined_rate))
        self.evict(now)

    def evict(self, now: int) -> None:
        while self.entries and now - self.entries[0][0] > self.window:
            self.entries.popleft()

    def max_rate(self) -> int:
        """Highest value of any recorded rate in the window."""
        return max((max(e[1:]) for e in self.entries), default=0)

    def max_combined(self) -> int:
        return max((e[3] for e in self.entries), default=0)


def classify_cues(
    report: FeedbackReport,
    interval_start: int,
    interval_end: int,
    history: Optional[OwdHistory] = None,
) -> CongestionCues:
    """Split loss/discard events into early and recent halves of the interval
    and correlate the reported OWD against ``history``."""
    span = interval_end - interval_start
    if span <= 0:
        raise ValueError("interval_end must be after interval_start")

    def recent(events) -> bool:
        return any(2 * (t - interval_start) > span for _, t in events)

    corr = history.correlate(report.owd_sample) if history is not None else NEUTRAL
    return CongestionCues(
        losses=bool(report.loss_events),
        recent_losses=recent(report.loss_events),
        discards=bool(report.discard_events),
        recent_discards=recent(report.discard_events),
        corr=corr,
    )


def undershoot(sending_rate: int, goodput: int, floor: int = MIN_RATE) -> int:
    """Cut below goodput: 90% of (rate - 2 * (rate - goodput))."""
    gap = max(0, sending_rate - goodput)
    target = 9 * (sending_rate - 2 * gap) // 10
    return max(floor, min(target, sending_rate))


def bounce_back(stored_goodput: int, post_window_report_clean: bool,
                floor: int = MIN_RATE) -> Optional[int]:
    if not post_window_report_clean:
        return None
    return max(floor, 9 * stored_goodput // 10)


def select_fec_interval(
    rates: RateHistory,
    current_rate: int,
    lo: int = MIN_INTERVAL,
    hi: int = MAX_INTERVAL,
) -> int:
    """Low rate against the recent ceiling means a short interval (more
    redundancy, faster ramp); near the ceiling the interval grows."""
    ceiling = max(rates.max_combined(), rates.initial_goodput)
    if ceiling <= 0:
        return hi
    rho = min(1.0, current_rate / ceiling)
    interval = int(MIN_INTERVAL + (MAX_INTERVAL - MIN_INTERVAL) * rho + 0.5)
    return max(lo, min(hi, interval))


def on_report_timing(arrival_gap: int, rtt_median: int) -> ReportTiming:
    if rtt_median <= 0:
        raise ValueError("rtt_median must be positive")
    if arrival_gap < EARLY_GAP_FACTOR * rtt_median:
        return ReportTiming.EARLY
    return ReportTiming.REGULAR


def on_feedback_timeout(
    elapsed_since_last_report: int,
    current_rate: int,
    fec_interval: int = MAX_INTERVAL,
    floor: int = MIN_RATE,
) -> Optional[ControllerDecision]:
    if elapsed_since_last_report < FEEDBACK_TIMEOUT_US:
        return None
    return ControllerDecision(
        State.DOWN, max(current_rate // 2, floor), False, fec_interval, Action.TIMEOUT_HALVE
    )


def step(
    state: State,
    prev_state: State,
    cues: CongestionCues,
    rates: RateHistory,
    current_rate: int,
    current_fec_rate: int,
    *,
    goodput: int,
    fec_interval: int,
    now: int = 0,
    disable_for: int = 0,
    thresholds: Thresholds = DEFAULT_THRESHOLDS,
    interval_bounds: Tuple[int, int] = (MIN_INTERVAL, MAX_INTERVAL),
    floor: int = MIN_RATE,
) -> ControllerDecision:
    """One transition of the state machine for one regular report."""
    th = thresholds
    c = cues
    corr_high = c.corr.corr_high
    corr_low = c.corr.corr_low

    def stay(new_state: State = State.STAY) -> ControllerDecision:
        return ControllerDecision(new_state, max(current_rate, floor), False, fec_interval)

    def down(disable: bool = True) -> ControllerDecision:
        target = undershoot(current_rate, goodput, floor)
        if disable:
            return ControllerDecision(State.DOWN, target, False, fec_interval,
                                      Action.UNDERSHOOT_DISABLE, now + disable_for)
        return ControllerDecision(State.DOWN, target, False, fec_interval, Action.UNDERSHOOT)

    if state is State.DOWN:
        if c.recent_losses or c.discards:
            if prev_state is State.DOWN:
                return stay()
            return down(disable=not (c.discards and not c.losses))
        if corr_high > th.alpha_undershoot:
            return down()
        return stay()

    if state is State.STAY:
        if c.losses:
            return down() if c.recent_losses else stay()
        if c.recent_discards:
            return down()
        if corr_high > th.alpha_stay:
            return down() if prev_state is State.STAY else stay()
        if prev_state is not State.STAY and current_rate > 0.9 * rates.max_rate():
            # close to the recent peak: hold one more interval before probing
            return stay()
        interval = select_fec_interval(rates, current_rate, *interval_bounds)
        return ControllerDecision(State.PROBE, max(current_rate, floor), True, interval)

    if state is State.PROBE:
        if c.recent_losses or c.recent_discards:
            return down()
        if c.losses or c.discards:
            return stay()
        if corr_high > th.alpha_down_probe:
            return down()
        if corr_high > th.alpha_stay:
            return stay()
        if corr_low > th.beta:
            interval = min(fec_interval + 1, interval_bounds[1])
            return ControllerDecision(State.PROBE, max(current_rate, floor), True, interval,
                                      Action.FEC_INTERVAL_UP)
        return ControllerDecision(State.UP, max(current_rate + current_fec_rate, floor), False,
                                  fec_interval, Action.INCREASE)

    if state is State.UP:
        if c.recent_losses or c.discards or corr_high > th.alpha_down_up:
            return down()
        return stay()

    raise ValueError(f"unknown state {state!r}")


class FbraController:
    """Per-flow controller: feed it receiver reports, read back decisions."""

    def __init__(
        self,
        start_rate: int = START_RATE,
        min_rate: int = MIN_RATE,
        thresholds: Thresholds = DEFAULT_THRESHOLDS,
        interval_bounds: Tuple[int, int] = (MIN_INTERVAL, MAX_INTERVAL),
        history_capacity: int = 20,
        now: int = 0,
    ):
        lo, hi = interval_bounds
        if not MIN_INTERVAL <= lo <= hi <= MAX_INTERVAL:
            raise ValueError(f"bad FEC interval bounds {interval_bounds}")
        self.min_rate = min_rate
        self.thresholds = thresholds
        self.interval_bounds = interval_bounds
        self.state = State.STAY
        self.prev_state = State.STAY
        self.rate = max(start_rate, min_rate)
        self.fec_enabled = False
        self.fec_interval = hi
        self.owd = OwdHistory(history_capacity)
        self.rates = RateHistory()
        self.rtts: Deque[int] = deque(maxlen=RTT_SAMPLES)
        self.last_report_at: Optional[int] = None
        self.last_feedback_at = now
        self.regular_gap: Optional[int] = None
        self.ignore_next = False
        self.bounce_pending = False
        self.stored_goodput = 0
        self.disabled_until: Optional[int] = None

    @property
    def rtt_median(self) -> int:
        return int(statistics.median(self.rtts)) if self.rtts else 0

    def add_rtt(self, rtt: int) -> None:
        if rtt > 0:
            self.rtts.append(rtt)

    def regular_interval(self) -> int:
        if self.regular_gap:
            return self.regular_gap
        return 2 * self.rtt_median if self.rtts else US_PER_S // 2

    def classify_timing(self, report: FeedbackReport, now: int) -> ReportTiming:
        if report.is_early:
            return ReportTiming.EARLY
        if self.last_report_at is None or not self.rtts:
            return ReportTiming.REGULAR
        return on_report_timing(now - self.last_report_at, self.rtt_median)

    def on_report(
        self,
        report: FeedbackReport,
        now: int,
        goodput: int,
        fec_rate: int = 0,
    ) -> Optional[ControllerDecision]:
        """Process one report; ``None`` means the report was ignored."""
        timing = self.classify_timing(report, now)
        if timing is ReportTiming.REGULAR and self.last_report_at is not None:
            self.regular_gap = now - self.last_report_at
        self.last_report_at = now
        self.last_feedback_at = now

        if self.ignore_next:
            # rate control disabled: drop exactly one regular report
            if timing is ReportTiming.REGULAR:
                self.ignore_next = False
                self.bounce_pending = True
            return None

        start = min(report.interval_start, report.report_ts - 1)
        cues = classify_cues(report, start, report.report_ts, self.owd)
        self.rates.record(now, goodput, self.rate, self.rate + fec_rate)
        disable_for = int(DISABLE_FACTOR * self.regular_interval())

        if self.bounce_pending:
            self.bounce_pending = False
            clean = not (cues.recent_losses or cues.discards) and (
                cues.corr.corr_high <= self.thresholds.alpha_undershoot
            )
            bounced = bounce_back(self.stored_goodput, clean, self.min_rate)
            if bounced is not None:
                decision = ControllerDecision(
                    State.STAY, max(self.rate, bounced), False, self.fec_interval,
                    Action.BOUNCE_BACK,
                )
            else:
                decision = ControllerDecision(
                    State.DOWN, undershoot(self.rate, goodput, self.min_rate), False,
                    self.fec_interval, Action.UNDERSHOOT,
                )
        elif timing is ReportTiming.EARLY:
            decision = ControllerDecision(
                State.DOWN, undershoot(self.rate, goodput, self.min_rate), False,
                self.fec_interval, Action.UNDERSHOOT_DISABLE, now + disable_for,
            )
        else:
            decision = step(
                self.state, self.prev_state, cues, self.rates, self.rate, fec_rate,
                goodput=goodput, fec_interval=self.fec_interval, now=now,
                disable_for=disable_for, thresholds=self.thresholds,
                interval_bounds=self.interval_bounds, floor=self.min_rate,
            )
        self.owd.admit(report)
        self._apply(decision, goodput)
        return decision

    def on_timer(self, now: int) -> Optional[ControllerDecision]:
        """Halve the rate if no report arrived for 2 s."""
        decision = on_feedback_timeout(
            now - self.last_feedback_at, self.rate, self.fec_interval, self.min_rate
        )
        if decision is not None:
            self.last_feedback_at = now
            self._apply(decision, goodput=None)
        return decision

    def _apply(self, decision: ControllerDecision, goodput: Optional[int]) -> None:
        if decision.action in (Action.UNDERSHOOT, Action.UNDERSHOOT_DISABLE) and goodput is not None:
            self.stored_goodput = goodput
        if decision.action is Action.UNDERSHOOT_DISABLE:
            self.ignore_next = True
            self.disabled_until = decision.rate_control_disabled_until
        logger.debug("%s -> %s rate=%d fec=%s/%d %s", self.state.value, decision.new_state.value,
                     decision.target_media_rate, decision.fec_enabled, decision.fec_interval,
                     decision.action.value)
        self.prev_state = self.state
        self.state = decision.new_state
        self.rate = decision.target_media_rate
        self.fec_enabled = decision.fec_enabled
        self.fec_interval = decision.fec_interval
