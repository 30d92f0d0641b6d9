"""Uncongested one-way-delay history and the low/high watermark ratios."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Deque, Iterable

from .types import FeedbackReport

LOW_PERCENTILE = 0.40
HIGH_PERCENTILE = 0.80
DEFAULT_CAPACITY = 20


class EmptyHistory(ValueError):
    pass


class ZeroPercentile(ValueError):
    pass


@dataclass(frozen=True)
class OwdCorrelation:
    corr_low: float
    corr_high: float
    p40: int = 0
    p80: int = 0


NEUTRAL = OwdCorrelation(1.0, 1.0)


class OwdHistory:
    """Bounded FIFO of OWD samples taken from loss- and discard-free reports."""

    def __init__(self, capacity: int = DEFAULT_CAPACITY, samples: Iterable[int] = ()):
        self.capacity = capacity
        self.samples: Deque[int] = deque(samples, maxlen=capacity)

    def __len__(self) -> int:
        return len(self.samples)

    def admit(self, report: FeedbackReport) -> bool:
        if not report.clean:
            return False
        self.samples.append(report.owd_sample)
        return True

    def percentile(self, p: float) -> int:
        return percentile(self.samples, p)

    def correlate(self, current_owd: int) -> OwdCorrelation:
        """Like :func:`correlate`, but neutral (1.0, 1.0) while still empty."""
        if not self.samples:
            return NEUTRAL
        return correlate(self, current_owd)


def admit_sample(history: OwdHistory, report: FeedbackReport) -> OwdHistory:
    history.admit(report)
    return history


def percentile(samples: Iterable[int], p: float) -> int:
    """Nearest-rank percentile: the ``ceil(p * n)``-th smallest sample."""
    ordered = sorted(samples)
    if not ordered:
        raise EmptyHistory("percentile of empty history")
    rank = max(1, math.ceil(round(p * len(ordered), 9)))
    return ordered[min(rank, len(ordered)) - 1]


def correlate(history: OwdHistory, current_owd: int) -> OwdCorrelation:
    """Ratios of the current OWD to the 40th and 80th percentile of history."""
    p40 = history.percentile(LOW_PERCENTILE)
    p80 = history.percentile(HIGH_PERCENTILE)
    if p40 <= 0 or p80 <= 0:
        raise ZeroPercentile("history percentile is zero")
    return OwdCorrelation(current_owd / p40, current_owd / p80, p40, p80)
