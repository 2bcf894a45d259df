"""Sequential classification: probability-ratio test and windowed confidence.

The ratio test accumulates per-observation evidence in the log domain until
it escapes an uncertainty band; the confidence window keeps the mean of the
most recent scores, which is the rule the tracker's lifecycle actually uses.
"""

from __future__ import annotations

import enum
import math
from collections import deque
from dataclasses import dataclass, field, replace

SCORE_FLOOR = 1e-9

# Wald-style defaults for symmetric 10% error rates; the band is
# configurable since no canonical values exist for this sensor.
DEFAULT_UPPER = 9.0
DEFAULT_LOWER = 1.0 / 9.0

MISSED = None  # sentinel accepted by window_update for frames with no match


class SprtDecision(enum.Enum):
    CLASS0 = 0
    CLASS1 = 1
    CONTINUE = 2


@dataclass(frozen=True)
class SprtState:
    """Running log evidence ratio with accept/reject thresholds."""

    upper: float = DEFAULT_UPPER
    lower: float = DEFAULT_LOWER
    log_ratio: float = 0.0
    observations: int = 0
    decision: SprtDecision = SprtDecision.CONTINUE
    clamp_events: int = 0

    def __post_init__(self):
        if not (self.upper > self.lower > 0):
            raise ValueError("thresholds must satisfy upper > lower > 0")

    @property
    def ratio(self) -> float:
        return math.exp(self.log_ratio)


def sprt_update(state: SprtState, f1: float, f0: float
                ) -> tuple[SprtState, SprtDecision]:
    """Fold one observation's class-conditional scores into the test.

    Scores are clamped at SCORE_FLOOR (counted in clamp_events) to avoid log
    singularities.  Once a terminal decision is reached the state freezes.
    """
    if state.decision is not SprtDecision.CONTINUE:
        return state, state.decision
    clamps = state.clamp_events + (f1 < SCORE_FLOOR) + (f0 < SCORE_FLOOR)
    f1 = max(f1, SCORE_FLOOR)
    f0 = max(f0, SCORE_FLOOR)
    log_ratio = state.log_ratio + math.log(f1 / f0)
    if log_ratio >= math.log(state.upper):
        decision = SprtDecision.CLASS1
    elif log_ratio <= math.log(state.lower):
        decision = SprtDecision.CLASS0
    else:
        decision = SprtDecision.CONTINUE
    new = replace(state, log_ratio=log_ratio,
                  observations=state.observations + 1,
                  decision=decision, clamp_events=clamps)
    return new, decision


def sprt_from_confidence(state: SprtState, confidence: float
                         ) -> tuple[SprtState, SprtDecision]:
    """Feed a soft-classifier score directly, using 1 - score for class 0."""
    return sprt_update(state, confidence, 1.0 - confidence)


class ConfidenceWindow:
    """FIFO of the most recent confidence scores with a running mean.

    A missed frame pushes a zero so the mean decays; with fewer than
    `size` entries the mean runs over what exists.
    """

    def __init__(self, size: int):
        if size < 1:
            raise ValueError("window size must be >= 1")
        self.size = size
        self._scores: deque[float] = deque(maxlen=size)

    def push(self, confidence: float | None) -> "ConfidenceWindow":
        value = 0.0 if confidence is MISSED else float(confidence)
        if not (0.0 <= value <= 1.0):
            raise ValueError(f"confidence {value} outside [0, 1]")
        self._scores.append(value)
        return self

    @property
    def mean(self) -> float:
        if not self._scores:
            return 0.0
        return sum(self._scores) / len(self._scores)

    def __len__(self) -> int:
        return len(self._scores)

    def copy(self) -> "ConfidenceWindow":
        w = ConfidenceWindow(self.size)
        w._scores.extend(self._scores)
        return w


def window_update(window: ConfidenceWindow, confidence: float | None
                  ) -> ConfidenceWindow:
    """Pure-function counterpart of push: returns an updated copy."""
    return window.copy().push(confidence)
