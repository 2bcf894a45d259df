import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from palletrack.seqdecision import (
    MISSED,
    ConfidenceWindow,
    SprtDecision,
    SprtState,
    sprt_from_confidence,
    sprt_update,
    window_update,
)


def batch_log_ratio(f1s, f0s, floor=1e-9):
    """Oracle: the product form computed from scratch on the full history."""
    ratio = 1.0
    for f1, f0 in zip(f1s, f0s):
        ratio *= max(f1, floor) / max(f0, floor)
    return math.log(ratio)


class TestSprt:
    def test_symmetric_evidence_continues_forever(self):
        state = SprtState(upper=2.0, lower=0.5)
        for _ in range(100):
            state, decision = sprt_update(state, 0.5, 0.5)
            assert decision is SprtDecision.CONTINUE
        assert state.log_ratio == pytest.approx(0.0)

    def test_class1_at_step_three(self):
        # per-step ratio 1.3: 1.3^3 = 2.197 >= 2
        state = SprtState(upper=2.0, lower=0.5)
        decisions = []
        for _ in range(3):
            state, decision = sprt_update(state, 1.3, 1.0)
            decisions.append(decision)
        assert decisions == [SprtDecision.CONTINUE, SprtDecision.CONTINUE,
                             SprtDecision.CLASS1]
        assert state.ratio == pytest.approx(1.3 ** 3)

    def test_class0_at_step_two(self):
        # per-step ratio 0.7: 0.49 <= 0.5
        state = SprtState(upper=2.0, lower=0.5)
        state, d1 = sprt_update(state, 0.7, 1.0)
        assert d1 is SprtDecision.CONTINUE
        state, d2 = sprt_update(state, 0.7, 1.0)
        assert d2 is SprtDecision.CLASS0
        assert state.ratio == pytest.approx(0.49)

    def test_terminal_state_frozen(self):
        state = SprtState(upper=1.5, lower=0.5)
        state, decision = sprt_update(state, 0.9, 0.1)
        assert decision is SprtDecision.CLASS1
        frozen, again = sprt_update(state, 0.0001, 0.9999)
        assert again is SprtDecision.CLASS1
        assert frozen == state

    def test_clamping_flagged(self):
        state = SprtState(upper=1e300, lower=1e-300)
        state, _ = sprt_update(state, 0.0, 0.5)
        assert state.clamp_events == 1
        state, _ = sprt_update(state, -1.0, 0.0)
        assert state.clamp_events == 3
        assert math.isfinite(state.log_ratio)

    def test_scale_invariance(self):
        # only the ratio enters; a common positive factor changes nothing
        a = SprtState(upper=3.0, lower=0.3)
        b = SprtState(upper=3.0, lower=0.3)
        rng = np.random.default_rng(1)
        for _ in range(10):
            f1, f0 = rng.uniform(0.1, 1.0, 2)
            scale = rng.uniform(0.5, 2.0)
            a, da = sprt_update(a, f1, f0)
            b, db = sprt_update(b, scale * f1, scale * f0)
            assert da is db
            assert a.log_ratio == pytest.approx(b.log_ratio)

    @given(st.lists(st.tuples(st.floats(0.0, 1.0), st.floats(0.0, 1.0)),
                    min_size=1, max_size=20))
    @settings(max_examples=200)
    def test_incremental_equals_batch_product(self, pairs):
        state = SprtState(upper=1e300, lower=1e-300)  # wide band: never stops
        for f1, f0 in pairs:
            state, _ = sprt_update(state, f1, f0)
        expected = batch_log_ratio(*zip(*pairs))
        assert abs(state.log_ratio - expected) < 1e-9

    def test_soft_score_wrapper(self):
        state = SprtState(upper=5.0, lower=0.2)
        state, _ = sprt_from_confidence(state, 0.8)
        assert state.log_ratio == pytest.approx(math.log(0.8 / 0.2))

    def test_invalid_thresholds_rejected(self):
        with pytest.raises(ValueError):
            SprtState(upper=0.5, lower=0.9)
        with pytest.raises(ValueError):
            SprtState(upper=2.0, lower=0.0)


class TestConfidenceWindow:
    def test_miss_decays_full_window(self):
        w = ConfidenceWindow(6)
        for _ in range(6):
            w.push(0.6)
        w.push(MISSED)
        assert w.mean == pytest.approx((0.6 * 5 + 0.0) / 6)

    def test_constant_scores(self):
        w = ConfidenceWindow(6)
        for _ in range(10):
            w.push(1.0)
        assert w.mean == 1.0

    def test_partial_window_mean(self):
        w = ConfidenceWindow(6)
        for v in (0.3, 0.6, 0.9):
            w.push(v)
        assert w.mean == pytest.approx(0.6)

    def test_eviction_is_fifo(self):
        w = ConfidenceWindow(3)
        for v in (0.1, 0.2, 0.3, 0.4):
            w.push(v)
        assert w.mean == pytest.approx((0.2 + 0.3 + 0.4) / 3)
        assert len(w) == 3

    def test_empty_window_mean_zero(self):
        assert ConfidenceWindow(4).mean == 0.0

    @given(st.lists(st.one_of(st.none(), st.floats(0.0, 1.0)), max_size=30),
           st.integers(1, 8))
    @settings(max_examples=200)
    def test_mean_always_in_unit_interval(self, pushes, size):
        w = ConfidenceWindow(size)
        for v in pushes:
            w.push(v)
        assert 0.0 <= w.mean <= 1.0
        assert len(w) <= size

    def test_pure_update_leaves_original(self):
        w = ConfidenceWindow(4).push(0.5)
        w2 = window_update(w, 0.9)
        assert w.mean == pytest.approx(0.5)
        assert w2.mean == pytest.approx(0.7)

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            ConfidenceWindow(3).push(1.5)
        with pytest.raises(ValueError):
            ConfidenceWindow(0)
