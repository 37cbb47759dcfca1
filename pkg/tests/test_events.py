import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from eventadmm.events import (CommLog, DropBoundExceeded, DropModel, ThresholdSchedule, TriggerPolicy,
                              make_rng, maybe_trigger)


def test_streams_are_deterministic_and_distinct():
    a = make_rng(7, 1).random(5)
    assert np.array_equal(a, make_rng(7, 1).random(5))
    assert not np.array_equal(a, make_rng(7, 2).random(5))
    assert not np.array_equal(a, make_rng(8, 1).random(5))


@pytest.mark.parametrize("k, expected", [(0, 0.5), (1, 0.0625), (3, 0.5 / 64)])
def test_power_decay_schedule(k, expected):
    assert np.isclose(ThresholdSchedule.power_decay(0.5, 3).at(k), expected)


@pytest.mark.parametrize("kw", [dict(kind="linear"), dict(delta0=-1.0), dict(kind="power_decay", delta0=1.0)])
def test_schedule_validation(kw):
    with pytest.raises(ValueError):
        ThresholdSchedule(**kw)


@given(st.floats(0, 10), st.floats(0, 10))
def test_vanilla_fires_iff_gap_exceeds_threshold(gap, delta):
    pol = TriggerPolicy.vanilla(delta)
    assert pol.fires(gap, 0, np.random.default_rng(0)) == (gap > delta)


def test_randomized_always_fires_above_threshold_and_sometimes_below():
    pol = TriggerPolicy.randomized(1.0, 0.3)
    rng = make_rng(0, 1)
    assert all(pol.fires(1.5, k, rng) for k in range(100))
    rate = np.mean([pol.fires(0.5, k, rng) for k in range(20000)])
    assert abs(rate - 0.3) < 0.02


def test_random_only_ignores_gap():
    pol = TriggerPolicy.random_only(0.25)
    rng = make_rng(0, 1)
    assert pol.bound == np.inf and pol.threshold(3) == np.inf
    rate = np.mean([pol.fires(1e6, k, rng) for k in range(20000)])
    assert abs(rate - 0.25) < 0.02


def test_maybe_trigger_advances_register_only_on_send():
    last = np.zeros(2)
    pol = TriggerPolicy.vanilla(1.0)
    rng = np.random.default_rng(0)
    assert maybe_trigger(np.array([0.5, 0.5]), last, pol, 0, rng) is None
    assert np.all(last == 0.0)
    delta = maybe_trigger(np.array([1.0, 1.0]), last, pol, 0, rng)
    assert np.allclose(delta, 1.0) and np.allclose(last, 1.0)


def test_drop_model_channels_and_extremes():
    rng = np.random.default_rng(0)
    never, always = DropModel(0.0), DropModel(1.0, ("up",))
    assert not any(never.dropped("up", rng) for _ in range(100))
    assert all(always.dropped("up", rng) for _ in range(100))
    assert not always.dropped("down", rng)
    with pytest.raises(ValueError):
        DropModel(1.5)


def test_record_drop_enforces_declared_bound():
    log = CommLog(full_per_round=4)
    assert log.record_drop("up", np.array([3.0, 4.0]), chi_bar=5.0) == 5.0
    with pytest.raises(DropBoundExceeded):
        log.record_drop("up", np.array([3.0, 4.1]), chi_bar=5.0)
    assert log.chi_max["up"] > 5.0


def test_load_counts_messages_against_full_rounds():
    log = CommLog(full_per_round=10, uploads_sent=6, downloads_sent=4, reset_messages=10, rounds=2)
    assert log.load == 0.5
    assert log.load_with_resets == 1.0
    assert CommLog(full_per_round=3).load == 0.0
