from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bookahead import admission as adm
from bookahead import step_profile as sp
from bookahead.admission import AdmissionError, RegionWindowState
from bookahead.step_profile import StepProfile
from oracles import admit_bruteforce

W = (0.0, 20.0)
ZERO = StepProfile.zero(W)


def state(c, carry=(), booked=()):
    return RegionWindowState.open(c, sp.from_rides(carry, W), sp.from_rides(booked, W))


def test_no_supply_blocks_now():
    d = adm.decide(state(0), 5.0, 3.0)
    assert not d.admitted and d.reason == adm.CAPACITY_NOW


def test_sole_ride_admitted():
    d = adm.decide(state(1), 5.0, 3.0)
    assert d.admitted and d.reason == adm.OK


def test_bookahead_ride_is_protected():
    s = state(1, booked=[(10, 15)])
    long = adm.decide(s, 5.0, 8.0)
    assert not long.admitted and long.reason == adm.BOOKAHEAD_CONFLICT
    short = adm.decide(s, 5.0, 4.0)
    assert short.admitted
    assert long.admitted == admit_bruteforce([(10, 15)], 1, 5.0, 8.0, W)
    assert short.admitted == admit_bruteforce([(10, 15)], 1, 5.0, 4.0, W)


def test_ride_ending_when_booking_starts_is_fine():
    assert adm.decide(state(1, booked=[(10, 15)]), 5.0, 5.0).admitted


def test_commit_examples():
    s = state(1)
    s = adm.commit(s, adm.decide(s, 5.0, 3.0))
    assert [s.admitted.value(t) for t in (4.9, 5, 7.9, 8)] == [0, 1, 1, 0]

    s = state(1)
    s = adm.commit(s, adm.decide(s, 15.0, 10.0))
    assert s.admitted.value(15) == 1 and s.admitted.value(20) == 1
    assert s.spillover == ((20.0, 25.0),)

    s = state(2)
    s = adm.commit(s, adm.decide(s, 2.0, 6.0))
    s = adm.commit(s, adm.decide(s, 4.0, 6.0))
    assert s.admitted.value(5) == 2 and s.admitted.value(9) == 1


def test_commit_blocked_is_an_error():
    s = state(0)
    with pytest.raises(AdmissionError):
        adm.commit(s, adm.decide(s, 1.0, 1.0))


def test_decide_validation():
    with pytest.raises(ValueError):
        adm.decide(state(3), 0.0, 1.0)
    with pytest.raises(ValueError):
        adm.decide(state(3), 21.0, 1.0)
    with pytest.raises(ValueError):
        adm.decide(state(3), 3.0, 0.0)
    with pytest.raises(AdmissionError):
        adm.AdmissionDecision(True, 1.0, 1.0, adm.CAPACITY_NOW)


def test_ride_spilling_past_window_counts_at_window_end():
    # a booking active exactly at the window end leaves no room for a spilling ride
    s = state(1, booked=[(19.5, 30)])
    assert not adm.decide(s, 18.0, 5.0).admitted
    assert adm.decide(s, 18.0, 1.5).admitted


# -- random scenarios -------------------------------------------------------------

def random_scenario(rng):
    """Times on a 0.05 lattice so the 0.01 grid oracle sees every breakpoint."""
    lat = lambda lo, hi: round(float(rng.uniform(lo, hi)) / 0.05) * 0.05  # noqa: E731
    n_carry = int(rng.integers(0, 4))
    n_book = int(rng.integers(0, 4))
    carry = [(lat(-10, 0), lat(0.05, 25)) for _ in range(n_carry)]
    carry = [(s, e) for s, e in carry if e > 0]
    book = []
    for _ in range(n_book):
        s = lat(0.05, 20)
        book.append((s, s + lat(0.05, 12)))
    c = int(rng.integers(0, 7))
    requests = []
    for _ in range(int(rng.integers(1, 21 - len(carry) - len(book)))):
        tau = max(0.05, lat(0.05, 20))
        requests.append((tau, max(0.05, lat(0.05, 15))))
    requests.sort(key=lambda r: r[0])
    return c, carry, book, requests


def replay(c, carry, book, requests):
    s = state(c, carry, book)
    decisions = []
    for tau, dur in requests:
        d = adm.decide(s, tau, dur)
        decisions.append(d)
        if d.admitted:
            s = adm.commit(s, d)
    return s, decisions


def test_matches_bruteforce_on_random_scenarios():
    rng = np.random.default_rng(2024)
    for _ in range(200):
        c, carry, book, requests = random_scenario(rng)
        s = state(c, carry, book)
        admitted = []
        for tau, dur in requests:
            d = adm.decide(s, tau, dur)
            assert d.admitted == admit_bruteforce(carry + book + admitted, c, tau, dur, W)
            if d.admitted:
                s = adm.commit(s, d)
                admitted.append((tau, tau + dur))


def test_safety_and_determinism_on_random_scenarios():
    rng = np.random.default_rng(99)
    for _ in range(100):
        c, carry, book, requests = random_scenario(rng)
        s1, d1 = replay(c, carry, book, requests)
        s2, d2 = replay(c, carry, book, requests)
        assert d1 == d2 and s1 == s2
        assert adm.safety_violations(s1) == []


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4))
def test_more_supply_never_blocks_an_admitted_request(seed, extra):
    c, carry, book, requests = random_scenario(np.random.default_rng(seed))
    _, low = replay(c, carry, book, requests)
    _, high = replay(c + extra, carry, book, requests)
    # compare only up to the first divergence: afterwards the states differ
    for a, b in zip(low, high):
        if a.admitted:
            assert b.admitted
        if a.admitted != b.admitted:
            break


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_known_rides_over_target_only_flag_when_admitted(seed):
    c, carry, book, requests = random_scenario(np.random.default_rng(seed))
    s, _ = replay(c, carry, book, requests)
    total = s.total()
    for t in adm.safety_violations(s):
        assert total.value(t) > c and s.admitted.value(t) > 0
