"""Piecewise-constant integer counting profiles over one time window.

A profile counts rides active at time ``t`` where a ride is active on the
half-open interval ``[start, end)``.  Values are right-continuous: the value at
a breakpoint is the count *after* every event at that instant has been netted.
Profiles are immutable; every mutating operation returns a new profile.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


class ProfileError(ValueError):
    """Invalid ride, interval or window for a profile operation."""


@dataclass(frozen=True)
class StepProfile:
    window_start: float
    window_end: float
    initial: int = 0
    times: tuple[float, ...] = ()
    counts: tuple[int, ...] = ()

    def __post_init__(self):
        if not self.window_start < self.window_end:
            raise ProfileError(f"empty window ({self.window_start}, {self.window_end}]")
        if len(self.times) != len(self.counts):
            raise ProfileError("times and counts differ in length")
        if self.initial < 0 or any(c < 0 for c in self.counts):
            raise ProfileError("profile counts must be nonnegative")
        prev = self.window_start
        for t in self.times:
            if not prev < t <= self.window_end:
                raise ProfileError(f"breakpoint {t} out of order or outside the window")
            prev = t

    @classmethod
    def zero(cls, window: tuple[float, float]) -> StepProfile:
        return cls(float(window[0]), float(window[1]))

    @property
    def window(self) -> tuple[float, float]:
        return (self.window_start, self.window_end)

    @property
    def breakpoints(self) -> list[tuple[float, int]]:
        return list(zip(self.times, self.counts))

    def value(self, t: float) -> int:
        """Count at ``t`` (clamped to the window)."""
        i = bisect.bisect_right(self.times, t)
        return self.initial if i == 0 else self.counts[i - 1]

    def values(self, ts) -> np.ndarray:
        ts = np.asarray(ts, dtype=float)
        levels = np.concatenate(([self.initial], np.asarray(self.counts, dtype=np.int64)))
        return levels[np.searchsorted(np.asarray(self.times, dtype=float), ts, side="right")]

    def segments(self) -> list[tuple[float, float, int]]:
        """Constant pieces as ``(left, right, value)``; value holds on ``[left, right)``."""
        edges = (self.window_start,) + self.times + (self.window_end,)
        levels = (self.initial,) + self.counts
        out = []
        for i, level in enumerate(levels):
            if edges[i + 1] > edges[i]:
                out.append((edges[i], edges[i + 1], level))
        # a breakpoint at window_end still defines the value at window_end
        if self.times and self.times[-1] == self.window_end:
            out.append((self.window_end, self.window_end, self.counts[-1]))
        return out

    def is_zero(self) -> bool:
        return self.initial == 0 and not self.times


def _build(window: tuple[float, float], initial: int, deltas: dict[float, int]) -> StepProfile:
    times, counts = [], []
    level = initial
    for t in sorted(deltas):
        d = deltas[t]
        if d == 0:
            continue
        level += d
        times.append(float(t))
        counts.append(level)
    return StepProfile(float(window[0]), float(window[1]), initial, tuple(times), tuple(counts))


def _check_ride(start: float, end: float) -> None:
    if not end > start:
        raise ProfileError(f"ride ends at {end} which is not after its start {start}")


def from_rides(rides: Iterable[tuple[float, float]], window: tuple[float, float]) -> StepProfile:
    """Profile counting ``start <= t < end`` over the window for every ride."""
    ws, we = float(window[0]), float(window[1])
    if not ws < we:
        raise ProfileError(f"empty window ({ws}, {we}]")
    initial = 0
    deltas: dict[float, int] = {}
    for start, end in rides:
        _check_ride(start, end)
        if end <= ws or start > we:
            continue
        if start <= ws:
            initial += 1
        else:
            deltas[start] = deltas.get(start, 0) + 1
        if end <= we:
            deltas[end] = deltas.get(end, 0) - 1
    return _build((ws, we), initial, deltas)


def _deltas(profile: StepProfile) -> dict[float, int]:
    out = {}
    prev = profile.initial
    for t, c in zip(profile.times, profile.counts):
        out[t] = c - prev
        prev = c
    return out


def add_ride(profile: StepProfile, start: float, end: float) -> StepProfile:
    """Return a copy of ``profile`` with one more ride active on ``[start, end)``."""
    _check_ride(start, end)
    ws, we = profile.window
    if end <= ws or start > we:
        return profile
    deltas = _deltas(profile)
    initial = profile.initial
    if start <= ws:
        initial += 1
    else:
        deltas[start] = deltas.get(start, 0) + 1
    if end <= we:
        deltas[end] = deltas.get(end, 0) - 1
    return _build(profile.window, initial, deltas)


def sum(profiles: Sequence[StepProfile]) -> StepProfile:  # noqa: A001
    """Pointwise sum of profiles sharing one window."""
    if not profiles:
        raise ProfileError("cannot sum an empty list of profiles")
    window = profiles[0].window
    for p in profiles[1:]:
        if p.window != window:
            raise ProfileError(f"window mismatch: {p.window} vs {window}")
    initial = 0
    deltas: dict[float, int] = {}
    for p in profiles:
        initial += p.initial
        for t, d in _deltas(p).items():
            deltas[t] = deltas.get(t, 0) + d
    return _build(window, initial, deltas)


def max_over(profile: StepProfile, start: float, end: float) -> int:
    """Exact maximum of the profile on ``(start, end]``."""
    if not start < end:
        raise ProfileError(f"empty interval ({start}, {end}]")
    ws, we = profile.window
    if start < ws or end > we:
        raise ProfileError(f"interval ({start}, {end}] leaves the window ({ws}, {we}]")
    best = profile.value(start)
    lo = bisect.bisect_right(profile.times, start)
    hi = bisect.bisect_right(profile.times, end)
    if hi > lo:
        best = max(best, max(profile.counts[lo:hi]))
    return best


def max_on_span(profile: StepProfile, start: float, end: float, closed: bool = False) -> int:
    """Maximum over ``[start, end)``, or ``[start, end]`` when ``closed``."""
    best = profile.value(start)
    lo = bisect.bisect_right(profile.times, start)
    hi = bisect.bisect_right(profile.times, end) if closed else bisect.bisect_left(profile.times, end)
    if hi > lo:
        best = max(best, max(profile.counts[lo:hi]))
    return best


def suffix_max(profile: StepProfile) -> StepProfile:
    """Profile whose value at ``t`` is the max of ``profile`` over ``(t, window_end]``.

    At ``window_end`` itself (empty interval) the value of ``profile`` there is used,
    which is the left limit of the suffix maximum.
    """
    levels = (profile.initial,) + profile.counts
    running = levels[-1]
    suffix = [0] * len(levels)
    for i in range(len(levels) - 1, -1, -1):
        running = max(running, levels[i])
        suffix[i] = running
    deltas: dict[float, int] = {}
    for i, t in enumerate(profile.times):
        deltas[t] = suffix[i + 1] - suffix[i]
    return _build(profile.window, suffix[0], deltas)
