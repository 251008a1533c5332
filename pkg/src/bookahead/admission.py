"""Per-region admission control for non-reserved requests.

A request arriving at ``tau`` with duration ``D`` is admitted only if one more
active ride keeps ``f_P + f_BA + f_A`` at or below the target for every instant
the ride would be active inside the window.  Book-ahead rides are part of
``f_BA`` from the window start, so admitting a request can never take the
driver a later reservation needs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from . import step_profile as sp
from .step_profile import StepProfile

OK = "ok"
CAPACITY_NOW = "capacity_now"
BOOKAHEAD_CONFLICT = "bookahead_conflict"


class AdmissionError(RuntimeError):
    """Misuse of the admission state machine."""


@dataclass(frozen=True)
class AdmissionDecision:
    admitted: bool
    request_time: float
    duration: float
    reason: str

    def __post_init__(self):
        if self.admitted != (self.reason == OK):
            raise AdmissionError(f"inconsistent decision: admitted={self.admitted}, reason={self.reason}")


@dataclass(frozen=True)
class RegionWindowState:
    target: int
    carryover: StepProfile
    bookahead: StepProfile
    admitted: StepProfile
    # out-of-window tails (window_end, end) of admitted rides, for the next f_P
    spillover: tuple[tuple[float, float], ...] = ()
    _known: StepProfile = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.target < 0:
            raise ValueError("target must be nonnegative")
        w = self.carryover.window
        if self.bookahead.window != w or self.admitted.window != w:
            raise ValueError("profiles must share one window")
        if self._known is None:
            object.__setattr__(self, "_known", sp.sum([self.carryover, self.bookahead]))

    @classmethod
    def open(cls, target: int, carryover: StepProfile, bookahead: StepProfile) -> RegionWindowState:
        return cls(target, carryover, bookahead, StepProfile.zero(carryover.window))

    @property
    def window(self) -> tuple[float, float]:
        return self.carryover.window

    @property
    def known(self) -> StepProfile:
        """``f_P + f_BA``."""
        return self._known

    def total(self) -> StepProfile:
        return sp.sum([self._known, self.admitted])


def decide(state: RegionWindowState, request_time: float, duration: float) -> AdmissionDecision:
    ws, we = state.window
    if not ws < request_time <= we:
        raise ValueError(f"request at {request_time} outside window ({ws}, {we}]")
    if not duration > 0:
        raise ValueError(f"ride duration must be positive, got {duration}")
    total = state.total()
    c = state.target
    if 1 + total.value(request_time) > c:
        return AdmissionDecision(False, request_time, duration, CAPACITY_NOW)
    end = request_time + duration
    # a ride outliving the window is active at the window end itself
    if end > we:
        peak = sp.max_on_span(total, request_time, we, closed=True)
    else:
        peak = sp.max_on_span(total, request_time, end)
    if 1 + peak > c:
        return AdmissionDecision(False, request_time, duration, BOOKAHEAD_CONFLICT)
    return AdmissionDecision(True, request_time, duration, OK)


def commit(state: RegionWindowState, decision: AdmissionDecision) -> RegionWindowState:
    """Record an admitted ride in ``f_A``; any part past the window goes to ``spillover``."""
    if not decision.admitted:
        raise AdmissionError("cannot commit a blocked request")
    start = decision.request_time
    end = start + decision.duration
    admitted = sp.add_ride(state.admitted, start, end)
    spill = state.spillover
    we = state.window[1]
    if end > we:
        spill = spill + ((we, end),)
    return replace(state, admitted=admitted, spillover=spill)


def safety_violations(state: RegionWindowState) -> list[float]:
    """Instants where admitted rides push ``f_P + f_BA + f_A`` above the target.

    Where the known rides alone already exceed the target no admitted ride can be
    active, so those instants only count when ``f_A > 0``.
    """
    total = state.total()
    times = sorted({state.window[0], *total.times})
    return [t for t in times if total.value(t) > state.target and state.admitted.value(t) > 0]
