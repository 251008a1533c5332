"""Transient M_t/GI/inf analysis and per-window driver targets.

The busy-server count of an infinite-server queue that starts empty at the
window start is Poisson with mean

    rho(t) = int_{ws}^{t} lam(x) (1 - G(t - x)) dx,

which for the supported demand and service families has a closed form in terms
of the integrated CDF ``IG(x) = int_0^x G(u) du``.  The blocking bound at ``t``
is ``P(N(t) >= c - max_{(t, we]} (f_P + f_BA))`` and the target is the smallest
``c`` whose time average over the window is at most ``delta``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import gammainc

from . import step_profile as sp
from .step_profile import StepProfile

#: Mean above which the Poisson tail switches to the incomplete gamma identity.
GAMMA_SWITCH_MEAN = 50.0
#: Widest quadrature panel in minutes.
DEFAULT_RESOLUTION = 0.1

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(5)


class SpecError(ValueError):
    """Invalid queue, demand or target specification."""


@dataclass(frozen=True)
class ServiceDistribution:
    """Ride duration law: empirical sample, exponential or deterministic."""

    kind: str
    rate: float = 0.0
    duration: float = 0.0
    sample: tuple[float, ...] = ()
    _sorted: np.ndarray = field(default=None, repr=False, compare=False)
    _prefix: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.kind == "empirical":
            if not self.sample:
                raise SpecError("empirical service distribution needs at least one duration")
            arr = np.sort(np.asarray(self.sample, dtype=float))
            if arr[0] <= 0:
                raise SpecError("service durations must be strictly positive")
            object.__setattr__(self, "sample", tuple(arr.tolist()))
            object.__setattr__(self, "_sorted", arr)
            object.__setattr__(self, "_prefix", np.concatenate(([0.0], np.cumsum(arr))))
        elif self.kind == "exponential":
            if not self.rate > 0:
                raise SpecError("exponential service needs a positive rate")
        elif self.kind == "deterministic":
            if not self.duration > 0:
                raise SpecError("deterministic service needs a positive duration")
        else:
            raise SpecError(f"unknown service kind {self.kind!r}")

    @classmethod
    def empirical(cls, durations) -> ServiceDistribution:
        return cls("empirical", sample=tuple(float(d) for d in durations))

    @classmethod
    def exponential(cls, rate: float) -> ServiceDistribution:
        return cls("exponential", rate=float(rate))

    @classmethod
    def deterministic(cls, duration: float) -> ServiceDistribution:
        return cls("deterministic", duration=float(duration))

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "empirical":
            return np.searchsorted(self._sorted, x, side="right") / self._sorted.size
        if self.kind == "exponential":
            return np.where(x > 0, -np.expm1(-self.rate * np.maximum(x, 0.0)), 0.0)
        return (x >= self.duration).astype(float)

    def integrated_cdf(self, x):
        """``int_0^x G(u) du`` for ``x >= 0``."""
        x = np.maximum(np.asarray(x, dtype=float), 0.0)
        if self.kind == "empirical":
            n = self._sorted.size
            k = np.searchsorted(self._sorted, x, side="right")
            return (k * x - self._prefix[k]) / n
        if self.kind == "exponential":
            return x + np.expm1(-self.rate * x) / self.rate
        return np.maximum(x - self.duration, 0.0)

    def kinks(self, horizon: float) -> np.ndarray:
        """Points in ``(0, horizon)`` where ``G`` jumps."""
        if self.kind == "empirical":
            pts = np.unique(self._sorted)
        elif self.kind == "deterministic":
            pts = np.array([self.duration])
        else:
            return np.empty(0)
        return pts[(pts > 0) & (pts < horizon)]

    def mean(self) -> float:
        if self.kind == "empirical":
            return float(self._sorted.mean())
        if self.kind == "exponential":
            return 1.0 / self.rate
        return self.duration

    def to_dict(self) -> dict:
        if self.kind == "empirical":
            return {"kind": "empirical", "durations": list(self.sample)}
        if self.kind == "exponential":
            return {"kind": "exponential", "rate": self.rate}
        return {"kind": "deterministic", "duration": self.duration}

    @classmethod
    def from_dict(cls, d: dict) -> ServiceDistribution:
        kind = d["kind"]
        if kind == "empirical":
            return cls.empirical(d["durations"])
        if kind == "exponential":
            return cls.exponential(d["rate"])
        if kind == "deterministic":
            return cls.deterministic(d["duration"])
        raise SpecError(f"unknown service kind {kind!r}")


@dataclass(frozen=True)
class DemandRate:
    """Request rate per minute: constant, or piecewise constant from ``(time, rate)`` steps.

    A step ``(t_i, r_i)`` holds on ``[t_i, t_{i+1})``; the rate is zero before the first step.
    """

    steps: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if not self.steps:
            raise SpecError("demand rate needs at least one step")
        prev = None
        for t, r in self.steps:
            if r < 0:
                raise SpecError(f"negative demand rate {r}")
            if prev is not None and not t > prev:
                raise SpecError("demand steps must have increasing times")
            prev = t

    @classmethod
    def constant(cls, rate: float) -> DemandRate:
        return cls(((-math.inf, float(rate)),))

    @classmethod
    def piecewise(cls, steps) -> DemandRate:
        return cls(tuple((float(t), float(r)) for t, r in steps))

    @property
    def is_constant(self) -> bool:
        return len(self.steps) == 1 and self.steps[0][0] == -math.inf

    @property
    def max_rate(self) -> float:
        return max(r for _, r in self.steps)

    def is_zero(self) -> bool:
        return all(r == 0 for _, r in self.steps)

    def scaled(self, factor: float) -> DemandRate:
        return DemandRate(tuple((t, r * factor) for t, r in self.steps))

    def rate_at(self, t: float) -> float:
        out = 0.0
        for s, r in self.steps:
            if s <= t:
                out = r
        return out

    def pieces(self, lo: float, hi: float) -> list[tuple[float, float, float]]:
        """Constant pieces ``(a, b, rate)`` covering ``[lo, hi]``."""
        out = []
        for i, (s, r) in enumerate(self.steps):
            e = self.steps[i + 1][0] if i + 1 < len(self.steps) else math.inf
            a, b = max(s, lo), min(e, hi)
            if b > a and r > 0:
                out.append((a, b, r))
        return out


@dataclass(frozen=True)
class TargetSpec:
    delta: float
    window: tuple[float, float]
    demand: DemandRate
    service: Optional[ServiceDistribution]
    carryover: StepProfile
    bookahead: StepProfile

    def __post_init__(self):
        if not 0 < self.delta < 1:
            raise SpecError(f"delta must lie in (0, 1), got {self.delta}")
        if self.carryover.window != tuple(self.window) or self.bookahead.window != tuple(self.window):
            raise SpecError("profiles do not share the target window")
        if self.service is None and not self.demand.is_zero():
            raise SpecError("a service distribution is required when demand is nonzero")

    @classmethod
    def simple(cls, delta, window, rate=0.0, service=None, carryover=None, bookahead=None) -> TargetSpec:
        window = (float(window[0]), float(window[1]))
        return cls(
            delta=delta,
            window=window,
            demand=rate if isinstance(rate, DemandRate) else DemandRate.constant(rate),
            service=service,
            carryover=carryover or StepProfile.zero(window),
            bookahead=bookahead or StepProfile.zero(window),
        )


def rho(t, window_start: float, demand: DemandRate, service: Optional[ServiceDistribution]):
    """Mean busy servers at ``t`` of an M_t/GI/inf queue empty at ``window_start``.

    Accepts a scalar or an array of times.
    """
    scalar = np.ndim(t) == 0
    ts = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(ts < window_start):
        raise SpecError(f"rho evaluated before the window start {window_start}")
    out = np.zeros_like(ts)
    if not demand.is_zero():
        if service is None:
            raise SpecError("service distribution missing")
        if demand.is_constant:
            tau = ts - window_start
            out = demand.steps[0][1] * (tau - service.integrated_cdf(tau))
        else:
            # lam_p * int_a^b (1 - G(t - x)) dx over each constant piece clipped at t
            for a, b, r in demand.pieces(window_start, float(ts.max())):
                hi = np.minimum(b, ts)
                active = hi > a
                u_hi = np.where(active, ts - a, 0.0)
                u_lo = np.where(active, ts - hi, 0.0)
                part = (u_hi - u_lo) - (service.integrated_cdf(u_hi) - service.integrated_cdf(u_lo))
                out = out + r * np.where(active, part, 0.0)
    out = np.maximum(out, 0.0)
    return float(out[0]) if scalar else out


def poisson_tail(mean: float, threshold: int) -> float:
    """``P(X >= threshold)`` for ``X ~ Poisson(mean)``."""
    if mean < 0 or math.isnan(mean):
        raise SpecError(f"Poisson mean must be nonnegative, got {mean}")
    if threshold <= 0:
        return 1.0
    if mean == 0:
        return 0.0
    if mean > GAMMA_SWITCH_MEAN:
        return float(gammainc(threshold, mean))
    log_pmf = lambda k: k * math.log(mean) - mean - math.lgamma(k + 1)  # noqa: E731
    if threshold - 1 < mean:
        # head is the smaller side: 1 - sum_{k < threshold} pmf(k)
        term = math.exp(-mean)
        head = 0.0
        for k in range(threshold):
            head += term
            term *= mean / (k + 1)
        return max(0.0, 1.0 - head)
    term = math.exp(log_pmf(threshold))
    total = 0.0
    k = threshold
    while True:
        total += term
        k += 1
        term *= mean / k
        if term <= total * 1e-17:
            break
    return min(1.0, total)


def poisson_tail_array(means, thresholds) -> np.ndarray:
    """Vectorised ``poisson_tail`` via the regularised lower incomplete gamma."""
    means = np.asarray(means, dtype=float)
    thresholds = np.asarray(thresholds)
    if np.any(means < 0):
        raise SpecError("Poisson mean must be nonnegative")
    k = np.maximum(thresholds, 1).astype(float)
    out = gammainc(k, means)
    return np.where(thresholds <= 0, 1.0, out)


def _check_time(t: float, window: tuple[float, float]) -> None:
    if not window[0] <= t <= window[1]:
        raise SpecError(f"time {t} outside window {window}")


def bound_at(t: float, c: int, spec: TargetSpec) -> float:
    """Upper bound on the blocking probability of a request arriving at ``t``."""
    _check_time(t, spec.window)
    if c < 0:
        raise SpecError("target must be nonnegative")
    known = sp.sum([spec.carryover, spec.bookahead])
    ws, we = spec.window
    peak = sp.max_over(known, t, we) if t < we else known.value(we)
    threshold = c - peak
    if threshold <= 0:
        return 1.0
    return poisson_tail(rho(t, ws, spec.demand, spec.service), threshold)


@dataclass(frozen=True)
class _Quadrature:
    nodes: np.ndarray
    weights: np.ndarray  # sums to 1 (already divided by w)
    peak: np.ndarray  # suffix max of f_P + f_BA at each node
    rho: np.ndarray


def _panel_edges(spec: TargetSpec, resolution: float) -> np.ndarray:
    ws, we = spec.window
    known = sp.sum([spec.carryover, spec.bookahead])
    cuts = [ws, we, *known.times]
    if spec.service is not None:
        cuts.extend(ws + spec.service.kinks(we - ws))
    if not spec.demand.is_constant:
        cuts.extend(t for t, _ in spec.demand.steps if ws < t < we)
    cuts = np.unique(np.asarray(cuts, dtype=float))
    edges = [cuts[:1]]
    for a, b in zip(cuts[:-1], cuts[1:]):
        n = max(1, int(math.ceil((b - a) / resolution - 1e-9)))
        edges.append(np.linspace(a, b, n + 1)[1:])
    return np.concatenate(edges)


def build_quadrature(spec: TargetSpec, resolution: float = DEFAULT_RESOLUTION) -> _Quadrature:
    """Gauss-Legendre panels no wider than ``resolution``.

    Panel edges include every breakpoint of ``f_P + f_BA`` (where the integrand
    jumps) and every kink of ``rho`` so each panel integrates a smooth function.
    """
    if not resolution > 0:
        raise SpecError("quadrature resolution must be positive")
    ws, we = spec.window
    edges = _panel_edges(spec, resolution)
    a, b = edges[:-1, None], edges[1:, None]
    half = (b - a) / 2
    nodes = (a + b) / 2 + half * _GL_NODES[None, :]
    weights = half * _GL_WEIGHTS[None, :] / (we - ws)
    nodes, weights = nodes.ravel(), weights.ravel()
    known = sp.sum([spec.carryover, spec.bookahead])
    # nodes sit strictly inside panels, so the step value there is the panel value
    peak = sp.suffix_max(known).values(nodes)
    return _Quadrature(nodes, weights, peak, rho(nodes, ws, spec.demand, spec.service))


def averaged_bound(c: int, spec: TargetSpec, resolution: float = DEFAULT_RESOLUTION,
                   quadrature: _Quadrature | None = None) -> float:
    """Time average over the window of :func:`bound_at`."""
    if c < 0:
        raise SpecError("target must be nonnegative")
    q = quadrature or build_quadrature(spec, resolution)
    vals = poisson_tail_array(q.rho, c - q.peak)
    return float(min(1.0, max(0.0, np.dot(q.weights, vals))))


def compute_target(spec: TargetSpec, resolution: float = DEFAULT_RESOLUTION) -> int:
    """Smallest nonnegative integer ``c`` with ``averaged_bound(c) <= delta``.

    With no stochastic demand there is no request to block, so the target is
    just the peak of the known rides.
    """
    if spec.demand.is_zero() or not spec.demand.pieces(*spec.window):
        known = sp.sum([spec.carryover, spec.bookahead])
        return max((known.initial,) + known.counts)
    q = build_quadrature(spec, resolution)
    ok = lambda c: averaged_bound(c, spec, quadrature=q) <= spec.delta  # noqa: E731
    if ok(0):
        return 0
    lo, hi = 0, 1
    while not ok(hi):
        lo, hi = hi, hi * 2
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if ok(mid):
            hi = mid
        else:
            lo = mid
    assert ok(hi) and not ok(hi - 1)
    return hi
