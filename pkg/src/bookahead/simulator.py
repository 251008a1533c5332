"""Discrete-event simulation of regional supply management across time windows.

Every window starts with fresh targets and a full rebalance (idle moves plus
external additions and removals).  Later rebalance points only move idle
drivers between adjacent regions.  Non-reserved requests go through admission
control and are dropped when blocked.  Book-ahead rides are always dispatched
from the region's idle pool at their start.

A driver serving a ride counts as active in the ride's origin region and joins
the destination region's idle pool once the ride completes.
"""

from __future__ import annotations

import csv
import heapq
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Sequence

import numpy as np

from . import admission as adm
from . import step_profile as sp
from .ingest import CalibratedModel, CalibratedWindow, TripRecord, sample_bookahead, window_index
from .rebalance import RegionSnapshot, apply_plan, plan_rebalance
from .transient_queue import DemandRate, TargetSpec, compute_target

# event priorities at equal timestamps
_COMPLETE, _REBALANCE, _BA_START, _ARRIVAL, _WINDOW = range(5)

BLOCKED_NO_IDLE = "no_idle"


class SimulationError(RuntimeError):
    """Broken invariant during a run."""


@dataclass(frozen=True)
class SimConfig:
    window_minutes: float = 20.0
    delta: float = 0.01
    p_ba: float = 0.0
    seed: int = 0
    regions: int = 1
    adjacency: frozenset = frozenset()
    rebalance_points: tuple[float, ...] = (0.0, 0.5)
    compliance: bool = True
    replications: int = 1
    # single-region mode: total supply tracks the target at every instant
    hold_supply: bool = False
    resolution: float = 0.1
    check_invariants: bool = True

    def __post_init__(self):
        if not self.window_minutes > 0:
            raise ValueError("window length must be positive")
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        if not 0 <= self.p_ba <= 1:
            raise ValueError(f"p_ba must lie in [0, 1], got {self.p_ba}")
        if self.regions < 1:
            raise ValueError("need at least one region")
        if any(not 0 <= p < 1 for p in self.rebalance_points):
            raise ValueError("rebalance points must lie in [0, 1)")
        if self.replications < 1:
            raise ValueError("need at least one replication")
        if self.hold_supply and self.regions != 1:
            raise ValueError("held supply is a single-region mode")
        for i, j in self.adjacency:
            if (j, i) not in self.adjacency:
                raise ValueError(f"adjacency is not symmetric at ({i}, {j})")


@dataclass
class WindowMetrics:
    region: int
    window: int
    target: int
    admitted: int = 0
    blocked: int = 0
    blocked_capacity: int = 0
    blocked_conflict: int = 0
    blocked_no_idle: int = 0
    avg_idle: float = 0.0
    avg_active: float = 0.0
    ba_served: int = 0
    ba_rescues: int = 0
    ba_failures: int = 0
    safety_violations: int = 0

    @property
    def requests(self) -> int:
        return self.admitted + self.blocked

    @property
    def blocked_fraction(self) -> float:
        return self.blocked / self.requests if self.requests else 0.0

    @property
    def utilization(self) -> float:
        busy = self.avg_active + self.avg_idle
        return 100.0 * self.avg_active / busy if busy > 0 else 0.0


CSV_COLUMNS = ["region", "window", "target", "admitted", "blocked", "blocked_fraction",
               "blocked_capacity", "blocked_conflict", "blocked_no_idle", "avg_idle",
               "avg_active", "utilization", "ba_served", "ba_rescues", "ba_failures",
               "safety_violations"]


def fmt(x) -> str:
    """Fixed six-decimal formatting for floats; integers as-is."""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.6f}"


@dataclass
class SimMetrics:
    windows: list[WindowMetrics]
    internal_moves: int = 0
    external_moves: int = 0
    seed: int = 0
    p_ba: float = 0.0

    @property
    def admitted(self) -> int:
        return sum(w.admitted for w in self.windows)

    @property
    def blocked(self) -> int:
        return sum(w.blocked for w in self.windows)

    @property
    def blocked_fraction(self) -> float:
        n = self.admitted + self.blocked
        return self.blocked / n if n else 0.0

    @property
    def mean_target(self) -> float:
        return float(np.mean([w.target for w in self.windows])) if self.windows else 0.0

    @property
    def mean_idle(self) -> float:
        return float(np.mean([w.avg_idle for w in self.windows])) if self.windows else 0.0

    @property
    def utilization(self) -> float:
        a = sum(w.avg_active for w in self.windows)
        e = sum(w.avg_idle for w in self.windows)
        return 100.0 * a / (a + e) if a + e > 0 else 0.0

    @property
    def ba_failures(self) -> int:
        return sum(w.ba_failures for w in self.windows)

    @property
    def ba_rescues(self) -> int:
        return sum(w.ba_rescues for w in self.windows)

    @property
    def safety_violations(self) -> int:
        return sum(w.safety_violations for w in self.windows)

    @property
    def internal_ratio(self) -> float:
        total = self.internal_moves + self.external_moves
        return self.internal_moves / total if total else 0.0

    def summary(self) -> dict:
        return {
            "seed": self.seed,
            "p_ba": self.p_ba,
            "admitted": self.admitted,
            "blocked": self.blocked,
            "blocked_fraction": round(self.blocked_fraction, 6),
            "mean_target": round(self.mean_target, 6),
            "mean_idle": round(self.mean_idle, 6),
            "utilization": round(self.utilization, 6),
            "ba_rescues": self.ba_rescues,
            "ba_failures": self.ba_failures,
            "safety_violations": self.safety_violations,
            "internal_moves": self.internal_moves,
            "external_moves": self.external_moves,
            "internal_ratio": round(self.internal_ratio, 6),
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for m in self.windows:
            w.writerow([fmt(getattr(m, c)) for c in CSV_COLUMNS])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=1, sort_keys=True) + "\n"


def _window_target(config: SimConfig, cell: CalibratedWindow, carry: sp.StepProfile,
                   booked: sp.StepProfile) -> int:
    rate = cell.lam * (1.0 - config.p_ba)
    service = cell.service if rate > 0 else None
    spec = TargetSpec(config.delta, carry.window, DemandRate.constant(rate), service, carry, booked)
    c = compute_target(spec, config.resolution)
    # never plan below the rides already known to be active
    known = sp.sum([carry, booked])
    return max(c, max((known.initial,) + known.counts))


class _Run:
    def __init__(self, config: SimConfig, model: CalibratedModel, trips: Sequence[TripRecord], seed: int):
        if model.regions != config.regions:
            raise ValueError(f"model has {model.regions} regions, config {config.regions}")
        if abs(model.window_minutes - config.window_minutes) > 1e-9:
            raise ValueError("model and config disagree on the window length")
        self.cfg = config
        self.model = model
        self.regions = list(range(1, config.regions + 1))
        self.neighbours = {r: sorted(j for i, j in config.adjacency if i == r) for r in self.regions}
        self.active = {r: 0 for r in self.regions}
        self.idle = {r: 0 for r in self.regions}
        self.rides: dict[int, tuple[float, float, int]] = {}  # id -> (start, end, origin)
        self.states: dict[int, adm.RegionWindowState] = {}
        self.targets: dict[int, int] = {}
        self.current: dict[int, WindowMetrics] = {}
        self.done: list[WindowMetrics] = []
        self.internal = 0
        self.external = 0
        self.fleet = 0
        self.clock = model.horizon[0]
        self.window = -1
        self.calendar: list = []
        self.seq = 0

        marked = sample_bookahead(trips, config.p_ba, seed)
        self.booked: dict[tuple[int, int], list[tuple[float, float]]] = {}
        for t in marked:
            if t.origin_region not in self.active or t.destination_region not in self.active:
                raise ValueError(f"trip {t} names a region outside 1..{config.regions}")
            k = window_index(t.request_time, model.horizon, model.window_minutes)
            if k is None:
                continue
            if t.book_ahead:
                self.booked.setdefault((t.origin_region, k), []).append((t.request_time, t.completion_time))
                self._push(t.request_time, _BA_START, t)
            else:
                self._push(t.request_time, _ARRIVAL, t)
        for k in range(model.window_count):
            ws, _ = model.window_bounds(k)
            self._push(ws, _WINDOW, k)
            for p in sorted(set(config.rebalance_points)):
                if p > 0:
                    self._push(ws + p * config.window_minutes, _REBALANCE, k)
        self._push(model.horizon[1], _WINDOW, model.window_count)

    def _push(self, t: float, kind: int, payload) -> None:
        heapq.heappush(self.calendar, (t, kind, self.seq, payload))
        self.seq += 1

    def _advance(self, t: float) -> None:
        dt = t - self.clock
        if dt > 0 and self.current:
            w = self.cfg.window_minutes
            for r, m in self.current.items():
                m.avg_idle += self.idle[r] * dt / w
                m.avg_active += self.active[r] * dt / w
        self.clock = t

    def _hold(self, r: int) -> None:
        if self.cfg.hold_supply:
            self.idle[r] = max(self.targets.get(r, 0) - self.active[r], 0)

    def _check(self) -> None:
        if not self.cfg.check_invariants:
            return
        for r in self.regions:
            if self.idle[r] < 0 or self.active[r] < 0:
                raise SimulationError(f"negative count in region {r} at {self.clock}")
        if not self.cfg.hold_supply:
            total = sum(self.idle.values()) + sum(self.active.values())
            if total != self.fleet:
                raise SimulationError(f"fleet size drifted to {total}, expected {self.fleet}")

    def _snapshots(self) -> list[RegionSnapshot]:
        return [RegionSnapshot(r, self.active[r], self.idle[r], self.targets[r]) for r in self.regions]

    def _close_window(self) -> None:
        for r, m in self.current.items():
            m.safety_violations = len(adm.safety_violations(self.states[r]))
            self.done.append(m)
        self.current = {}

    def _open_window(self, k: int) -> None:
        window = self.model.window_bounds(k)
        for r in self.regions:
            carry = sp.from_rides([(s, e) for s, e, o in self.rides.values() if o == r], window)
            booked = sp.from_rides(self.booked.get((r, k), []), window)
            c = _window_target(self.cfg, self.model.cell(r, k), carry, booked)
            self.targets[r] = c
            self.states[r] = adm.RegionWindowState.open(c, carry, booked)
            self.current[r] = WindowMetrics(r, k, c)
        if self.cfg.hold_supply:
            for r in self.regions:
                self._hold(r)
            return
        if 0.0 in self.cfg.rebalance_points:
            self._rebalance(full=True)

    def _rebalance(self, full: bool) -> None:
        snaps = self._snapshots()
        plan = plan_rebalance(snaps, self.cfg.adjacency)
        moves = self.cfg.compliance
        if not full and not moves:
            return
        self.idle = apply_plan(snaps, plan, moves=moves, external=full)
        if moves:
            self.internal += plan.total_internal
        if full:
            self.external += plan.total_external
            self.fleet += sum(plan.add.values()) - sum(plan.remove.values())

    def _dispatch(self, r: int, trip: TripRecord) -> None:
        self.idle[r] -= 1
        self.active[r] += 1
        self.rides[self.seq] = (trip.request_time, trip.completion_time, r)
        self._push(trip.completion_time, _COMPLETE, (self.seq, trip.destination_region))

    def _arrival(self, trip: TripRecord) -> None:
        r = trip.origin_region
        m = self.current[r]
        decision = adm.decide(self.states[r], trip.request_time, trip.duration)
        if decision.admitted and self.idle[r] >= 1:
            self.states[r] = adm.commit(self.states[r], decision)
            self._dispatch(r, trip)
            m.admitted += 1
            return
        m.blocked += 1
        if decision.reason == adm.CAPACITY_NOW:
            m.blocked_capacity += 1
        elif decision.reason == adm.BOOKAHEAD_CONFLICT:
            m.blocked_conflict += 1
        else:
            m.blocked_no_idle += 1

    def _ba_start(self, trip: TripRecord) -> None:
        r = trip.origin_region
        m = self.current[r]
        if self.idle[r] < 1 and self.cfg.compliance and not self.cfg.hold_supply:
            # drivers that ended trips elsewhere left the region short; a compliant
            # neighbour with spare idle drivers sends one over
            donors = [j for j in self.neighbours[r] if self.idle[j] >= 1]
            if donors:
                j = max(donors, key=lambda j: (self.idle[j], -j))
                self.idle[j] -= 1
                self.idle[r] += 1
                self.internal += 1
                m.ba_rescues += 1
        if self.idle[r] >= 1:
            self._dispatch(r, trip)
            m.ba_served += 1
        else:
            m.ba_failures += 1

    def _complete(self, payload) -> None:
        ride_id, dest = payload
        _, _, origin = self.rides.pop(ride_id)
        self.active[origin] -= 1
        self.idle[dest] += 1

    def execute(self, seed: int) -> SimMetrics:
        while self.calendar:
            t, kind, _, payload = heapq.heappop(self.calendar)
            self._advance(t)
            if kind == _COMPLETE:
                self._complete(payload)
            elif kind == _REBALANCE:
                if not self.cfg.hold_supply:
                    self._rebalance(full=False)
            elif kind == _BA_START:
                self._ba_start(payload)
            elif kind == _ARRIVAL:
                self._arrival(payload)
            else:
                self._close_window()
                if payload < self.model.window_count:
                    self._open_window(payload)
                else:
                    # leftover completions happen after the horizon; nothing to measure
                    self.calendar.clear()
            for r in self.regions:
                self._hold(r)
            self._check()
        return SimMetrics(self.done, self.internal, self.external, seed, self.cfg.p_ba)


def run(config: SimConfig, model: CalibratedModel, trips: Sequence[TripRecord],
        seed: Optional[int] = None) -> SimMetrics:
    """Simulate every window of the model's horizon with the observed requests."""
    seed = config.seed if seed is None else seed
    return _Run(config, model, trips, seed).execute(seed)


def run_noncompliant(config: SimConfig, model: CalibratedModel, trips: Sequence[TripRecord],
                     seed: Optional[int] = None) -> SimMetrics:
    """Same pipeline, but recommended inter-regional moves are ignored."""
    from dataclasses import replace
    return run(replace(config, compliance=False), model, trips, seed)


@dataclass
class SweepRow:
    p_ba: float
    delta: float
    replications: int
    mean_target: float
    mean_idle: float
    utilization: float
    admitted: float
    blocked: float
    blocked_fraction: float
    blocked_fraction_se: float
    ba_rescues: int
    ba_failures: int
    safety_violations: int
    internal_moves: float
    external_moves: float
    internal_ratio: float


SWEEP_COLUMNS = [f.name for f in fields(SweepRow)]


def _replicate(args) -> SimMetrics:
    config, model, trips, seed = args
    return run(config, model, trips, seed)


def aggregate(p_ba: float, delta: float, runs: list[SimMetrics]) -> SweepRow:
    n = len(runs)
    frac = np.array([m.blocked_fraction for m in runs])
    internal = float(np.mean([m.internal_moves for m in runs]))
    external = float(np.mean([m.external_moves for m in runs]))
    return SweepRow(
        p_ba=p_ba, delta=delta, replications=n,
        mean_target=float(np.mean([m.mean_target for m in runs])),
        mean_idle=float(np.mean([m.mean_idle for m in runs])),
        utilization=float(np.mean([m.utilization for m in runs])),
        admitted=float(np.mean([m.admitted for m in runs])),
        blocked=float(np.mean([m.blocked for m in runs])),
        blocked_fraction=float(frac.mean()),
        blocked_fraction_se=float(frac.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0,
        ba_rescues=sum(m.ba_rescues for m in runs),
        ba_failures=sum(m.ba_failures for m in runs),
        safety_violations=sum(m.safety_violations for m in runs),
        internal_moves=internal, external_moves=external,
        internal_ratio=internal / (internal + external) if internal + external else 0.0,
    )


def run_replications(config: SimConfig, model: CalibratedModel, trips: Sequence[TripRecord],
                     replications: Optional[int] = None, jobs: int = 1) -> list[SimMetrics]:
    """Runs with seeds ``config.seed + i``; results come back in seed order."""
    n = replications or config.replications
    tasks = [(config, model, trips, config.seed + i) for i in range(n)]
    if jobs > 1 and n > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_replicate, tasks))
    return [_replicate(t) for t in tasks]


def run_sweep(config: SimConfig, model: CalibratedModel, trips: Sequence[TripRecord],
              p_ba_values: Sequence[float], replications: Optional[int] = None,
              jobs: int = 1) -> list[SweepRow]:
    """Average metrics over seeded replications for each book-ahead fraction.

    Replication ``i`` uses seed ``config.seed + i`` at every fraction, so the
    book-ahead sets are nested across the sweep.
    """
    from dataclasses import replace
    rows = []
    for p in p_ba_values:
        runs = run_replications(replace(config, p_ba=float(p)), model, trips, replications, jobs)
        rows.append(aggregate(float(p), config.delta, runs))
    return rows


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for row in rows:
        d = asdict(row)
        w.writerow([fmt(d[c]) for c in SWEEP_COLUMNS])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# synthetic workloads
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Workload:
    """Poisson requests per origin region with lognormal durations.

    ``od[i][j]`` is the probability that a ride from region ``i+1`` ends in
    region ``j+1``.  Times are rounded to whole seconds so that a workload
    survives a trip-file round trip unchanged.
    """

    rates: tuple[float, ...]
    horizon: tuple[float, float]
    log_mean: float = 2.2
    log_sigma: float = 0.5
    od: Optional[tuple[tuple[float, ...], ...]] = None
    rounding: float = 1.0 / 60.0

    def generate(self, seed: int) -> list[TripRecord]:
        rng = np.random.default_rng(seed)
        n_regions = len(self.rates)
        od = np.eye(n_regions) if self.od is None else np.asarray(self.od, dtype=float)
        if od.shape != (n_regions, n_regions) or np.any(od < 0) or not np.allclose(od.sum(axis=1), 1):
            raise ValueError("od must be a row-stochastic square matrix")
        a, b = self.horizon
        trips = []
        for i, rate in enumerate(self.rates):
            n = rng.poisson(rate * (b - a))
            starts = np.sort(rng.uniform(a, b, n))
            durations = rng.lognormal(self.log_mean, self.log_sigma, n)
            dests = rng.choice(n_regions, size=n, p=od[i])
            for s, d, j in zip(starts, durations, dests):
                s = self._round(s)
                e = max(self._round(s + d), s + self.rounding) if self.rounding else s + d
                if a < s <= b:
                    trips.append(TripRecord(float(s), float(e), i + 1, int(j) + 1))
        trips.sort()
        return trips

    def _round(self, x: float) -> float:
        if not self.rounding:
            return x
        return round(x / self.rounding) * self.rounding


def grid_adjacency(rows: int, cols: int) -> frozenset:
    """Rook adjacency on a ``rows x cols`` grid with regions numbered row-major from 1."""
    pairs = set()
    for r in range(rows):
        for c in range(cols):
            i = r * cols + c + 1
            if c + 1 < cols:
                pairs |= {(i, i + 1), (i + 1, i)}
            if r + 1 < rows:
                pairs |= {(i, i + cols), (i + cols, i)}
    return frozenset(pairs)
