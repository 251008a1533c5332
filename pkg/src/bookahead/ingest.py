"""Trip data loading, book-ahead sampling and per-window calibration.

Trip files are CSV with the exact header
``request_time,completion_time,origin_region,destination_region``; timestamps
are ISO-8601 with seconds and regions are 1-based integers.  Files ending in
``.gz`` (or starting with the gzip magic bytes) are decompressed on the fly.

Internally every time is a float number of minutes since an epoch, by default
midnight of the earliest request date.
"""

from __future__ import annotations

import csv
import gzip
import io
import json
import logging
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import step_profile as sp
from .step_profile import StepProfile
from .transient_queue import ServiceDistribution

log = logging.getLogger(__name__)

HEADER = ("request_time", "completion_time", "origin_region", "destination_region")
MODEL_FORMAT = "bookahead-model/1"
MIN_WINDOW_SAMPLE = 5


class TripDataError(ValueError):
    """Unreadable trip file or malformed calibration input."""


@dataclass(frozen=True, order=True)
class TripRecord:
    request_time: float
    completion_time: float
    origin_region: int
    destination_region: int
    book_ahead: bool = False

    def __post_init__(self):
        if not self.completion_time > self.request_time:
            raise TripDataError(
                f"completion {self.completion_time} is not after request {self.request_time}")

    @property
    def duration(self) -> float:
        return self.completion_time - self.request_time


@dataclass
class TripTable:
    records: list[TripRecord]
    errors: list[str]
    epoch: datetime


def _open_text(path: Path):
    with open(path, "rb") as fh:
        magic = fh.read(2)
    if path.suffix == ".gz" or magic == b"\x1f\x8b":
        return io.TextIOWrapper(gzip.open(path, "rb"), encoding="utf-8", newline="")
    return open(path, "r", encoding="utf-8", newline="")


def _parse_time(text: str) -> datetime:
    dt = datetime.fromisoformat(text.strip())
    if dt.tzinfo is not None:
        dt = dt.replace(tzinfo=None) - (dt.utcoffset() or timedelta(0))
    return dt


def to_minutes(dt: datetime, epoch: datetime) -> float:
    return (dt - epoch).total_seconds() / 60.0


def from_minutes(minutes: float, epoch: datetime) -> datetime:
    return epoch + timedelta(seconds=round(minutes * 60.0, 6))


def read_trips(path, region_count: Optional[int] = None, pickup_minutes: float = 0.0,
               epoch: Optional[datetime] = None) -> TripTable:
    """Parse a trip file, collecting per-row problems instead of stopping at the first."""
    path = Path(path)
    if not path.is_file():
        raise TripDataError(f"trip file not found: {path}")
    if pickup_minutes < 0:
        raise TripDataError("pickup time must be nonnegative")
    rows, errors = [], []
    with _open_text(path) as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != HEADER:
            raise TripDataError(
                f"{path}: bad header {header!r}; expected columns {','.join(HEADER)}")
        for row in reader:
            line = reader.line_num
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(HEADER):
                errors.append(f"line {line}: expected {len(HEADER)} fields, got {len(row)}")
                continue
            try:
                start, end = _parse_time(row[0]), _parse_time(row[1])
                origin, dest = int(row[2]), int(row[3])
            except ValueError as exc:
                errors.append(f"line {line}: {exc}")
                continue
            if not end > start:
                errors.append(f"line {line}: completion {row[1]} is not after request {row[0]}")
                continue
            bad = [r for r in (origin, dest) if r < 1 or (region_count is not None and r > region_count)]
            if bad:
                errors.append(f"line {line}: region {bad[0]} outside 1..{region_count or 'N'}")
                continue
            rows.append((start, end, origin, dest))
    if epoch is None:
        first = min((r[0] for r in rows), default=datetime(1970, 1, 1))
        epoch = datetime(first.year, first.month, first.day)
    records = [TripRecord(to_minutes(s, epoch), to_minutes(e, epoch) + pickup_minutes, o, d)
               for s, e, o, d in rows]
    records.sort()
    for msg in errors:
        log.warning("%s: %s", path, msg)
    return TripTable(records, errors, epoch)


def load_trips(path, region_count: Optional[int] = None, pickup_minutes: float = 0.0,
               strict: bool = False) -> list[TripRecord]:
    """Valid records sorted by request time.  ``strict`` turns any bad row into an error."""
    table = read_trips(path, region_count, pickup_minutes)
    if strict and table.errors:
        raise TripDataError("; ".join(table.errors))
    return table.records


def write_trips(path, trips: Iterable[TripRecord], epoch: datetime) -> None:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "wt", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HEADER)
        for t in trips:
            w.writerow([from_minutes(t.request_time, epoch).isoformat(timespec="seconds"),
                        from_minutes(t.completion_time, epoch).isoformat(timespec="seconds"),
                        t.origin_region, t.destination_region])


def sample_bookahead(trips: Sequence[TripRecord], p_ba: float, seed: int) -> list[TripRecord]:
    """Mark each trip as booked ahead independently with probability ``p_ba``.

    Draws follow sorted trip order, so the marking does not depend on how the
    input happens to be ordered.
    """
    if not 0.0 <= p_ba <= 1.0:
        raise TripDataError(f"book-ahead fraction must lie in [0, 1], got {p_ba}")
    order = sorted(range(len(trips)), key=lambda i: replace(trips[i], book_ahead=False))
    u = np.random.default_rng(seed).random(len(trips))
    marks = np.empty(len(trips), dtype=bool)
    marks[order] = u < p_ba
    return [replace(t, book_ahead=bool(m)) for t, m in zip(trips, marks)]


@dataclass
class CalibratedWindow:
    region: int
    index: int
    window: tuple[float, float]
    lam: float
    service: Optional[ServiceDistribution]
    bookahead_profile: StepProfile
    carryover_profile: StepProfile
    service_source: str = "window"
    # (start, end, destination) of every trip requested in this region-window
    rides: list[tuple[float, float, int]] = field(default_factory=list)

    @property
    def trip_count(self) -> int:
        return len(self.rides)


@dataclass
class CalibratedModel:
    regions: int
    window_minutes: float
    horizon: tuple[float, float]
    windows: list[CalibratedWindow]
    epoch: Optional[datetime] = None

    @property
    def window_count(self) -> int:
        return int(round((self.horizon[1] - self.horizon[0]) / self.window_minutes))

    def cell(self, region: int, index: int) -> CalibratedWindow:
        return self.windows[(region - 1) * self.window_count + index]

    def window_bounds(self, index: int) -> tuple[float, float]:
        a = self.horizon[0] + index * self.window_minutes
        return (a, a + self.window_minutes)


def check_horizon(horizon: tuple[float, float], window_minutes: float) -> int:
    if not window_minutes > 0:
        raise TripDataError("window length must be positive")
    a, b = horizon
    if not b > a:
        raise TripDataError(f"empty horizon ({a}, {b}]")
    count = (b - a) / window_minutes
    if abs(count - round(count)) > 1e-9:
        raise TripDataError(f"horizon ({a}, {b}] is not a whole number of {window_minutes}-minute windows")
    return int(round(count))


def default_horizon(trips: Sequence[TripRecord], window_minutes: float) -> tuple[float, float]:
    """Smallest window-aligned horizon whose windows contain every request."""
    if not trips:
        return (0.0, float(window_minutes))
    lo = min(t.request_time for t in trips)
    hi = max(t.request_time for t in trips)
    a = np.ceil(lo / window_minutes) * window_minutes - window_minutes
    b = max(np.ceil(hi / window_minutes) * window_minutes, a + window_minutes)
    return (float(a), float(b))


def window_index(t: float, horizon: tuple[float, float], window_minutes: float) -> Optional[int]:
    """Index ``k`` of the window ``(a + k w, a + (k+1) w]`` holding ``t``, if any."""
    a, b = horizon
    if not a < t <= b:
        return None
    k = int(np.ceil((t - a) / window_minutes)) - 1
    # guard against rounding at the boundaries
    if t <= a + k * window_minutes:
        k -= 1
    elif t > a + (k + 1) * window_minutes:
        k += 1
    return k


def calibrate(trips: Sequence[TripRecord], regions: int, window_minutes: float,
              horizon: tuple[float, float], p_ba: float = 0.0) -> CalibratedModel:
    """Per region-window demand rates, service samples and known-ride profiles.

    ``lam`` is the rate of trips not marked book-ahead.  For a trip set that was
    never sampled this is the total rate; pass ``p_ba`` to rescale it to the
    non-reserved rate when book-ahead rides are sampled later.
    """
    if regions < 1:
        raise TripDataError("need at least one region")
    count = check_horizon(horizon, window_minutes)
    cells: dict[tuple[int, int], list[TripRecord]] = {}
    by_region: dict[int, list[TripRecord]] = {r: [] for r in range(1, regions + 1)}
    for t in sorted(trips):
        if t.origin_region not in by_region:
            raise TripDataError(f"trip origin {t.origin_region} outside 1..{regions}")
        by_region[t.origin_region].append(t)
        k = window_index(t.request_time, horizon, window_minutes)
        if k is not None:
            cells.setdefault((t.origin_region, k), []).append(t)

    windows = []
    for r in range(1, regions + 1):
        region_trips = by_region[r]
        region_sample = [t.duration for t in region_trips]
        for k in range(count):
            a = horizon[0] + k * window_minutes
            win = (a, a + window_minutes)
            own = cells.get((r, k), [])
            if len(own) >= MIN_WINDOW_SAMPLE:
                service, source = ServiceDistribution.empirical([t.duration for t in own]), "window"
            elif region_sample:
                service, source = ServiceDistribution.empirical(region_sample), "region"
            else:
                service, source = None, "none"
            stochastic = [t for t in own if not t.book_ahead]
            lam = len(stochastic) / window_minutes * (1.0 - p_ba)
            bookahead = sp.from_rides([(t.request_time, t.completion_time) for t in own if t.book_ahead], win)
            carry = sp.from_rides([(t.request_time, t.completion_time) for t in region_trips
                                   if t.request_time <= a < t.completion_time], win)
            windows.append(CalibratedWindow(
                r, k, win, lam, service, bookahead, carry, source,
                [(t.request_time, t.completion_time, t.destination_region) for t in own]))
    return CalibratedModel(regions, float(window_minutes), (float(horizon[0]), float(horizon[1])), windows)


# ---------------------------------------------------------------------------
# model JSON
# ---------------------------------------------------------------------------

def _profile_dict(p: StepProfile) -> dict:
    return {"initial": p.initial, "times": list(p.times), "counts": list(p.counts)}


def _profile_from(d: dict, window: tuple[float, float]) -> StepProfile:
    return StepProfile(window[0], window[1], int(d["initial"]),
                       tuple(float(t) for t in d["times"]), tuple(int(c) for c in d["counts"]))


def model_to_dict(model: CalibratedModel) -> dict:
    return {
        "format": MODEL_FORMAT,
        "regions": model.regions,
        "window_minutes": model.window_minutes,
        "horizon": list(model.horizon),
        "epoch": model.epoch.isoformat(timespec="seconds") if model.epoch else None,
        "windows": [
            {
                "region": w.region,
                "index": w.index,
                "window": list(w.window),
                "lambda": w.lam,
                "trip_count": w.trip_count,
                "service_source": w.service_source,
                "service": w.service.to_dict() if w.service else None,
                "carryover": _profile_dict(w.carryover_profile),
                "bookahead": _profile_dict(w.bookahead_profile),
                "rides": [list(r) for r in w.rides],
            }
            for w in model.windows
        ],
    }


def model_from_dict(doc: dict) -> CalibratedModel:
    if doc.get("format") != MODEL_FORMAT:
        raise TripDataError(f"unsupported model format {doc.get('format')!r}")
    try:
        windows = []
        for d in doc["windows"]:
            win = (float(d["window"][0]), float(d["window"][1]))
            windows.append(CalibratedWindow(
                int(d["region"]), int(d["index"]), win, float(d["lambda"]),
                ServiceDistribution.from_dict(d["service"]) if d["service"] else None,
                _profile_from(d["bookahead"], win), _profile_from(d["carryover"], win),
                d.get("service_source", "window"),
                [(float(s), float(e), int(j)) for s, e, j in d.get("rides", [])]))
        epoch = datetime.fromisoformat(doc["epoch"]) if doc.get("epoch") else None
        model = CalibratedModel(int(doc["regions"]), float(doc["window_minutes"]),
                                (float(doc["horizon"][0]), float(doc["horizon"][1])), windows, epoch)
    except (KeyError, TypeError, ValueError) as exc:
        raise TripDataError(f"malformed model document: {exc}") from None
    if len(windows) != model.regions * model.window_count:
        raise TripDataError("model does not hold one entry per region and window")
    return model


def dump_model(model: CalibratedModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=1, sort_keys=True) + "\n")


def load_model(path) -> CalibratedModel:
    path = Path(path)
    if not path.is_file():
        raise TripDataError(f"model file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise TripDataError(f"{path}: not valid JSON ({exc})") from None
    return model_from_dict(doc)


def model_trips(model: CalibratedModel) -> list[TripRecord]:
    """Trips recorded in a model (those requested inside the horizon)."""
    out = [TripRecord(s, e, w.region, j) for w in model.windows for s, e, j in w.rides]
    out.sort()
    return out
