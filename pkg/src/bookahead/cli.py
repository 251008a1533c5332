"""Command-line front end.

Subcommands: ``calibrate``, ``targets``, ``rebalance`` and ``simulate``.  Each
writes its outputs plus a JSON manifest listing the configuration, SHA-256
digests of inputs and outputs, the seed and the package version.

Exit codes: 0 on success, 1 on invalid input or usage, 2 on runtime failures
such as an infeasible flow network.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from datetime import datetime
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from . import ingest
from . import rebalance as rb
from . import simulator as sim
from . import step_profile as sp
from .ingest import CalibratedModel, TripDataError
from .transient_queue import DemandRate, SpecError, TargetSpec, compute_target

OUT_ENV = "BOOKAHEAD_OUT"
EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("bookahead")


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def default_out_dir() -> Path:
    return Path(os.environ.get(OUT_ENV, "."))


def write_manifest(path: Path, command: str, config: dict, inputs: Sequence[Path],
                   outputs: Sequence[Path], seed: Optional[int] = None) -> None:
    doc = {
        "command": command,
        "version": __version__,
        "seed": seed,
        "config": config,
        "inputs": {str(p): sha256(p) for p in inputs},
        "outputs": {str(p): sha256(p) for p in outputs},
    }
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def _probability(text: str, lo_open: bool = True, hi_open: bool = True) -> float:
    try:
        x = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    lo_ok = x > 0 if lo_open else x >= 0
    hi_ok = x < 1 if hi_open else x <= 1
    if not (lo_ok and hi_ok):
        interval = f"{'(' if lo_open else '['}0, 1{')' if hi_open else ']'}"
        raise argparse.ArgumentTypeError(f"{x} is outside {interval}")
    return x


def _delta(text: str) -> float:
    return _probability(text)


def _fraction(text: str) -> float:
    return _probability(text, lo_open=False, hi_open=False)


def _fractions(text: str) -> list[float]:
    return [_fraction(p) for p in text.split(",") if p.strip()]


def _positive_int(text: str) -> int:
    try:
        n = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if n < 1:
        raise argparse.ArgumentTypeError(f"must be at least 1, got {n}")
    return n


def _parse_horizon(text: str, epoch: datetime) -> tuple[float, float]:
    if ".." not in text:
        raise UsageError(f"horizon must look like A..B, got {text!r}")
    a, b = text.split("..", 1)

    def one(s: str) -> float:
        try:
            return float(s)
        except ValueError:
            return ingest.to_minutes(datetime.fromisoformat(s), epoch)

    try:
        return (one(a), one(b))
    except ValueError as exc:
        raise UsageError(f"bad horizon {text!r}: {exc}") from None


# ---------------------------------------------------------------------------
# calibrate
# ---------------------------------------------------------------------------

def cmd_calibrate(args) -> int:
    table = ingest.read_trips(args.trips, args.regions, args.pickup_minutes)
    if args.strict and table.errors:
        raise TripDataError("; ".join(table.errors))
    for msg in table.errors:
        print(f"warning: {args.trips}: {msg}", file=sys.stderr)
    horizon = (_parse_horizon(args.horizon, table.epoch) if args.horizon
               else ingest.default_horizon(table.records, args.window_minutes))
    model = ingest.calibrate(table.records, args.regions, args.window_minutes, horizon)
    model.epoch = table.epoch
    out = Path(args.out) if args.out else default_out_dir() / "model.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    ingest.dump_model(model, out)
    config = {"regions": args.regions, "window_minutes": args.window_minutes,
              "horizon": list(horizon), "pickup_minutes": args.pickup_minutes,
              "rejected_rows": len(table.errors)}
    write_manifest(out.with_name(out.name + ".manifest.json"), "calibrate", config,
                   [Path(args.trips)], [out])
    print(f"calibrated {len(table.records)} trips into {len(model.windows)} region-windows -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# targets
# ---------------------------------------------------------------------------

def _target_task(task) -> int:
    delta, rate, service, carry, booked = task
    spec = TargetSpec(delta, carry.window, DemandRate.constant(rate), service if rate > 0 else None,
                      carry, booked)
    return compute_target(spec)


def model_targets(model: CalibratedModel, delta: float, p_ba: float, seed: int,
                  jobs: int = 1) -> list[dict]:
    """Per region-window targets, with book-ahead rides sampled from the model's trips."""
    marked = ingest.sample_bookahead(ingest.model_trips(model), p_ba, seed)
    booked: dict[tuple[int, int], list[tuple[float, float]]] = {}
    for t in marked:
        if t.book_ahead:
            k = ingest.window_index(t.request_time, model.horizon, model.window_minutes)
            booked.setdefault((t.origin_region, k), []).append((t.request_time, t.completion_time))
    tasks, rows = [], []
    for w in model.windows:
        rate = w.lam * (1.0 - p_ba)
        profile = sp.from_rides(booked.get((w.region, w.index), []), w.window)
        tasks.append((delta, rate, w.service, w.carryover_profile, profile))
        rows.append({"region": w.region, "window": w.index, "window_start": w.window[0],
                     "window_end": w.window[1], "lambda": rate})
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            targets = list(pool.map(_target_task, tasks, chunksize=8))
    else:
        targets = [_target_task(t) for t in tasks]
    for row, c in zip(rows, targets):
        row["target"] = c
    return rows


TARGET_COLUMNS = ["region", "window", "window_start", "window_end", "lambda", "target"]


def cmd_targets(args) -> int:
    model = ingest.load_model(args.model)
    rows = model_targets(model, args.delta, args.pba, args.seed, args.jobs)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TARGET_COLUMNS)
    for row in rows:
        w.writerow([sim.fmt(row[c]) for c in TARGET_COLUMNS])
    out = _write(Path(args.out) if args.out else default_out_dir() / "targets.csv", buf.getvalue())
    write_manifest(out.with_name(out.name + ".manifest.json"), "targets",
                   {"delta": args.delta, "pba": args.pba}, [Path(args.model)], [out], args.seed)
    print(f"wrote {len(rows)} targets -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# rebalance
# ---------------------------------------------------------------------------

def cmd_rebalance(args) -> int:
    path = Path(args.instance)
    if not path.is_file():
        raise rb.RebalanceError(f"instance file not found: {path}")
    text = path.read_text()
    if rb.is_network_text(text):
        network = rb.parse_network(text)
    else:
        snaps, adjacency = rb.parse_instance(text)
        network = rb.build_network(snaps, adjacency)
    solution = rb.solve_mcf(network)
    plan = rb.extract_plan(network, solution.flows)
    if args.internal_only:
        plan = plan.internal_only()
    out = _write(Path(args.out) if args.out else default_out_dir() / "plan.json",
                 json.dumps(plan.to_dict(), indent=1, sort_keys=True) + "\n")
    outputs = [out]
    if args.dump_network:
        outputs.append(_write(Path(args.dump_network), network.to_text()))
    write_manifest(out.with_name(out.name + ".manifest.json"), "rebalance",
                   {"internal_only": args.internal_only, "big_m": network.big_m}, [path], outputs)
    print(f"plan: {plan.total_internal} internal, {plan.total_external} external moves -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def _adjacency(args, regions: int) -> frozenset:
    if args.grid:
        try:
            rows, cols = (int(x) for x in args.grid.lower().split("x"))
        except ValueError:
            raise UsageError(f"grid must look like RxC, got {args.grid!r}") from None
        if rows * cols != regions:
            raise UsageError(f"a {rows}x{cols} grid does not have {regions} regions")
        return sim.grid_adjacency(rows, cols)
    if args.adjacency:
        pairs = []
        for lineno, raw in enumerate(Path(args.adjacency).read_text().splitlines(), 1):
            line = raw.split("#", 1)[0].split()
            if not line:
                continue
            if len(line) != 3 or line[0] != "adjacent":
                raise rb.RebalanceError(f"{args.adjacency} line {lineno}: expected 'adjacent i j'")
            pairs.append((int(line[1]), int(line[2])))
        adj = rb.symmetric_pairs(pairs)
        if any(not (1 <= i <= regions and 1 <= j <= regions) for i, j in adj):
            raise rb.RebalanceError("adjacency names a region outside the model")
        return frozenset(adj)
    return frozenset((i, j) for i in range(1, regions + 1) for j in range(1, regions + 1) if i != j)


def cmd_simulate(args) -> int:
    model = ingest.load_model(args.model)
    epoch = model.epoch
    table = ingest.read_trips(args.trips, model.regions, args.pickup_minutes, epoch=epoch)
    if table.errors:
        raise TripDataError("; ".join(table.errors))
    config = sim.SimConfig(
        window_minutes=model.window_minutes, delta=args.delta, p_ba=args.pba, seed=args.seed,
        regions=model.regions, adjacency=_adjacency(args, model.regions),
        compliance=not args.no_compliance, replications=args.replications)
    out_dir = Path(args.out) if args.out else default_out_dir()
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    if args.sweep:
        rows = sim.run_sweep(config, model, table.records, args.sweep, args.replications, args.jobs)
        outputs.append(_write(out_dir / "sweep.csv", sim.sweep_csv(rows)))
    runs = sim.run_replications(config, model, table.records, args.replications, args.jobs)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["seed"] + sim.CSV_COLUMNS)
    for m in runs:
        for line in m.to_csv().splitlines()[1:]:
            w.writerow([m.seed] + line.split(","))
    outputs.append(_write(out_dir / "metrics.csv", buf.getvalue()))
    agg = sim.aggregate(config.p_ba, config.delta, runs)
    summary = {"runs": [m.summary() for m in runs],
               "aggregate": {k: (round(v, 6) if isinstance(v, float) else v)
                             for k, v in agg.__dict__.items()}}
    outputs.append(_write(out_dir / "summary.json", json.dumps(summary, indent=1, sort_keys=True) + "\n"))
    echo = {"delta": args.delta, "pba": args.pba, "replications": args.replications,
            "sweep": args.sweep, "compliance": config.compliance,
            "window_minutes": config.window_minutes, "regions": config.regions,
            "adjacency": sorted(list(p) for p in config.adjacency),
            "rebalance_points": list(config.rebalance_points)}
    write_manifest(out_dir / "manifest.json", "simulate", echo,
                   [Path(args.model), Path(args.trips)], outputs, args.seed)
    print(f"simulated {len(runs)} run(s); blocked fraction {agg.blocked_fraction:.6f} -> {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bookahead", description="Supply management with book-ahead rides.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("calibrate", help="calibrate demand and service per region-window")
    c.add_argument("trips")
    c.add_argument("--regions", type=_positive_int, required=True)
    c.add_argument("--window-minutes", type=float, default=20.0)
    c.add_argument("--horizon", help="A..B in minutes since the epoch, or ISO timestamps")
    c.add_argument("--pickup-minutes", type=float, default=0.0)
    c.add_argument("--strict", action="store_true", help="fail on any malformed row")
    c.add_argument("--out")
    c.set_defaults(func=cmd_calibrate)

    t = sub.add_parser("targets", help="target drivers per region-window")
    t.add_argument("model")
    t.add_argument("--delta", type=_delta, required=True)
    t.add_argument("--pba", type=_fraction, default=0.0)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--jobs", type=_positive_int, default=1)
    t.add_argument("--out")
    t.set_defaults(func=cmd_targets)

    r = sub.add_parser("rebalance", help="solve one rebalancing instance")
    r.add_argument("instance")
    r.add_argument("--internal-only", action="store_true", help="drop external additions/removals")
    r.add_argument("--dump-network", help="also write the transformed network")
    r.add_argument("--out")
    r.set_defaults(func=cmd_rebalance)

    s = sub.add_parser("simulate", help="simulate windows, optionally sweeping the book-ahead fraction")
    s.add_argument("model")
    s.add_argument("trips")
    s.add_argument("--delta", type=_delta, required=True)
    s.add_argument("--pba", type=_fraction, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--sweep", type=_fractions)
    s.add_argument("--replications", type=_positive_int, default=1)
    s.add_argument("--no-compliance", action="store_true")
    s.add_argument("--grid", help="rook adjacency on an RxC grid of regions")
    s.add_argument("--adjacency", help="file with 'adjacent i j' lines")
    s.add_argument("--pickup-minutes", type=float, default=0.0)
    s.add_argument("--jobs", type=_positive_int, default=1)
    s.add_argument("--out", help=f"output directory (default ${OUT_ENV} or .)")
    s.set_defaults(func=cmd_simulate)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (rb.InfeasibleError, sim.SimulationError) as exc:
        print(f"error: infeasible or failed run: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (UsageError, TripDataError, rb.RebalanceError, SpecError, sp.ProfileError,
            ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
