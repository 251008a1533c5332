"""Idle-driver rebalancing as a min-cost flow on a transformed region network.

Each region ``i`` becomes two nodes: ``i`` carries the region's imbalance and
``i*`` fans idle drivers out to adjacent regions.  The arc ``i -> i*`` costs one
unit per driver and is capped by the idle count, which enforces that only idle
drivers leave.  A source ``SO`` and sink ``SI`` add or remove drivers through
arcs of cost ``M``; the direct arc ``SO -> SI`` absorbs whatever internal moves
already balance out.
"""

from __future__ import annotations

import heapq
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional

SOURCE = "SO"
SINK = "SI"


class RebalanceError(ValueError):
    """Malformed snapshot, adjacency or instance."""


class InfeasibleError(RuntimeError):
    """The flow program has no feasible solution."""


@dataclass(frozen=True)
class RegionSnapshot:
    region: int
    active: int
    idle: int
    target: int

    def __post_init__(self):
        if min(self.active, self.idle, self.target) < 0:
            raise RebalanceError(f"negative count in snapshot {self}")


@dataclass(frozen=True)
class Imbalance:
    virtual_supply: int
    virtual_demand: int
    delta: int


def imbalance(snap: RegionSnapshot) -> Imbalance:
    shortfall = snap.target - (snap.active + snap.idle)
    if shortfall > 0:
        return Imbalance(0, shortfall, -shortfall)
    supply = min(snap.idle, -shortfall)
    return Imbalance(supply, 0, supply)


@dataclass(frozen=True)
class Arc:
    tail: str
    head: str
    cost: int
    capacity: Optional[int]  # None is unbounded


@dataclass
class FlowNetwork:
    nodes: list[str]
    balance: dict[str, int]
    arcs: list[Arc]
    big_m: int = 0
    regions: list[int] = field(default_factory=list)

    def arc_index(self) -> dict[tuple[str, str], int]:
        return {(a.tail, a.head): k for k, a in enumerate(self.arcs)}

    def to_text(self) -> str:
        lines = ["# node <name> <balance>", "# arc <tail> <head> <cost> <capacity|inf>"]
        lines += [f"node {n} {self.balance[n]}" for n in self.nodes]
        for a in self.arcs:
            cap = "inf" if a.capacity is None else str(a.capacity)
            lines.append(f"arc {a.tail} {a.head} {a.cost} {cap}")
        return "\n".join(lines) + "\n"


def star(region: int) -> str:
    return f"{region}*"


def default_big_m(deltas: Iterable[int]) -> int:
    deltas = list(deltas)
    return 1 + len(deltas) * (sum(abs(d) for d in deltas) + 1)


def symmetric_pairs(pairs: Iterable[tuple[int, int]]) -> set[tuple[int, int]]:
    out = set()
    for i, j in pairs:
        out.add((i, j))
        out.add((j, i))
    return out


def build_network(snapshots: list[RegionSnapshot], adjacency: Iterable[tuple[int, int]],
                  big_m: Optional[int] = None) -> FlowNetwork:
    regions = [s.region for s in snapshots]
    if len(set(regions)) != len(regions):
        raise RebalanceError("duplicate region in snapshots")
    known = set(regions)
    edges = set(adjacency)
    for i, j in edges:
        if i not in known or j not in known:
            raise RebalanceError(f"adjacency ({i}, {j}) names an unknown region")
        if i == j:
            raise RebalanceError(f"self-loop adjacency ({i}, {j})")
        if (j, i) not in edges:
            raise RebalanceError(f"adjacency is not symmetric: ({i}, {j}) without ({j}, {i})")

    snaps = sorted(snapshots, key=lambda s: s.region)
    imb = {s.region: imbalance(s) for s in snaps}
    if big_m is None:
        big_m = default_big_m(v.delta for v in imb.values())

    nodes = [str(s.region) for s in snaps] + [star(s.region) for s in snaps] + [SOURCE, SINK]
    balance = {n: 0 for n in nodes}
    for s in snaps:
        balance[str(s.region)] = imb[s.region].delta
    balance[SOURCE] = sum(v.virtual_demand for v in imb.values())
    balance[SINK] = -sum(v.virtual_supply for v in imb.values())

    arcs = []
    for s in snaps:
        arcs.append(Arc(str(s.region), star(s.region), 1, s.idle))
    for i, j in sorted(edges):
        arcs.append(Arc(star(i), str(j), 0, None))
    for s in snaps:
        arcs.append(Arc(SOURCE, str(s.region), big_m, None))
    for s in snaps:
        arcs.append(Arc(str(s.region), SINK, big_m, None))
    arcs.append(Arc(SOURCE, SINK, 0, None))
    order = {n: k for k, n in enumerate(nodes)}
    arcs.sort(key=lambda a: (order[a.tail], order[a.head]))
    return FlowNetwork(nodes, balance, arcs, big_m, [s.region for s in snaps])


@dataclass
class FlowSolution:
    flows: list[int]
    cost: int


def solve_mcf(network: FlowNetwork) -> FlowSolution:
    """Successive shortest paths with Dijkstra on reduced costs.

    All arc costs must be nonnegative, so zero potentials start valid.  Ties are
    broken by node and arc order, which makes the optimum reproducible.
    """
    nodes = network.nodes
    index = {n: k for k, n in enumerate(nodes)}
    total = sum(network.balance.values())
    if total != 0:
        raise InfeasibleError(f"node balances sum to {total}, not 0")
    demand = sum(b for b in network.balance.values() if b > 0)
    unbounded = demand + 1
    n = len(nodes) + 2
    src, snk = n - 2, n - 1
    # residual graph as parallel lists: head, capacity, cost, reverse edge position
    graph: list[list[list[int]]] = [[] for _ in range(n)]

    def add(u: int, v: int, cap: int, cost: int) -> tuple[int, int]:
        graph[u].append([v, cap, cost, len(graph[v])])
        graph[v].append([u, 0, -cost, len(graph[u]) - 1])
        return u, len(graph[u]) - 1

    handles = []
    for a in network.arcs:
        if a.cost < 0:
            raise RebalanceError("arc costs must be nonnegative")
        cap = unbounded if a.capacity is None else a.capacity
        if cap < 0:
            raise RebalanceError("arc capacities must be nonnegative")
        handles.append((add(index[a.tail], index[a.head], cap, a.cost), cap))
    for name in nodes:
        b = network.balance[name]
        if b > 0:
            add(src, index[name], b, 0)
        elif b < 0:
            add(index[name], snk, -b, 0)

    potential = [0] * n
    sent = 0
    inf = float("inf")
    while sent < demand:
        dist = [inf] * n
        prev: list[Optional[tuple[int, int]]] = [None] * n
        dist[src] = 0
        heap = [(0, src)]
        while heap:
            d, u = heapq.heappop(heap)
            if d > dist[u]:
                continue
            for k, (v, cap, cost, _) in enumerate(graph[u]):
                if cap <= 0:
                    continue
                nd = d + cost + potential[u] - potential[v]
                if nd < dist[v]:
                    dist[v] = nd
                    prev[v] = (u, k)
                    heapq.heappush(heap, (nd, v))
        if dist[snk] == inf:
            raise InfeasibleError(f"only {sent} of {demand} units of supply can reach demand")
        for v in range(n):
            if dist[v] < inf:
                potential[v] += dist[v]
        push = demand - sent
        v = snk
        while v != src:
            u, k = prev[v]
            push = min(push, graph[u][k][1])
            v = u
        v = snk
        while v != src:
            u, k = prev[v]
            edge = graph[u][k]
            edge[1] -= push
            graph[v][edge[3]][1] += push
            v = u
        sent += push

    flows = [cap - graph[u][k][1] for (u, k), cap in handles]
    cost = sum(f * a.cost for f, a in zip(flows, network.arcs))
    return FlowSolution(flows, cost)


def check_flow(network: FlowNetwork, flows: list[int]) -> None:
    """Raise if ``flows`` break conservation or capacity constraints."""
    if len(flows) != len(network.arcs):
        raise RebalanceError("flow vector does not match the arcs")
    net = defaultdict(int)
    for f, a in zip(flows, network.arcs):
        if f < 0 or (a.capacity is not None and f > a.capacity):
            raise RebalanceError(f"flow {f} violates capacity of {a}")
        net[a.tail] += f
        net[a.head] -= f
    for name in network.nodes:
        if net[name] != network.balance[name]:
            raise RebalanceError(f"conservation fails at {name}: {net[name]} != {network.balance[name]}")


def has_negative_cycle(network: FlowNetwork, flows: list[int]) -> bool:
    """Bellman-Ford on the residual graph; optimal flows admit no negative cycle."""
    index = {n: k for k, n in enumerate(network.nodes)}
    residual = []
    for f, a in zip(flows, network.arcs):
        u, v = index[a.tail], index[a.head]
        if a.capacity is None or f < a.capacity:
            residual.append((u, v, a.cost))
        if f > 0:
            residual.append((v, u, -a.cost))
    dist = [0] * len(network.nodes)
    for _ in range(len(network.nodes)):
        changed = False
        for u, v, c in residual:
            if dist[u] + c < dist[v]:
                dist[v] = dist[u] + c
                changed = True
        if not changed:
            return False
    return True


@dataclass
class RebalancePlan:
    moves: dict[tuple[int, int], int] = field(default_factory=dict)
    add: dict[int, int] = field(default_factory=dict)
    remove: dict[int, int] = field(default_factory=dict)
    slack: int = 0
    cost: int = 0

    @property
    def total_internal(self) -> int:
        return sum(self.moves.values())

    @property
    def total_external(self) -> int:
        return sum(self.add.values()) + sum(self.remove.values())

    def outflow(self, region: int) -> int:
        return sum(h for (i, _), h in self.moves.items() if i == region)

    def internal_only(self) -> RebalancePlan:
        """The same moves with external additions and removals dropped."""
        return RebalancePlan(dict(self.moves), {}, {}, 0, self.total_internal)

    def to_dict(self) -> dict:
        return {
            "moves": [{"from": i, "to": j, "drivers": h} for (i, j), h in sorted(self.moves.items())],
            "add": {str(i): h for i, h in sorted(self.add.items())},
            "remove": {str(i): h for i, h in sorted(self.remove.items())},
            "slack": self.slack,
            "total_internal": self.total_internal,
            "total_external": self.total_external,
            "cost": self.cost,
        }


def extract_plan(network: FlowNetwork, flows: list[int]) -> RebalancePlan:
    check_flow(network, flows)
    x = {(a.tail, a.head): f for a, f in zip(network.arcs, flows)}
    plan = RebalancePlan(slack=x.get((SOURCE, SINK), 0))
    plan.cost = sum(f * a.cost for f, a in zip(flows, network.arcs))
    for r in network.regions:
        fan_in = x.get((str(r), star(r)), 0)
        fan_out = 0
        for (tail, head), f in x.items():
            if tail == star(r):
                fan_out += f
                if f:
                    plan.moves[(r, int(head))] = f
        if fan_in != fan_out:
            raise RebalanceError(f"region {r}: {fan_in} drivers leave but {fan_out} are routed")
        if x.get((SOURCE, str(r)), 0):
            plan.add[r] = x[(SOURCE, str(r))]
        if x.get((str(r), SINK), 0):
            plan.remove[r] = x[(str(r), SINK)]
    return plan


def plan_rebalance(snapshots: list[RegionSnapshot], adjacency: Iterable[tuple[int, int]],
                   external: bool = True) -> RebalancePlan:
    """Solve one rebalancing instant.

    With ``external=False`` only the idle-driver moves are kept; the program is
    still solved with the source and sink arcs so it stays feasible.
    """
    network = build_network(snapshots, adjacency)
    solution = solve_mcf(network)
    plan = extract_plan(network, solution.flows)
    return plan if external else plan.internal_only()


def apply_plan(snapshots: list[RegionSnapshot], plan: RebalancePlan,
               moves: bool = True, external: bool = True) -> dict[int, int]:
    """Idle counts per region after carrying out (parts of) a plan."""
    idle = {s.region: s.idle for s in snapshots}
    if moves:
        for (i, j), h in plan.moves.items():
            idle[i] -= h
            idle[j] += h
    if external:
        for i, h in plan.add.items():
            idle[i] += h
        for i, h in plan.remove.items():
            idle[i] -= h
    for r, e in idle.items():
        if e < 0:
            raise RebalanceError(f"plan leaves region {r} with {e} idle drivers")
    return idle


# ---------------------------------------------------------------------------
# plain-text formats
# ---------------------------------------------------------------------------

def parse_instance(text: str) -> tuple[list[RegionSnapshot], set[tuple[int, int]]]:
    """``region <id> <active> <idle> <target>`` and ``adjacent <i> <j>`` lines."""
    snaps, pairs = [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if parts[0] == "region" and len(parts) == 5:
                snaps.append(RegionSnapshot(*(int(p) for p in parts[1:])))
            elif parts[0] == "adjacent" and len(parts) == 3:
                pairs.append((int(parts[1]), int(parts[2])))
            else:
                raise RebalanceError(f"unrecognised line: {raw!r}")
        except (ValueError, RebalanceError) as exc:
            raise RebalanceError(f"line {lineno}: {exc}") from None
    if not snaps:
        raise RebalanceError("instance has no region lines")
    return snaps, symmetric_pairs(pairs)


def format_instance(snapshots: list[RegionSnapshot], adjacency: Iterable[tuple[int, int]]) -> str:
    lines = ["# region <id> <active> <idle> <target>"]
    lines += [f"region {s.region} {s.active} {s.idle} {s.target}" for s in sorted(snapshots, key=lambda s: s.region)]
    lines += [f"adjacent {i} {j}" for i, j in sorted(adjacency) if i < j]
    return "\n".join(lines) + "\n"


def parse_network(text: str) -> FlowNetwork:
    """Inverse of :meth:`FlowNetwork.to_text`."""
    nodes, balance, arcs = [], {}, []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if parts[0] == "node" and len(parts) == 3:
                nodes.append(parts[1])
                balance[parts[1]] = int(parts[2])
            elif parts[0] == "arc" and len(parts) == 5:
                cap = None if parts[4] == "inf" else int(parts[4])
                arcs.append(Arc(parts[1], parts[2], int(parts[3]), cap))
            else:
                raise RebalanceError(f"unrecognised line: {raw!r}")
        except ValueError as exc:
            raise RebalanceError(f"line {lineno}: {exc}") from None
    for a in arcs:
        if a.tail not in balance or a.head not in balance:
            raise RebalanceError(f"arc {a.tail}->{a.head} names an unknown node")
    regions = sorted(int(n) for n in nodes if n.isdigit())
    big_m = max((a.cost for a in arcs if a.tail == SOURCE), default=0)
    return FlowNetwork(nodes, balance, arcs, big_m, regions)


def is_network_text(text: str) -> bool:
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            return line.startswith("node ") or line.startswith("arc ")
    return False


def snapshots_from_counts(active: Mapping[int, int], idle: Mapping[int, int],
                          target: Mapping[int, int]) -> list[RegionSnapshot]:
    return [RegionSnapshot(r, active[r], idle[r], target[r]) for r in sorted(target)]
