"""Independent reference computations used to check the package.

Each oracle is deliberately naive: grids, direct summation, general-purpose
quadrature, exhaustive enumeration or a generic LP solver.
"""

from __future__ import annotations

import itertools
import math

import mpmath
import numpy as np
from scipy import integrate, optimize


def indicator_count(rides, t):
    return sum(1 for s, e in rides if s <= t < e)


def grid(lo, hi, step):
    n = int(round((hi - lo) / step))
    return lo + step * np.arange(1, n + 1)


def rho_quad(t, ws, rate, cdf, breaks=()):
    """Integrate rate * (1 - G(t - x)) over [ws, t] with scipy's adaptive quad."""
    if t <= ws:
        return 0.0
    pts = sorted({t - b for b in breaks if ws < t - b < t})
    val, _ = integrate.quad(lambda x: rate * (1.0 - cdf(t - x)), ws, t, points=pts or None,
                            limit=500, epsabs=1e-13, epsrel=1e-12)
    return val


def poisson_tail_sum(mean, k):
    """P(X >= k) as one minus the directly summed pmf below k."""
    if k <= 0:
        return 1.0
    term, head = math.exp(-mean), 0.0
    for j in range(k):
        head += term
        term *= mean / (j + 1)
    return max(0.0, 1.0 - head)


def poisson_tail_mp(mean, k, dps=50):
    """High-precision tail via the regularized incomplete gamma in mpmath."""
    if k <= 0:
        return mpmath.mpf(1)
    with mpmath.workdps(dps):
        return mpmath.gammainc(k, 0, mean, regularized=True)


def poisson_tail_head_sum(mean, k):
    """Tail as 1 - sum of pmf, using mpmath to avoid cancellation."""
    if k <= 0:
        return 1.0
    with mpmath.workdps(40):
        head = mpmath.fsum(mpmath.exp(-mean) * mpmath.mpf(mean) ** j / mpmath.factorial(j) for j in range(k))
        return float(1 - head)


def admit_bruteforce(rides, c, tau, dur, window, step=0.01):
    """Admission rule checked point by point on a grid of ``step`` minutes.

    Times are converted to integer grid units so the indicator comparisons are
    exact; inputs must lie on the grid.  The span is ``[tau, tau + dur)``, or
    ``[tau, window_end]`` when the ride outlives the window.
    """
    unit = lambda x: int(round(x / step))  # noqa: E731
    spans = [(unit(s), unit(e)) for s, e in rides]
    t0, t1, we = unit(tau), unit(tau + dur), unit(window[1])
    last = t1 - 1 if t1 <= we else we
    for t in range(t0, last + 1):
        if 1 + sum(1 for s, e in spans if s <= t < e) > c:
            return False
    return True


# ---------------------------------------------------------------------------
# rebalancing oracles
# ---------------------------------------------------------------------------

def imbalance_delta(a, e, c):
    short = c - (a + e)
    return -short if short > 0 else min(e, -short)


def enumerate_rebalance(regions, idle, delta, edges, big_m):
    """Minimum of sum h_ij + M sum |h_i| over integral h_ij with sum_j h_ij <= e_i.

    ``h_i`` is fixed by conservation once the internal moves are chosen.
    Returns (cost, internal, external) of a cheapest plan.
    """
    out_arcs = {i: [j for (a, j) in edges if a == i] for i in regions}
    options = []
    for i in regions:
        deg = len(out_arcs[i])
        opts = [v for v in itertools.product(range(idle[i] + 1), repeat=deg) if sum(v) <= idle[i]]
        options.append(np.array(opts, dtype=np.int64).reshape(len(opts), deg))
    sizes = [len(o) for o in options]
    idx = np.indices(sizes).reshape(len(sizes), -1)
    n_plans = idx.shape[1]
    pos = {i: k for k, i in enumerate(regions)}
    out = np.zeros((n_plans, len(regions)), dtype=np.int64)
    inn = np.zeros_like(out)
    for k, i in enumerate(regions):
        chosen = options[k][idx[k]]
        if chosen.shape[1] == 0:
            continue
        out[:, k] = chosen.sum(axis=1)
        for col, j in enumerate(out_arcs[i]):
            inn[:, pos[j]] += chosen[:, col]
    d = np.array([delta[i] for i in regions], dtype=np.int64)
    external = np.abs(d[None, :] - out + inn).sum(axis=1)
    internal = out.sum(axis=1)
    cost = internal + big_m * external
    best = int(np.argmin(cost))
    return int(cost[best]), int(internal[best]), int(external[best])


def lp_min_cost(network):
    """LP relaxation of a flow network solved with scipy's HiGHS."""
    nodes = network.nodes
    pos = {n: k for k, n in enumerate(nodes)}
    m = len(network.arcs)
    A = np.zeros((len(nodes), m))
    for k, a in enumerate(network.arcs):
        A[pos[a.tail], k] += 1
        A[pos[a.head], k] -= 1
    b = np.array([network.balance[n] for n in nodes], dtype=float)
    cost = np.array([a.cost for a in network.arcs], dtype=float)
    bounds = [(0, a.capacity) for a in network.arcs]
    res = optimize.linprog(cost, A_eq=A, b_eq=b, bounds=bounds, method="highs")
    return res


def internal_only_feasible(network):
    """Is there a flow using no source or sink arc other than the slack arc?"""
    from bookahead.rebalance import SINK, SOURCE
    nodes = network.nodes
    pos = {n: k for k, n in enumerate(nodes)}
    A = np.zeros((len(nodes), len(network.arcs)))
    bounds = []
    for k, a in enumerate(network.arcs):
        A[pos[a.tail], k] += 1
        A[pos[a.head], k] -= 1
        external = (a.tail == SOURCE) != (a.head == SINK)
        bounds.append((0, 0) if external else (0, a.capacity))
    b = np.array([network.balance[n] for n in nodes], dtype=float)
    res = optimize.linprog(np.zeros(len(network.arcs)), A_eq=A, b_eq=b, bounds=bounds, method="highs")
    return res.status == 0
