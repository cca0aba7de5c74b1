"""Smoothed shortest paths: log-sum-exp potentials, Gibbs flows, hard routes.

The "path set" of an OD pair is the set of walks of at most H hops.  A
forward dynamic program computes, per origin, the soft-min potential
u_v = -gamma * log(sum over walks of exp(-length/gamma)); a backward
(adjoint) sweep over the same recursion yields the Gibbs edge flows,
which are the exact gradient of the demand-weighted soft-min value with
respect to the edge weights.  With gamma = 0 the same interfaces fall
back to hard shortest paths and all-or-nothing loading.
"""

from __future__ import annotations

import heapq
import math

import numpy as np

from .network import FlowState, LevelGraph, Network, NetworkError


class UnreachableError(NetworkError):
    """An OD pair has no walk within the hop bound."""

    def __init__(self, level, origin, dest, hops):
        super().__init__(
            f"level {level}: no walk from {origin} to {dest} within {hops} hops"
        )
        self.od = (origin, dest)


def _forward(graph: LevelGraph, weights, origin, gamma, hops):
    """Per-round potentials U[h][v] over walks of at most h hops."""
    n = graph.n_vertices
    tails, heads = graph.tails, graph.heads
    u = np.full(n, math.inf)
    u[origin] = 0.0
    rounds = [u]
    for _ in range(hops):
        cand = weights + u[tails]
        finite = np.isfinite(cand)
        shift = np.full(n, math.inf)
        np.minimum.at(shift, heads[finite], cand[finite])
        shift[origin] = min(shift[origin], 0.0)
        acc = np.zeros(n)
        np.add.at(acc, heads[finite], np.exp(-(cand[finite] - shift[heads[finite]]) / gamma))
        acc[origin] += math.exp(-(0.0 - shift[origin]) / gamma)
        nxt = np.full(n, math.inf)
        ok = acc > 0.0
        nxt[ok] = shift[ok] - gamma * np.log(acc[ok])
        rounds.append(nxt)
        u = nxt
    return rounds


def _backward(graph: LevelGraph, weights, gamma, rounds, sink_mass):
    """Adjoint sweep: route sink_mass backwards, returning edge flows."""
    tails, heads = graph.tails, graph.heads
    flows = np.zeros(graph.n_edges)
    p = sink_mass.astype(float).copy()
    for h in range(len(rounds) - 1, 0, -1):
        u_h, u_prev = rounds[h], rounds[h - 1]
        with np.errstate(invalid="ignore"):
            expo = u_h[heads] - weights - u_prev[tails]
        live = np.isfinite(expo) & (p[heads] > 0.0)
        contrib = np.zeros(graph.n_edges)
        contrib[live] = p[heads[live]] * np.exp(np.minimum(expo[live] / gamma, 0.0))
        flows += contrib
        p = np.zeros(graph.n_vertices)
        np.add.at(p, tails, contrib)
        # mass not propagated is absorbed by the empty walk at the origin
    return flows


def softmin_potentials(graph: LevelGraph, weights, origin, gamma, hops):
    """Soft-min potentials from origin over walks of at most `hops` hops.

    Unreachable vertices get +inf.  weights is a per-edge array aligned
    with the graph's edge indexing (plain edges first, then nested).
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive; use hard_shortest for gamma=0")
    if hops < 1:
        raise ValueError("hop bound must be at least 1")
    weights = np.asarray(weights, dtype=float)
    return _forward(graph, weights, origin, gamma, hops)[-1]


def softmin_flows(graph: LevelGraph, weights, demands, gamma, hops, level=1):
    """Aggregated soft-min value and its gradient (Gibbs edge flows).

    demands maps (origin, dest) to a positive demand.  Returns
    (value, flows) where value = sum_w d_w * u_dest and flows is the
    exact gradient of value with respect to the edge weights.
    """
    weights = np.asarray(weights, dtype=float)
    by_origin = {}
    for (o, d), dem in demands.items():
        by_origin.setdefault(o, []).append((d, dem))
    value = 0.0
    flows = np.zeros(graph.n_edges)
    for o in sorted(by_origin):
        rounds = _forward(graph, weights, o, gamma, hops)
        sink = np.zeros(graph.n_vertices)
        for d, dem in by_origin[o]:
            u = rounds[-1][d]
            if not math.isfinite(u):
                raise UnreachableError(level, o, d, hops)
            value += dem * u
            sink[d] += dem
        flows += _backward(graph, weights, gamma, rounds, sink)
    return value, flows


def hard_shortest(graph: LevelGraph, weights, origin, method="auto"):
    """Exact shortest-walk distances with a deterministic tie-break.

    Ties are resolved toward the lexicographically smallest
    (predecessor vertex, edge index) pair.  Returns (dist, pred_edge)
    with pred_edge = -1 at the origin and unreachable vertices.
    """
    weights = np.asarray(weights, dtype=float)
    if method == "auto":
        method = "dijkstra" if np.all(weights >= 0) else "bellman-ford"
    if method == "dijkstra" and np.any(weights < 0):
        raise ValueError("dijkstra requires nonnegative weights")
    n = graph.n_vertices
    tails, heads = graph.tails, graph.heads
    dist = np.full(n, math.inf)
    pred = np.full(n, n, dtype=np.intp)  # sentinel larger than any vertex
    pred_edge = np.full(n, -1, dtype=np.intp)
    dist[origin] = 0.0

    def relax(e):
        t, h = tails[e], heads[e]
        nd = dist[t] + weights[e]
        if nd < dist[h] or (nd == dist[h] and (t, e) < (pred[h], pred_edge[h])):
            improved = nd < dist[h]
            dist[h] = nd
            pred[h] = t
            pred_edge[h] = e
            return improved
        return False

    if method == "bellman-ford":
        out = [[] for _ in range(n)]
        for e, t in enumerate(tails):
            out[t].append(e)
        for _ in range(n - 1):
            changed = False
            for v in range(n):
                if math.isfinite(dist[v]):
                    for e in out[v]:
                        changed |= relax(e)
            if not changed:
                break
    elif method == "dijkstra":
        out = [[] for _ in range(n)]
        for e, t in enumerate(tails):
            out[t].append(e)
        heap = [(0.0, origin)]
        done = np.zeros(n, dtype=bool)
        while heap:
            d, v = heapq.heappop(heap)
            if done[v] or d > dist[v]:
                continue
            done[v] = True
            for e in out[v]:
                if relax(e):
                    heapq.heappush(heap, (dist[heads[e]], heads[e]))
    else:
        raise ValueError(f"unknown method {method!r}")
    pred_edge[origin] = -1
    return dist, pred_edge


def all_or_nothing(graph: LevelGraph, weights, demands, method="auto", level=1):
    """Load each OD's full demand on its tie-broken shortest path.

    Returns (value, flows): value = sum_w d_w * dist_w, flows a valid
    subgradient element of the hard-min aggregate.
    """
    weights = np.asarray(weights, dtype=float)
    by_origin = {}
    for (o, d), dem in demands.items():
        by_origin.setdefault(o, []).append((d, dem))
    value = 0.0
    flows = np.zeros(graph.n_edges)
    hops = graph.n_vertices - 1
    for o in sorted(by_origin):
        dist, pred_edge = hard_shortest(graph, weights, o, method=method)
        for d, dem in by_origin[o]:
            if not math.isfinite(dist[d]):
                raise UnreachableError(level, o, d, hops)
            value += dem * dist[d]
            v = d
            while v != o:
                e = pred_edge[v]
                flows[e] += dem
                v = graph.tails[e]
    return value, flows


def effective_weights(network: Network, t, gammas=None, hops=None):
    """Per-level edge weights with nested edges priced top-down.

    A nested edge of level k gets the (soft or hard) shortest-path value
    of its referenced OD pair in level k+1, computed with that level's
    smoothing scale.  Returns one weight array per level, aligned with
    the level's edge indexing.
    """
    t = np.asarray(t, dtype=float)
    gammas = list(network.gammas()) if gammas is None else list(gammas)
    hops = _hop_bounds(network, hops)
    m = network.n_levels
    weights = [None] * m
    for k in range(m - 1, -1, -1):
        lg = network.levels[k]
        plain_w = t[network.plain_slices[k]]
        if not lg.nested_edges:
            weights[k] = np.asarray(plain_w, dtype=float).copy()
            continue
        inner = network.levels[k + 1]
        refs = [od for (_, _, od) in lg.nested_edges]
        values = _od_values(
            inner, weights[k + 1], refs, gammas[k + 1], hops[k + 1], level=k + 2
        )
        weights[k] = np.concatenate([plain_w, values])
    return weights


def _od_values(graph, weights, od_pairs, gamma, hops, level):
    """Shortest-path (soft or hard) value per requested OD pair."""
    by_origin = {}
    for o, d in set(od_pairs):
        by_origin.setdefault(o, set()).add(d)
    table = {}
    for o in sorted(by_origin):
        if gamma > 0:
            u = softmin_potentials(graph, weights, o, gamma, hops)
        else:
            u, _ = hard_shortest(graph, weights, o)
        for d in by_origin[o]:
            if not math.isfinite(u[d]):
                raise UnreachableError(level, o, d, hops)
            table[(o, d)] = u[d]
    return np.array([table[od] for od in od_pairs])


def _hop_bounds(network, hops):
    if hops is None:
        return [lg.n_vertices - 1 for lg in network.levels]
    if np.isscalar(hops):
        return [int(hops)] * network.n_levels
    return list(hops)


def assignment_flows(network: Network, t, gammas=None, hops=None, demands=None):
    """Value and flows on every level for the current time vector.

    Level 1 is loaded with the network demands (or the `demands`
    override); deeper levels inherit the flows of the nested edges
    referencing them.  Levels with gamma > 0 use the Gibbs assignment
    (exact gradient); gamma = 0 levels use tie-broken all-or-nothing
    (a subgradient element).  Returns (value, FlowState) with value the
    level-1 aggregate.
    """
    gammas = list(network.gammas()) if gammas is None else list(gammas)
    hops = _hop_bounds(network, hops)
    weights = effective_weights(network, t, gammas, hops)
    flow = FlowState.zeros(network)
    demands = dict(network.demands if demands is None else demands)
    value = None
    for k, lg in enumerate(network.levels):
        if not demands:
            break
        if gammas[k] > 0:
            val, edge_flows = softmin_flows(lg, weights[k], demands, gammas[k], hops[k], level=k + 1)
        else:
            val, edge_flows = all_or_nothing(lg, weights[k], demands, level=k + 1)
        if k == 0:
            value = val
        n_plain = len(lg.plain_edges)
        flow.plain[k] = edge_flows[:n_plain]
        flow.nested[k] = edge_flows[n_plain:]
        demands = {}
        for j, (_, _, od) in enumerate(lg.nested_edges):
            f = flow.nested[k][j]
            if f > 0.0:
                demands[od] = demands.get(od, 0.0) + f
    return value, flow
