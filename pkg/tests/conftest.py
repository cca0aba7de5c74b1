"""Shared fixtures: classic tiny networks, instance writers, enumeration oracle."""

import math

import numpy as np
import pytest

from equiflow import EdgeCostModel, LevelGraph, Network


def linear_edge(t_small=1e-6):
    """Near-linear cost: time ~ flow, strongly convex conjugate."""
    return EdgeCostModel("bpr", t_free=t_small, capacity=1.0, bpr_gain=1.0 / t_small,
                         bpr_power=1.0)


def fixed_edge(cost):
    """Constant-cost edge (zero gain pins its time)."""
    return EdgeCostModel("bpr", t_free=cost, capacity=1.0, bpr_gain=0.0, bpr_power=1.0)


@pytest.fixture
def pigou_network():
    """Two parallel routes: fixed cost 1 vs cost ~ flow; equilibrium (0, 1)."""
    lg = LevelGraph(2, plain_edges=[(0, 1, fixed_edge(1.0)), (0, 1, linear_edge())])
    return Network([lg], {(0, 1): 1.0})


def braess_network(with_shortcut):
    """4-node diamond; the near-free shortcut worsens equilibrium cost 1.5 -> 2."""
    edges = [
        (0, 1, linear_edge()),
        (1, 3, fixed_edge(1.0)),
        (0, 2, fixed_edge(1.0)),
        (2, 3, linear_edge()),
    ]
    if with_shortcut:
        edges.append((1, 2, fixed_edge(1e-6)))
    return Network([LevelGraph(4, plain_edges=edges)], {(0, 3): 1.0})


@pytest.fixture
def sd_two_link():
    """Capacitated link (t_free 1, cap 1) plus uncapacitated backup (t_free 2).

    Demand 2 fills the capacitated link exactly; its time rises to 2 with
    congestion multiplier 1.
    """
    e1 = EdgeCostModel("sd", t_free=1.0, capacity=1.0)
    e2 = EdgeCostModel("sd", t_free=2.0, capacity=math.inf)
    return Network([LevelGraph(2, plain_edges=[(0, 1, e1), (0, 1, e2)])], {(0, 1): 2.0})


PIGOU_INSTANCE = """\
# two parallel routes, one unit of demand
1 0 1 bpr 1.0 1.0 0.0 1.0
1 0 1 bpr 1e-6 1.0 1e6 1.0
od 1 0 1 1.0
"""

BRAESS_SHORTCUT_INSTANCE = """\
1 0 1 bpr 1e-6 1.0 1e6 1.0
1 1 3 bpr 1.0 1.0 0.0 1.0
1 0 2 bpr 1.0 1.0 0.0 1.0
1 2 3 bpr 1e-6 1.0 1e6 1.0
1 1 2 bpr 1e-6 1.0 0.0 1.0
od 1 0 3 1.0
"""

BRAESS_BASE_INSTANCE = """\
1 0 1 bpr 1e-6 1.0 1e6 1.0
1 1 3 bpr 1.0 1.0 0.0 1.0
1 0 2 bpr 1.0 1.0 0.0 1.0
1 2 3 bpr 1e-6 1.0 1e6 1.0
od 1 0 3 1.0
"""

SD_TWO_LINK_INSTANCE = """\
1 0 1 sd 1.0 1.0
1 0 1 sd 2.0 inf
od 1 0 1 2.0
"""


def write_instance(path, text):
    path.write_text(text, encoding="utf-8")
    return str(path)


def enumerate_walks(graph, origin, dest, hops):
    """All edge-index walks origin -> dest of at most `hops` edges."""
    walks = []

    def rec(v, trail):
        if trail and v == dest:
            walks.append(list(trail))
        if len(trail) == hops:
            return
        for e in range(graph.n_edges):
            if graph.tails[e] == v:
                trail.append(e)
                rec(graph.heads[e], trail)
                trail.pop()

    rec(origin, [])
    return walks


def enumerated_softmin(graph, weights, origin, dest, gamma, hops):
    """(value, edge flows per unit demand) by explicit walk enumeration."""
    walks = enumerate_walks(graph, origin, dest, hops)
    lens = np.array([sum(weights[e] for e in w) for w in walks])
    m = lens.min()
    z = np.exp(-(lens - m) / gamma)
    value = m - gamma * math.log(z.sum())
    probs = z / z.sum()
    flows = np.zeros(graph.n_edges)
    for w, p in zip(walks, probs):
        for e in w:
            flows[e] += p
    return value, flows


def random_network(rng, m=1, gamma=1.0):
    """Small random connected instance for property checks."""
    levels = []
    for k in range(m):
        n = int(rng.integers(4, 8))
        edges = []
        # a guaranteed 0 -> n-1 path plus random extras
        for v in range(n - 1):
            edges.append((v, v + 1, _random_model(rng)))
        for _ in range(int(rng.integers(2, 7))):
            a, b = rng.integers(0, n, size=2)
            if a != b:
                edges.append((int(a), int(b), _random_model(rng)))
        levels.append(LevelGraph(n, plain_edges=edges, gamma=gamma))
    if m == 2:
        inner_n = levels[1].n_vertices
        levels[0].nested_edges.append((0, levels[0].n_vertices - 1, (0, inner_n - 1)))
        # invalidate cached index arrays built before the append
        levels[0] = LevelGraph(
            levels[0].n_vertices, levels[0].plain_edges, levels[0].nested_edges, gamma
        )
    demands = {(0, levels[0].n_vertices - 1): float(rng.uniform(0.5, 2.0))}
    return Network(levels, demands)


def _random_model(rng):
    return EdgeCostModel(
        "bpr",
        t_free=float(rng.uniform(0.5, 2.0)),
        capacity=float(rng.uniform(0.5, 3.0)),
        bpr_gain=float(rng.uniform(0.1, 1.0)),
        bpr_power=float(rng.choice([0.25, 0.5, 1.0])),
    )
