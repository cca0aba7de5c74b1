"""Multilevel transport network: edge cost models, conjugates, instance loading.

A network is an ordered stack of level graphs.  Edges of a level are either
"plain" (they carry a cost model and a travel-time variable) or "nested"
(their cost is the smoothed shortest-path value of an origin-destination
pair one level up).  Demands are attached to level-1 OD pairs only; demands
of deeper levels are induced by the flows on the nested edges that
reference them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

BPR = "bpr"
SD = "sd"


class NetworkError(Exception):
    pass


class ParseError(NetworkError):
    """Malformed instance file; carries the 1-based line number."""

    def __init__(self, lineno, message):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class ValidationError(NetworkError):
    """Inconsistent instance; lists every violation found."""

    def __init__(self, violations):
        super().__init__("; ".join(violations))
        self.violations = list(violations)


class OutOfDomainError(NetworkError):
    """Conjugate of a capacitated edge queried below its free-flow time."""


@dataclass(frozen=True)
class EdgeCostModel:
    """Per-edge cost family: BPR power law or its stable-dynamics limit."""

    kind: str
    t_free: float
    capacity: float = math.inf
    bpr_gain: float = 0.0
    bpr_power: float = 0.25

    def __post_init__(self):
        if self.kind not in (BPR, SD):
            raise ValueError(f"unknown cost kind {self.kind!r}")

    @property
    def pinned(self) -> bool:
        """True when the edge time is forced to stay at t_free.

        Holds for zero-gain BPR edges (constant cost) and uncapacitated
        SD edges; their conjugate is 0 at t_free and +inf above it.
        """
        if self.kind == BPR:
            return self.bpr_gain == 0.0
        return math.isinf(self.capacity)


def bpr_cost(model: EdgeCostModel, f: float) -> float:
    """Travel time t_free * (1 + gain * (f/capacity)**power) at flow f."""
    if model.kind != BPR:
        raise ValueError("bpr_cost requires a BPR edge")
    if f < 0:
        raise ValueError(f"negative flow {f}")
    if model.bpr_gain == 0.0:
        return model.t_free
    return model.t_free * (1.0 + model.bpr_gain * (f / model.capacity) ** model.bpr_power)


def bpr_integral(model: EdgeCostModel, f: float) -> float:
    """Closed-form integral of bpr_cost from 0 to f."""
    if model.kind != BPR:
        raise ValueError("bpr_integral requires a BPR edge")
    if f < 0:
        raise ValueError(f"negative flow {f}")
    if model.bpr_gain == 0.0:
        return model.t_free * f
    mu = model.bpr_power
    ratio = f / model.capacity
    return model.t_free * f + (
        model.t_free * model.bpr_gain * model.capacity / (1.0 + mu) * ratio ** (1.0 + mu)
    )


def bpr_conjugate(model: EdgeCostModel, t: float) -> tuple[float, float]:
    """Value and derivative of the convex conjugate of the BPR integral.

    The maximizing flow inverts the cost map, f(t) solves t = cost(f);
    integrating f over [t_free, t] gives the conjugate value
    mu/(1+mu) * f(t) * (t - t_free).  Returns (value, flow).
    """
    if model.kind != BPR:
        raise ValueError("bpr_conjugate requires a BPR edge")
    if t <= model.t_free:
        return 0.0, 0.0
    if model.bpr_gain == 0.0:
        # constant-cost edge: any flow is optimal once t exceeds t_free
        return math.inf, math.inf
    mu = model.bpr_power
    flow = model.capacity * ((t - model.t_free) / (model.bpr_gain * model.t_free)) ** (1.0 / mu)
    value = mu / (1.0 + mu) * flow * (t - model.t_free)
    return value, flow


def bpr_conjugate_curvature(model: EdgeCostModel, t: float) -> float:
    """Second derivative f'(t) of the BPR conjugate (0 at or below t_free)."""
    if t <= model.t_free or model.bpr_gain == 0.0:
        return 0.0
    mu = model.bpr_power
    g = model.bpr_gain * model.t_free
    return model.capacity / (mu * g) * ((t - model.t_free) / g) ** ((1.0 - mu) / mu)


def sd_conjugate(model: EdgeCostModel, t: float) -> tuple[float, float]:
    """Conjugate capacity*(t - t_free) of a stable-dynamics edge.

    Raises OutOfDomainError for t < t_free; solvers must keep the time
    vector inside the box [t_free, inf).
    """
    if model.kind != SD:
        raise ValueError("sd_conjugate requires an SD edge")
    if t < model.t_free:
        raise OutOfDomainError(f"t={t} below free-flow time {model.t_free}")
    return model.capacity * (t - model.t_free), model.capacity


def edge_integral(model: EdgeCostModel, f: float) -> float:
    """Cost integral sigma_e(f); +inf for SD flow above capacity."""
    if model.kind == BPR:
        return bpr_integral(model, f)
    if f > model.capacity:
        return math.inf
    return model.t_free * f


@dataclass(eq=False)
class LevelGraph:
    """Directed multigraph of one level.

    plain_edges:  (tail, head, EdgeCostModel)
    nested_edges: (tail, head, (origin, dest)) referencing an OD pair of
                  the next level.
    Edge indices run over plain edges first, then nested edges.
    """

    n_vertices: int
    plain_edges: list = field(default_factory=list)
    nested_edges: list = field(default_factory=list)
    gamma: float = 1.0

    @property
    def n_edges(self) -> int:
        return len(self.plain_edges) + len(self.nested_edges)

    @cached_property
    def tails(self) -> np.ndarray:
        return np.array(
            [e[0] for e in self.plain_edges] + [e[0] for e in self.nested_edges], dtype=np.intp
        )

    @cached_property
    def heads(self) -> np.ndarray:
        return np.array(
            [e[1] for e in self.plain_edges] + [e[1] for e in self.nested_edges], dtype=np.intp
        )

    @cached_property
    def in_edges(self) -> list:
        """Incoming edge-index array per vertex."""
        buckets = [[] for _ in range(self.n_vertices)]
        for idx, h in enumerate(self.heads):
            buckets[h].append(idx)
        return [np.array(b, dtype=np.intp) for b in buckets]


@dataclass(eq=False)
class Network:
    """Validated multilevel network with level-1 demands."""

    levels: list
    demands: dict  # (origin, dest) -> demand, level-1 only

    def __post_init__(self):
        violations = validate(self.levels, self.demands)
        if violations:
            raise ValidationError(violations)

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    @cached_property
    def plain_slices(self) -> list:
        """Slice of the flat time vector per level (plain edges only)."""
        slices, start = [], 0
        for lg in self.levels:
            stop = start + len(lg.plain_edges)
            slices.append(slice(start, stop))
            start = stop
        return slices

    @property
    def n_times(self) -> int:
        return self.plain_slices[-1].stop

    @cached_property
    def cost_models(self) -> list:
        """Flat list of EdgeCostModel aligned with the time vector."""
        return [e[2] for lg in self.levels for e in lg.plain_edges]

    def free_flow_times(self) -> np.ndarray:
        return np.array([m.t_free for m in self.cost_models])

    def gammas(self) -> list:
        return [lg.gamma for lg in self.levels]

    def origins(self) -> list:
        """Distinct level-1 origins in sorted order."""
        return sorted({o for (o, _) in self.demands})


def validate(levels, demands) -> list:
    """Collect every violation; an empty list means the instance is valid."""
    bad = []
    if not levels:
        return ["network has no levels"]
    m = len(levels)
    for k, lg in enumerate(levels, start=1):
        if lg.gamma < 0:
            bad.append(f"level {k}: negative gamma {lg.gamma}")
        for tail, head, model in lg.plain_edges:
            where = f"level {k} edge {tail}->{head}"
            if tail == head:
                bad.append(f"{where}: self-loop")
            if not (0 <= tail < lg.n_vertices and 0 <= head < lg.n_vertices):
                bad.append(f"{where}: vertex out of range")
            if not model.t_free > 0:
                bad.append(f"{where}: t_free must be positive")
            if not model.capacity > 0:
                bad.append(f"{where}: capacity must be positive")
            if model.kind == BPR:
                if math.isinf(model.capacity) and model.bpr_gain > 0:
                    bad.append(f"{where}: BPR edge needs a finite capacity")
                if model.bpr_gain < 0:
                    bad.append(f"{where}: negative bpr_gain")
                if not (0 < model.bpr_power <= 1):
                    bad.append(f"{where}: bpr_power outside (0, 1]")
        for tail, head, od in lg.nested_edges:
            where = f"level {k} nested edge {tail}->{head}"
            if k == m:
                bad.append(f"{where}: top level admits no nested edges")
                continue
            if tail == head:
                bad.append(f"{where}: self-loop")
            nxt = levels[k]  # level k+1, 0-based index k
            o, d = od
            if not (0 <= o < nxt.n_vertices and 0 <= d < nxt.n_vertices):
                bad.append(f"{where}: referenced OD {o}->{d} outside level {k + 1}")
            if o == d:
                bad.append(f"{where}: referenced OD is a self-pair")
    for (o, d), dem in demands.items():
        where = f"demand {o}->{d}"
        lg = levels[0]
        if not (0 <= o < lg.n_vertices and 0 <= d < lg.n_vertices):
            bad.append(f"{where}: vertex outside level 1")
        if o == d:
            bad.append(f"{where}: origin equals destination")
        if not dem > 0:
            bad.append(f"{where}: demand must be positive")
    if not demands:
        bad.append("no level-1 demands")
    return bad


@dataclass
class FlowState:
    """Edge flows per level, plain and nested separately indexed.

    plain[k] aligns with levels[k].plain_edges, nested[k] with
    levels[k].nested_edges.  path_flows is populated only on tiny
    instances by tests.
    """

    plain: list
    nested: list
    path_flows: dict | None = None

    @classmethod
    def zeros(cls, network: Network) -> "FlowState":
        return cls(
            plain=[np.zeros(len(lg.plain_edges)) for lg in network.levels],
            nested=[np.zeros(len(lg.nested_edges)) for lg in network.levels],
        )

    def plain_flat(self) -> np.ndarray:
        return np.concatenate(self.plain) if self.plain else np.zeros(0)

    def scaled(self, s: float) -> "FlowState":
        return FlowState(
            plain=[a * s for a in self.plain],
            nested=[a * s for a in self.nested],
        )


def _parse_float(token, lineno, what):
    if token == "inf":
        return math.inf
    try:
        return float(token)
    except ValueError:
        raise ParseError(lineno, f"bad {what} {token!r}") from None


def _parse_int(token, lineno, what):
    try:
        return int(token)
    except ValueError:
        raise ParseError(lineno, f"bad {what} {token!r}") from None


def load_network(path) -> Network:
    """Load the whitespace-separated edge-list format.

    Records (comments start with '#'):
      level tail head bpr t_free capacity gain power
      level tail head sd  t_free capacity [gain power]   (trailing fields ignored)
      level tail head nested o:d        references OD pair (o, d) one level up
      od level origin dest demand       level must be 1
      gamma level value                 optional smoothing scale per level
    """
    plain = {}   # level -> list
    nested = {}  # level -> list
    gammas = {}
    demands = {}
    max_vertex = {}

    def note_vertex(level, v):
        max_vertex[level] = max(max_vertex.get(level, -1), v)

    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tok = line.split()
            if tok[0] == "od":
                if len(tok) != 5:
                    raise ParseError(lineno, "od record needs: od level origin dest demand")
                level = _parse_int(tok[1], lineno, "level")
                if level != 1:
                    raise ParseError(lineno, "demands are only declared at level 1")
                o = _parse_int(tok[2], lineno, "origin")
                d = _parse_int(tok[3], lineno, "dest")
                dem = _parse_float(tok[4], lineno, "demand")
                if (o, d) in demands:
                    raise ParseError(lineno, f"duplicate demand for OD {o}->{d}")
                demands[(o, d)] = dem
                note_vertex(1, o)
                note_vertex(1, d)
                continue
            if tok[0] == "gamma":
                if len(tok) != 3:
                    raise ParseError(lineno, "gamma record needs: gamma level value")
                level = _parse_int(tok[1], lineno, "level")
                gammas[level] = _parse_float(tok[2], lineno, "gamma")
                continue
            if len(tok) < 5:
                raise ParseError(lineno, "edge record needs at least 5 fields")
            level = _parse_int(tok[0], lineno, "level")
            tail = _parse_int(tok[1], lineno, "tail")
            head = _parse_int(tok[2], lineno, "head")
            kind = tok[3]
            note_vertex(level, tail)
            note_vertex(level, head)
            if kind == "nested":
                ref = tok[4].split(":")
                if len(ref) != 2:
                    raise ParseError(lineno, "nested reference must look like o:d")
                o = _parse_int(ref[0], lineno, "nested origin")
                d = _parse_int(ref[1], lineno, "nested dest")
                nested.setdefault(level, []).append((tail, head, (o, d)))
                note_vertex(level + 1, o)
                note_vertex(level + 1, d)
            elif kind == BPR:
                if len(tok) != 8:
                    raise ParseError(lineno, "bpr record needs: level tail head bpr t_free capacity gain power")
                model = EdgeCostModel(
                    BPR,
                    t_free=_parse_float(tok[4], lineno, "t_free"),
                    capacity=_parse_float(tok[5], lineno, "capacity"),
                    bpr_gain=_parse_float(tok[6], lineno, "gain"),
                    bpr_power=_parse_float(tok[7], lineno, "power"),
                )
                plain.setdefault(level, []).append((tail, head, model))
            elif kind == SD:
                if len(tok) not in (6, 8):
                    raise ParseError(lineno, "sd record needs: level tail head sd t_free capacity")
                model = EdgeCostModel(
                    SD,
                    t_free=_parse_float(tok[4], lineno, "t_free"),
                    capacity=_parse_float(tok[5], lineno, "capacity"),
                )
                plain.setdefault(level, []).append((tail, head, model))
            else:
                raise ParseError(lineno, f"unknown edge kind {kind!r}")

    if not max_vertex:
        raise ParseError(0, "empty instance")
    n_levels = max(max_vertex)
    if sorted(set(plain) | set(nested)) != list(range(1, n_levels + 1)):
        raise ValidationError(
            [f"levels must be contiguous starting at 1, got {sorted(set(plain) | set(nested))}"]
        )
    levels = []
    for k in range(1, n_levels + 1):
        levels.append(
            LevelGraph(
                n_vertices=max_vertex.get(k, -1) + 1,
                plain_edges=plain.get(k, []),
                nested_edges=nested.get(k, []),
                gamma=gammas.get(k, 1.0),
            )
        )
    return Network(levels=levels, demands=demands)
