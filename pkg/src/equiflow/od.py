"""Entropy model of the origin-destination matrix as an entropy-linear program.

The most-likely OD matrix consistent with zone marginals and travel costs
minimizes <c, x> + gamma * sum x ln x over the simplex subject to row and
column sums.  The dual in the constraint multipliers is smooth with a
closed-form softmax primal map; it is minimized by the same adaptive
accelerated method used elsewhere, with primal iterates recovered as a
step-weighted average and certified by value gap plus marginal residual.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .solvers import (
    EntropySimplexProx,
    EuclideanProx,
    FunctionOracle,
    SmoothOracle,
    umt_minimize,
)


class UnsupportedRegimeError(ValueError):
    """Requested parameters fall outside the supported solver regime."""


@dataclass
class ElpProblem:
    """Entropy-linear program over the flattened, mass-normalized matrix.

    Constraints: all row sums, plus all but the last column sum (the
    dropped one is implied by the simplex normalization and balance).
    """

    cost: np.ndarray        # (n_rows * n_cols,) flattened
    A: np.ndarray           # constraints x marginals
    b: np.ndarray
    gamma: float
    shape: tuple
    mass: float

    @property
    def n(self):
        return self.cost.size


def build_elp(L, W, T, gamma) -> ElpProblem:
    """Normalize marginals to unit mass and assemble the constraint system."""
    L = np.asarray(L, dtype=float)
    W = np.asarray(W, dtype=float)
    T = np.asarray(T, dtype=float)
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    if np.any(L <= 0) or np.any(W <= 0):
        raise ValueError("marginals must be positive")
    mass = L.sum()
    if not math.isclose(mass, W.sum(), rel_tol=1e-9):
        raise ValueError(f"unbalanced marginals: {mass} vs {W.sum()}")
    nr, nc = len(L), len(W)
    if T.shape != (nr, nc):
        raise ValueError(f"cost matrix shape {T.shape} != ({nr}, {nc})")
    n = nr * nc
    rows = nr + nc - 1
    A = np.zeros((rows, n))
    b = np.empty(rows)
    for i in range(nr):
        A[i, i * nc:(i + 1) * nc] = 1.0
        b[i] = L[i] / mass
    for j in range(nc - 1):
        A[nr + j, j::nc] = 1.0
        b[nr + j] = W[j] / mass
    return ElpProblem(cost=T.ravel().copy(), A=A, b=b, gamma=float(gamma),
                      shape=(nr, nc), mass=mass)


class ElpDualOracle(SmoothOracle):
    """Smooth dual in the constraint multipliers y.

    value = <y, b> + gamma * log-sum-exp of (-(c + A^T y)/gamma);
    gradient = b - A x(y) with x(y) the softmax of the same logits.
    """

    def __init__(self, problem: ElpProblem):
        self.p = problem
        self.last_x = None

    def _logits(self, y):
        return -(self.p.cost + self.p.A.T @ y) / self.p.gamma

    def primal(self, y):
        logits = self._logits(y)
        z = logits - logits.max()
        e = np.exp(z)
        return e / e.sum()

    def value(self, y):
        logits = self._logits(y)
        m = logits.max()
        return float(y @ self.p.b) + self.p.gamma * (m + math.log(np.exp(logits - m).sum()))

    def value_grad(self, y):
        logits = self._logits(y)
        m = logits.max()
        e = np.exp(logits - m)
        s = e.sum()
        x = e / s
        self.last_x = x
        value = float(y @ self.p.b) + self.p.gamma * (m + math.log(s))
        return value, self.p.b - self.p.A @ x


def elp_dual_oracle(problem: ElpProblem, y):
    """(value, gradient, primal softmax point) of the dual at y."""
    oracle = ElpDualOracle(problem)
    value, grad = oracle.value_grad(np.asarray(y, dtype=float))
    return value, grad, oracle.last_x


def primal_value(problem: ElpProblem, x):
    x = np.asarray(x, dtype=float)
    pos = x > 0
    return float(problem.cost @ x) + problem.gamma * float(
        np.sum(x[pos] * np.log(x[pos]))
    )


@dataclass
class ElpSolution:
    matrix: np.ndarray
    potentials: np.ndarray
    gap: float
    residual: float
    gamma: float
    converged: bool
    solver: object = None
    extra: dict = field(default_factory=dict)


def solve_entropy_od(L, W, T, gamma, eps=1e-8, eps_residual=1e-6,
                     max_iter=100000, l0=1.0) -> ElpSolution:
    """Certified OD matrix from marginals L, W and cost matrix T.

    Minimizes the smooth dual; the reported matrix is the step-weighted
    average of the softmax primal points, accepted only once both the
    primal-dual value gap and the marginal residual are within tolerance.
    """
    problem = build_elp(L, W, T, gamma)
    oracle = ElpDualOracle(problem)
    prox = EuclideanProx()
    y0 = np.zeros(problem.A.shape[0])
    # tolerances act on the unit-mass problem so the rescaled matrix obeys
    # the caller's residual tolerance
    scale = max(problem.mass, 1.0)
    eps_n = eps / scale
    eps_res_n = eps_residual / scale

    acc = np.zeros(problem.n)
    state_best = {"x": None, "cert": math.inf, "gap": math.nan, "res": math.nan}

    def on_step(state):
        acc[:] += state.alpha * oracle.last_x

    def stop(state):
        x = acc / state.A
        gap = oracle.value(state.x) + primal_value(problem, x)
        res = float(np.linalg.norm(problem.A @ x - problem.b))
        state.report.gap_trace.append(gap)
        cert = max(gap / eps_n, res / eps_res_n)
        if cert < state_best["cert"]:
            state_best.update(cert=cert, x=x.copy(), gap=gap, res=res)
        if gap <= eps_n and res <= eps_res_n:
            return "certified"
        return None

    y, rep = umt_minimize(
        oracle, prox, y0, eps_n, mu=0.0, max_iter=max_iter, l0=l0,
        stop=stop, callback=on_step,
    )
    x = state_best["x"]
    converged = rep.termination == "certified"
    return ElpSolution(
        matrix=(x * problem.mass).reshape(problem.shape),
        potentials=y,
        gap=state_best["gap"] * problem.mass,
        residual=state_best["res"] * problem.mass,
        gamma=float(gamma),
        converged=converged,
        solver=rep,
        extra={"dropped_constraint": "last column marginal", "mass": problem.mass},
    )


def balancing_oracle(L, W, T, gamma, tol=1e-12, max_iter=100000):
    """Alternating row/column scaling of exp(-T/gamma) to both marginals.

    Independent verification route; returns (matrix, converged).
    """
    L = np.asarray(L, dtype=float)
    W = np.asarray(W, dtype=float)
    K = np.exp(-np.asarray(T, dtype=float) / gamma)
    u = np.ones(len(L))
    v = np.ones(len(W))
    converged = False
    for _ in range(max_iter):
        u = L / (K @ v)
        v = W / (K.T @ u)
        d = (u[:, None] * K) * v[None, :]
        if (np.abs(d.sum(axis=1) - L).max() <= tol
                and np.abs(d.sum(axis=0) - W).max() <= tol):
            converged = True
            break
    return (u[:, None] * K) * v[None, :], converged


def entropy_regression_simplex(A, b, mu, eps, max_iter=100000, l0=1.0):
    """Minimize 0.5*|Ax - b|^2 + mu * sum x ln x over the simplex.

    Supported only in the small-entropy regime 0 < mu < eps/(2 ln n),
    where the entropy term rides along as a composite of the entropic
    prox; larger mu needs a strongly-convex treatment (see regularize
    and restart_wrapper) and is rejected.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    n = A.shape[1]
    if n < 2:
        raise ValueError("simplex dimension must be at least 2")
    limit = eps / (2.0 * math.log(n))
    if not 0.0 < mu < limit:
        raise UnsupportedRegimeError(
            f"entropy weight {mu} outside supported range (0, {limit:.3g}); "
            "use the regularize/restart combinators for the strongly convex regime"
        )
    oracle = FunctionOracle(
        lambda x: 0.5 * float(np.sum((A @ x - b) ** 2)),
        lambda x: A.T @ (A @ x - b),
    )
    prox = EntropySimplexProx(n, entropy_weight=mu)
    x, rep = umt_minimize(
        oracle, prox, prox.center, eps, mu=0.0, max_iter=max_iter, l0=l0,
        r2=math.log(n),
    )
    return x, rep
