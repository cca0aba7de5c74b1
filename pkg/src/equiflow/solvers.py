"""First-order solvers: adaptive accelerated method, restarts, mirror descent.

The workhorse is an accelerated gradient method with a doubling line
search on the local Lipschitz estimate and an eps-slack in the exit test,
so it self-tunes to the smoothness of the objective (from nonsmooth to
Lipschitz-gradient) and tolerates inexact oracles.  Composite terms are
handled unlinearized through the prox setup's model-minimization step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class DivergedOracleError(RuntimeError):
    """Line-search Lipschitz estimate blew past the ceiling.

    Almost always means the oracle's gradient is inconsistent with its
    values.
    """


class SmoothOracle:
    """Value/gradient oracle; subclasses may declare inexactness or noise."""

    delta = 0.0
    variance_bound = None

    def value(self, x):
        raise NotImplementedError

    def value_grad(self, x):
        raise NotImplementedError

    def stochastic_grad(self, x, rng, batch):
        """Mean of `batch` independent unbiased gradient draws."""
        raise NotImplementedError


class FunctionOracle(SmoothOracle):
    def __init__(self, f, grad):
        self._f = f
        self._grad = grad

    def value(self, x):
        return self._f(x)

    def value_grad(self, x):
        return self._f(x), self._grad(x)


class EuclideanProx:
    """Half-squared-distance prox on a box, with an optional linear composite.

    Composite term: <linear, x> plus the indicator of [lower, upper].
    """

    omega_tilde = 1.0
    omega = 1.0

    def __init__(self, lower=None, upper=None, linear=None):
        self.lower = None if lower is None else np.asarray(lower, dtype=float)
        self.upper = None if upper is None else np.asarray(upper, dtype=float)
        self.linear = None if linear is None else np.asarray(linear, dtype=float)

    def recenter(self, _center):
        # the squared distance shifts trivially; box and linear term are kept
        return self

    def clip(self, x):
        if self.lower is not None or self.upper is not None:
            return np.clip(x, self.lower, self.upper)
        return x

    def bregman(self, x, z):
        d = np.asarray(x) - z
        return 0.5 * float(d @ d)

    def bregman_grad(self, x, z):
        return np.asarray(x) - z

    def norm_sq(self, d):
        return float(d @ d)

    def composite_value(self, x):
        return 0.0 if self.linear is None else float(self.linear @ x)

    def model_argmin(self, y0, G, S, mu_t, Y):
        """argmin V(x,y0) + <G,x> + (mu_t/2)(S|x|^2 - 2<Y,x>) + S*h(x)."""
        num = y0 - G
        if mu_t > 0.0:
            num = num + mu_t * Y
        if self.linear is not None:
            num = num - S * self.linear
        return self.clip(num / (1.0 + mu_t * S))

    def mirror_step(self, x, v):
        return self.clip(x - v)


class EntropySimplexProx:
    """Entropic prox on the probability simplex.

    Composite term: entropy_weight * sum x_k ln x_k.  Supports only
    mu = 0 model steps (the recentered KL loses its properties).
    """

    omega_tilde = None  # unbounded for KL; strongly convex runs need Euclidean

    def __init__(self, n, entropy_weight=0.0):
        self.n = n
        self.entropy_weight = float(entropy_weight)
        self.center = np.full(n, 1.0 / n)

    def bregman(self, x, z):
        x = np.asarray(x, dtype=float)
        pos = x > 0
        return float(np.sum(x[pos] * np.log(x[pos] / z[pos])))

    def norm_sq(self, d):
        return float(np.sum(np.abs(d))) ** 2

    def composite_value(self, x):
        if self.entropy_weight == 0.0:
            return 0.0
        x = np.asarray(x, dtype=float)
        pos = x > 0
        return self.entropy_weight * float(np.sum(x[pos] * np.log(x[pos])))

    def model_argmin(self, y0, G, S, mu_t, Y):
        if mu_t > 0.0:
            raise ValueError("entropic prox supports only mu = 0")
        logits = (np.log(y0) - G) / (1.0 + S * self.entropy_weight)
        return _softmax(logits)

    def mirror_step(self, x, v):
        return _softmax(np.log(np.maximum(x, 1e-300)) - v)


def _softmax(logits):
    z = logits - np.max(logits)
    e = np.exp(z)
    return e / e.sum()


@dataclass
class SolverReport:
    iterations: int = 0
    value_calls: int = 0
    grad_calls: int = 0
    stochastic_grad_calls: int = 0
    final_value: float = math.nan
    termination: str = ""
    value_trace: list = field(default_factory=list)
    lipschitz_trace: list = field(default_factory=list)
    alpha_trace: list = field(default_factory=list)
    gap_trace: list = field(default_factory=list)
    batch_trace: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)


@dataclass
class UmtState:
    """Solver internals exposed to stop tests and per-step callbacks."""

    k: int
    x: np.ndarray
    u: np.ndarray
    y: np.ndarray
    alpha: float
    A: float
    L: float
    fy: float
    gy: np.ndarray
    fx: float
    report: SolverReport = None


def umt_minimize(
    oracle,
    prox,
    y0,
    eps,
    mu=0.0,
    max_iter=100000,
    l0=1.0,
    r2=None,
    stop=None,
    callback=None,
    l_ceiling=1e18,
    rng=None,
    mini_batch=False,
):
    """Composite minimization by the adaptive accelerated triangle scheme.

    Each outer step halves the Lipschitz estimate, then doubles it until
    the model inequality (with slack alpha/(2A)*eps) holds; the step
    aggregate solves A_{k+1}(1 + A_k*mu_t) = L*alpha^2 exactly.  With
    r2 >= V(x*, y0) given, stops once r2/A <= eps/2, which certifies
    F(x) - F* <= eps.  `stop` may end the run early with a reason.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if mini_batch and oracle.variance_bound is None:
        raise ValueError("mini-batch run requires the oracle's variance bound")
    y0 = np.asarray(y0, dtype=float)
    if mu > 0.0:
        if prox.omega_tilde is None:
            raise ValueError("prox does not support strongly convex runs")
        mu_t = mu / prox.omega_tilde
    else:
        mu_t = 0.0
    rep = SolverReport()

    def full_grad(y, A_new, alpha, L):
        if mini_batch:
            D = oracle.variance_bound
            m = max(1, math.ceil(8.0 * D * A_new / (L * alpha * eps)))
            g = oracle.stochastic_grad(y, rng, m)
            rep.stochastic_grad_calls += m
            rep.batch_trace.append(m)
            fy = oracle.value(y)
            rep.value_calls += 1
            return fy, g
        rep.value_calls += 1
        rep.grad_calls += 1
        return oracle.value_grad(y)

    # initial line search: alpha0 = A0 = 1/L
    L = float(l0)
    f0, g0 = full_grad(y0, 1.0 / L, 1.0 / L, L)
    while True:
        alpha0 = 1.0 / L
        x0 = prox.model_argmin(y0, alpha0 * g0, alpha0, mu_t, alpha0 * y0)
        fx0 = oracle.value(x0)
        rep.value_calls += 1
        d = x0 - y0
        model = f0 + float(g0 @ d) + 0.5 * L * prox.norm_sq(d) + 0.5 * eps
        if model >= fx0:
            break
        L *= 2.0
        if L > l_ceiling:
            raise DivergedOracleError(f"initial L exceeded ceiling {l_ceiling}")
    A = 1.0 / L
    u = x0.copy()
    x = x0.copy()
    G = (1.0 / L) * g0
    Y = (1.0 / L) * y0
    rep.alpha_trace.append(1.0 / L)
    rep.lipschitz_trace.append(L)
    rep.value_trace.append(fx0 + prox.composite_value(x0))
    state = UmtState(k=0, x=x, u=u, y=y0, alpha=A, A=A, L=L, fy=f0, gy=g0, fx=fx0, report=rep)
    if callback is not None:
        callback(state)
    reason = None
    if stop is not None:
        reason = stop(state)
    if reason is None and r2 is not None and r2 / A <= 0.5 * eps:
        reason = "certified"

    k = 0
    while reason is None:
        k += 1
        if k > max_iter:
            reason = "max_iter"
            k -= 1
            break
        L = L / 2.0
        while True:
            base = (1.0 + A * mu_t) / (2.0 * L)
            alpha = base + math.sqrt(base * base + A * (1.0 + A * mu_t) / L)
            A_new = A + alpha
            y = (alpha * u + A * x) / A_new
            fy, gy = full_grad(y, A_new, alpha, L)
            u_new = prox.model_argmin(y0, G + alpha * gy, A_new, mu_t, Y + alpha * y)
            x_new = (alpha * u_new + A * x) / A_new
            fx = oracle.value(x_new)
            rep.value_calls += 1
            d = x_new - y
            model = fy + float(gy @ d) + 0.5 * L * prox.norm_sq(d) + alpha / (2.0 * A_new) * eps
            if model >= fx:
                break
            L *= 2.0
            if L > l_ceiling:
                raise DivergedOracleError(
                    f"line-search L exceeded ceiling {l_ceiling}; oracle inconsistent?"
                )
        A = A_new
        u = u_new
        x = x_new
        G = G + alpha * gy
        Y = Y + alpha * y
        rep.alpha_trace.append(alpha)
        rep.lipschitz_trace.append(L)
        rep.value_trace.append(fx + prox.composite_value(x))
        state = UmtState(k=k, x=x, u=u, y=y, alpha=alpha, A=A, L=L, fy=fy, gy=gy, fx=fx, report=rep)
        if callback is not None:
            callback(state)
        if stop is not None:
            reason = stop(state)
        if reason is None and r2 is not None and r2 / A <= 0.5 * eps:
            reason = "certified"

    rep.iterations = k
    rep.final_value = rep.value_trace[-1]
    rep.termination = reason
    return x, rep


def umt_stochastic(oracle, prox, y0, eps, mu=0.0, seed=0, **kwargs):
    """Mini-batch variant; batch sizes follow ceil(8*D*A/(L*alpha*eps)).

    With variance bound D = 0 the trajectory coincides with the
    deterministic method draw for draw.
    """
    if oracle.variance_bound is None:
        raise ValueError("stochastic run requires oracle.variance_bound")
    rng = np.random.default_rng(seed)
    return umt_minimize(oracle, prox, y0, eps, mu=mu, rng=rng, mini_batch=True, **kwargs)


class RegularizedOracle(SmoothOracle):
    """f(x) + mu * V(x, center) for a prox-aligned Bregman divergence."""

    def __init__(self, oracle, prox, center, mu):
        self.inner = oracle
        self.prox = prox
        self.center = np.asarray(center, dtype=float)
        self.mu = float(mu)
        self.variance_bound = oracle.variance_bound

    def value(self, x):
        return self.inner.value(x) + self.mu * self.prox.bregman(x, self.center)

    def value_grad(self, x):
        v, g = self.inner.value_grad(x)
        return (
            v + self.mu * self.prox.bregman(x, self.center),
            g + self.mu * self.prox.bregman_grad(x, self.center),
        )


def regularize(oracle, prox, y0, eps, r2):
    """Strongly convex surrogate with mu = eps/(2*r2).

    r2 must upper-bound V(x*, y0); an eps/2-solution of the surrogate is
    an eps-solution of the original problem.
    """
    if r2 <= 0:
        raise ValueError("r2 must be positive")
    mu = eps / (2.0 * r2)
    return RegularizedOracle(oracle, prox, y0, mu), mu


def restart_wrapper(
    oracle,
    prox,
    y0,
    mu,
    lipschitz,
    eps,
    restarts=None,
    r0_sq=None,
    callback=None,
    **umt_kwargs,
):
    """Geometric restarts for a mu-strongly-convex objective.

    Each leg runs the mu = 0 method for ceil(sqrt(16*L*omega/mu))
    iterations from the previous output and recenters the prox there;
    the objective gap halves per restart.  The restart count comes
    either from `restarts` or from r0_sq >= |y0 - x*|^2 and eps.
    """
    if mu <= 0:
        raise ValueError("restart schedule requires mu > 0")
    if restarts is None:
        if r0_sq is None:
            raise ValueError("give either restarts or r0_sq")
        restarts = max(0, math.ceil(math.log2(max(mu * r0_sq / eps, 1.0))))
    omega = getattr(prox, "omega", 1.0)
    n_inner = math.ceil(math.sqrt(16.0 * lipschitz * omega / mu))
    point = np.asarray(y0, dtype=float)
    total = SolverReport()
    for leg in range(restarts + 1):
        leg_prox = prox.recenter(point)
        point, rep = umt_minimize(
            oracle, leg_prox, point, eps, mu=0.0, max_iter=n_inner, **umt_kwargs
        )
        total.iterations += rep.iterations
        total.value_calls += rep.value_calls
        total.grad_calls += rep.grad_calls
        total.value_trace.append(rep.final_value)
        if callback is not None:
            callback(leg, point, rep)
    total.final_value = total.value_trace[-1]
    total.termination = f"{restarts} restarts of {n_inner} iterations"
    return point, total


@dataclass
class MirrorReport:
    iterations: int = 0
    productive: int = 0
    nonproductive: int = 0
    h_f: float = math.nan
    h_g: float = math.nan
    final_value: float = math.nan
    termination: str = ""
    step_trace: list = field(default_factory=list)


def mirror_descent_constrained(
    f_grad,
    prox,
    eps,
    M_f,
    M_g,
    N,
    x0,
    g_value=None,
    g_grad=None,
    rng=None,
    f_value=None,
):
    """Constrained (stochastic) mirror descent with literal step sizes.

    Productive steps (g(x) <= eps) move along the objective with
    h_f = eps/(M_f*M_g); the rest move along the constraint with
    h_g = eps/M_g**2.  Returns the average of productive iterates; with
    none, an infeasibility-suspected report and no point.
    """
    h_f = eps / (M_f * M_g)
    h_g = eps / (M_g * M_g)
    x = np.asarray(x0, dtype=float).copy()
    rep = MirrorReport(h_f=h_f, h_g=h_g)
    acc = np.zeros_like(x)
    for _ in range(N):
        if g_value is None or g_value(x) <= eps:
            acc += x
            rep.productive += 1
            rep.step_trace.append(h_f)
            x = prox.mirror_step(x, h_f * f_grad(x, rng))
        else:
            rep.nonproductive += 1
            rep.step_trace.append(h_g)
            x = prox.mirror_step(x, h_g * g_grad(x, rng))
    rep.iterations = N
    if rep.productive == 0:
        rep.termination = "infeasibility-suspected"
        return None, rep
    x_bar = acc / rep.productive
    rep.termination = "budget"
    if f_value is not None:
        rep.final_value = f_value(x_bar)
    return x_bar, rep
