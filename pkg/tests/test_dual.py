"""Dual objective oracle, certificates, and equilibrium solves."""

import math

import numpy as np
import pytest

from equiflow import (
    DualOracle,
    EdgeCostModel,
    FlowState,
    LevelGraph,
    Network,
    StochasticDualOracle,
    bpr_cost,
    capacity_violation,
    complementarity_residual,
    dual_value_grad,
    duality_gap,
    frank_wolfe_gap,
    solve_assignment,
    solve_multistage,
    stochastic_origin_oracle,
    umt_stochastic,
)

from conftest import braess_network, fixed_edge, linear_edge, random_network


def two_origin_network():
    lg = LevelGraph(3, plain_edges=[
        (0, 2, EdgeCostModel("bpr", 1.0, 1.0, 0.5, 0.5)),
        (0, 1, EdgeCostModel("bpr", 0.5, 2.0, 0.3, 1.0)),
        (1, 2, EdgeCostModel("bpr", 1.0, 1.0, 0.4, 0.25)),
    ])
    return Network([lg], {(0, 2): 1.0, (1, 2): 2.0})


class TestDualOracle:
    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(21)
        for _ in range(5):
            net = random_network(rng, gamma=0.5)
            t = net.free_flow_times() + rng.uniform(0.05, 0.8, size=net.n_times)
            _, grad, _ = dual_value_grad(net, t)
            h = 1e-5
            for e in range(net.n_times):
                tp, tm = t.copy(), t.copy()
                tp[e] += h
                tm[e] -= h
                vp = DualOracle(net).value(tp)
                vm = DualOracle(net).value(tm)
                fd = (vp - vm) / (2 * h)
                assert abs(fd - grad[e]) <= 1e-5 * max(1.0, abs(grad[e]))

    def test_gradient_at_free_flow_is_negated_loading(self, pigou_network):
        # conjugate derivatives vanish at free-flow times, leaving -flows
        net = pigou_network
        t = net.free_flow_times()
        _, grad, flow = dual_value_grad(net, t)
        assert grad == pytest.approx(-flow.plain_flat(), abs=1e-12)

    def test_value_convex_along_segment(self):
        rng = np.random.default_rng(22)
        net = random_network(rng, gamma=0.5)
        oracle = DualOracle(net)
        base = net.free_flow_times()
        a = base + rng.uniform(0.05, 1.0, size=net.n_times)
        b = base + rng.uniform(0.05, 1.0, size=net.n_times)
        mid = 0.5 * (a + b)
        assert oracle.value(mid) <= 0.5 * (oracle.value(a) + oracle.value(b)) + 1e-10

    def test_strong_convexity_detected_for_linear_costs(self, pigou_network):
        # free edge: linear cost, curvature capacity/(gain * t_free) = 1;
        # the fixed-cost edge is pinned and does not cap the bound
        assert DualOracle(pigou_network).strong_convexity() == pytest.approx(1.0)

    def test_strong_convexity_zero_with_fractional_power(self):
        rng = np.random.default_rng(23)
        net = random_network(rng)  # powers drawn from {0.25, 0.5, 1.0}
        kinds = {m.bpr_power for m in net.cost_models}
        if kinds != {1.0}:
            assert DualOracle(net).strong_convexity() == 0.0

    def test_prox_box_pins_fixed_edges(self, pigou_network):
        prox = DualOracle(pigou_network).prox()
        assert prox.upper[0] == prox.lower[0] == 1.0  # fixed-cost edge
        assert math.isinf(prox.upper[1])


class TestDualityGap:
    def test_zero_when_times_match_costs(self):
        rng = np.random.default_rng(24)
        net = random_network(rng)
        f = rng.uniform(0.1, 2.0, size=net.n_times)
        t = np.array([bpr_cost(m, fi) for m, fi in zip(net.cost_models, f)])
        _, total = duality_gap(net, t, f)
        assert abs(total) <= 1e-10

    def test_terms_nonnegative(self):
        rng = np.random.default_rng(25)
        for _ in range(10):
            net = random_network(rng)
            f = rng.uniform(0.0, 2.0, size=net.n_times)
            t = net.free_flow_times() + rng.uniform(0.0, 1.0, size=net.n_times)
            terms, _ = duality_gap(net, t, f)
            assert terms.min() >= -1e-12

    def test_sd_term_uses_capped_flow(self, sd_two_link):
        net = sd_two_link
        terms, _ = duality_gap(net, np.array([1.5, 2.0]), np.array([1.3, 0.7]))
        # capacitated edge: (t - t_free) * (cap - min(f, cap)) = 0.5 * 0
        assert terms[0] == pytest.approx(0.0, abs=1e-15)
        assert terms[1] == 0.0  # infinite capacity contributes nothing
        assert capacity_violation(net, np.array([1.3, 0.7])) == pytest.approx(0.3)
        assert complementarity_residual(net, [1.5, 2.0], [0.5, 1.5]) == pytest.approx(0.25)


class TestBeckmannSolve:
    def test_pigou_equilibrium(self, pigou_network):
        rep = solve_assignment(pigou_network, model="beckmann", eps=1e-9)
        assert rep.converged
        f = rep.flows.plain_flat()
        assert f[0] == pytest.approx(0.0, abs=1e-4)
        assert f[1] == pytest.approx(1.0, abs=1e-4)
        assert rep.total_time == pytest.approx(1.0, abs=1e-3)
        assert rep.fw_gap <= 1e-9

    def test_braess_costs(self):
        rep = solve_assignment(braess_network(True), model="beckmann", eps=1e-9)
        assert rep.converged
        assert rep.total_time == pytest.approx(2.0, abs=1e-4)
        base = solve_assignment(braess_network(False), model="beckmann", eps=1e-9)
        assert base.total_time == pytest.approx(1.5, abs=1e-4)

    def test_mirror_descent_variant(self, pigou_network):
        rep = solve_assignment(pigou_network, model="beckmann_md", eps=1e-3,
                               max_iter=50000)
        assert rep.converged
        f = rep.flows.plain_flat()
        assert f[1] == pytest.approx(1.0, abs=0.05)
        assert frank_wolfe_gap(pigou_network, f) <= 1e-3

    def test_stochastic_model_certifies_fenchel_gap(self, pigou_network):
        rep = solve_assignment(pigou_network, model="stochastic", eps=1e-6,
                               gammas=[0.2])
        assert rep.converged
        assert rep.total_gap <= 1e-6

    def test_multilevel_rejected_for_single_level_models(self):
        rng = np.random.default_rng(26)
        net = random_network(rng, m=2)
        with pytest.raises(ValueError):
            solve_assignment(net, model="beckmann")


class TestStableDynamicsSolve:
    def test_two_link_certificates(self, sd_two_link):
        rep = solve_assignment(sd_two_link, model="stable_dynamics", eps=1e-6)
        assert rep.converged
        assert rep.total_gap <= 1e-6
        assert rep.capacity_violation <= 1e-6
        assert rep.complementarity <= 1e-5
        f = rep.flows.plain_flat()
        assert f[0] == pytest.approx(1.0, abs=1e-3)
        assert f[1] == pytest.approx(1.0, abs=1e-3)
        # both links equalize at time 2; congestion multiplier 1 on link 1
        assert rep.t[0] == pytest.approx(2.0, abs=2e-2)
        assert rep.multipliers[0] == pytest.approx(1.0, abs=2e-2)

    def test_total_time_nonincreasing_in_capacity(self):
        times = []
        for cap in (0.8, 1.0, 1.5):
            e1 = EdgeCostModel("sd", 1.0, cap)
            e2 = EdgeCostModel("sd", 2.0, math.inf)
            net = Network([LevelGraph(2, plain_edges=[(0, 1, e1), (0, 1, e2)])],
                          {(0, 1): 2.0})
            rep = solve_assignment(net, model="stable_dynamics", eps=1e-6)
            assert rep.converged
            times.append(rep.total_time)
        assert times[0] >= times[1] - 1e-4 >= times[2] - 2e-4


class TestStochasticOracle:
    def test_full_support_batch_matches_deterministic(self):
        net = two_origin_network()
        t = net.free_flow_times() + 0.3
        _, grad, _ = dual_value_grad(net, t)
        # origins drawn exactly at their demand shares (1:2): the
        # inverse-probability reweighting cancels and the estimate is exact
        est = stochastic_origin_oracle(net, t, [0, 1, 1])
        assert est == pytest.approx(grad, abs=1e-12)

    def test_single_origin_draw_is_exact(self, pigou_network):
        t = pigou_network.free_flow_times() + 0.2
        _, grad, _ = dual_value_grad(pigou_network, t)
        est = stochastic_origin_oracle(pigou_network, t, [0])
        assert est == pytest.approx(grad, abs=1e-12)

    def test_monte_carlo_mean_unbiased(self):
        net = two_origin_network()
        oracle = StochasticDualOracle(net, variance_bound=1.0)
        t = net.free_flow_times() + 0.4
        _, grad = oracle.value_grad(t)
        rng = np.random.default_rng(0)
        n = 4000
        draws = np.array([oracle.stochastic_grad(t, rng, 1) for _ in range(n)])
        mean = draws.mean(axis=0)
        se = draws.std(axis=0, ddof=1) / math.sqrt(n)
        assert np.all(np.abs(mean - grad) <= 3 * se + 1e-12)

    def test_empty_batch_rejected(self, pigou_network):
        with pytest.raises(ValueError):
            stochastic_origin_oracle(pigou_network, [1.0, 1.0], [])

    def test_zero_variance_matches_deterministic_solver(self, pigou_network):
        det = solve_assignment(pigou_network, model="stochastic", gammas=[0.2],
                               eps=1e-6)
        sto = solve_assignment(pigou_network, model="stochastic", gammas=[0.2],
                               eps=1e-6, variance_bound=0.0)
        assert sto.converged
        assert np.array_equal(det.t, sto.t)
        assert np.array_equal(det.flows.plain_flat(), sto.flows.plain_flat())


class TestMultistage:
    def test_degenerate_nesting_matches_flat(self):
        # single inner edge: the nested edge prices exactly as a plain one
        inner = LevelGraph(2, plain_edges=[(0, 1, linear_edge())], gamma=0.3)
        outer = LevelGraph(
            2,
            plain_edges=[(0, 1, fixed_edge(1.0))],
            nested_edges=[(0, 1, (0, 1))],
            gamma=0.3,
        )
        nested_net = Network([outer, inner], {(0, 1): 1.0})
        flat = Network(
            [LevelGraph(2, plain_edges=[(0, 1, fixed_edge(1.0)), (0, 1, linear_edge())],
                        gamma=0.3)],
            {(0, 1): 1.0},
        )
        rep_n = solve_multistage(nested_net, eps=1e-8)
        rep_f = solve_assignment(flat, model="stochastic", eps=1e-8)
        assert rep_n.converged and rep_f.converged
        # plain edges flatten as [outer fixed, inner linear] in both layouts
        assert rep_n.flows.plain_flat() == pytest.approx(
            rep_f.flows.plain_flat(), abs=1e-4)

    def test_two_level_solve_certifies(self):
        rng = np.random.default_rng(27)
        net = random_network(rng, m=2, gamma=0.5)
        rep = solve_multistage(net, eps=1e-6)
        assert rep.converged
        assert rep.total_gap <= 1e-6
        # nested flows equal the inner-level demand they induce
        assert rep.flows.nested[0].sum() >= 0.0
