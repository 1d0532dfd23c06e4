import math

import pytest

from pathdpp import (INF, ControlFamily, CostFunctional, FiniteMeasureSet,
                     Path, PathMeasure, build_emm_family, constant_time,
                     dirac, dpp_rhs, epsilon_optimal_selector, expect,
                     hitting_time, make_state, singleton_family,
                     solve_backward, value, verify_dpp)
from pathdpp.dpp import _truncated_expect
from pathdpp.errors import HypothesisNotVerified
from tests.conftest import call_cost
from tests.test_cmf import symmetric_chain


class TestValue:
    def test_singleton_mean_value(self):
        states, fam = symmetric_chain()
        cost = CostFunctional.terminal(lambda s: float(s.factor == "a"))
        v = value(fam, cost)
        for x in fam.domain():
            mu = fam.measure_set(x).spanning()[0]
            assert v.get(x) == pytest.approx(expect(mu, cost))

    def test_binomial_call_third(self, binomial):
        fam = build_emm_family(binomial)
        v = value(fam, call_cost())
        assert v.get(binomial.states[0]) == pytest.approx(1 / 3, abs=1e-12)

    def test_zero_cost(self, trinomial2):
        fam = build_emm_family(trinomial2)
        v = value(fam, CostFunctional.terminal(lambda s: 0.0))
        assert all(v.get(x) == 0.0 for x in fam.domain())

    def test_sentinel_is_free(self, binomial):
        fam = build_emm_family(binomial)
        v = value(fam, call_cost())
        from pathdpp import IOTA
        assert v.get(IOTA) == 0.0


class TestRhs:
    def test_time_zero_recovers_value(self, trinomial):
        fam = build_emm_family(trinomial)
        cost = call_cost()
        v = value(fam, cost)
        x = trinomial.states[0]
        assert dpp_rhs(fam, cost, v, constant_time(0), x) == pytest.approx(
            v.get(x), abs=1e-12)

    def test_infinite_time_recovers_value(self, trinomial):
        fam = build_emm_family(trinomial)
        cost = call_cost()
        v = value(fam, cost)
        x = trinomial.states[0]
        assert dpp_rhs(fam, cost, v, constant_time(INF), x) == pytest.approx(
            v.get(x), abs=1e-12)

    def test_interior_time_on_tree(self, binomial2):
        fam = build_emm_family(binomial2)
        cost = call_cost()
        v = value(fam, cost)
        x = binomial2.states[0]
        assert dpp_rhs(fam, cost, v, constant_time(1), x) == pytest.approx(
            v.get(x), abs=1e-9)


class TestVerify:
    def test_singleton_gap_zero(self):
        states, fam = symmetric_chain()
        cost = CostFunctional.terminal(lambda s: float(s.factor == "a"))
        rep = verify_dpp(fam, cost)
        assert rep.gap == 0.0
        assert rep.passed()

    def test_emm_binomial(self, binomial2):
        times = [constant_time(t) for t in range(3)] + [
            constant_time(INF),
            hitting_time(lambda s: not s.is_iota and s.prices[0] >= 2.0)]
        fam = build_emm_family(binomial2, times=times)
        rep = verify_dpp(fam, call_cost())
        assert rep.gap <= 1e-7
        assert rep.passed()

    def test_hypotheses_enforced(self, violating_family):
        fam, x0, y = violating_family
        with pytest.raises(HypothesisNotVerified):
            verify_dpp(fam, call_cost())

    def test_one_sided_bound_without_stable_conditionals(self, violating_family):
        """Switch-closure alone bounds the value by the switching bound from
        below; the converse inequality needs admissible conditionals, and the
        constructed family breaks it with a strictly positive gap."""
        fam, x0, y = violating_family
        cost = call_cost()
        rep = verify_dpp(fam, cost, require_hypotheses=False)
        assert not rep.prechecks["disintegrability"]
        for e in rep.entries:
            assert e.lhs <= e.rhs + 1e-9
        assert rep.gap > 0.1
        assert rep.worst.state == x0

    def test_report_gap_recomputed_from_entries(self, binomial2):
        fam = build_emm_family(binomial2, times=[constant_time(1)])
        rep = verify_dpp(fam, call_cost())
        assert rep.gap == max(e.gap for e in rep.entries)


class TestEpsilonSelector:
    def test_extensional_exact_argmin(self, violating_family):
        fam, x0, y = violating_family
        cost = call_cost()
        sel = epsilon_optimal_selector(fam, cost, eps=1e-3)
        v = value(fam, cost)
        for x in fam.domain():
            assert expect(sel.kernel.at(x), cost) == pytest.approx(v.get(x))

    def test_binomial_unique_vertex(self, binomial):
        fam = build_emm_family(binomial)
        sel = epsilon_optimal_selector(fam, call_cost(), eps=1e-3)
        mu = sel.kernel.at(binomial.states[0])
        masses = sorted(mu.mass.values())
        assert masses == pytest.approx([1 / 3, 2 / 3])

    def test_trinomial_vertex_optimum(self, trinomial):
        fam = build_emm_family(trinomial)
        sel = epsilon_optimal_selector(fam, call_cost(), eps=1e-3)
        mu = sel.kernel.at(trinomial.states[0])
        v = value(fam, call_cost())
        assert expect(mu, call_cost()) <= v.get(trinomial.states[0]) + 1e-3

    def test_selector_never_hurts_by_more_than_eps(self, trinomial2):
        fam = build_emm_family(trinomial2, times=[constant_time(1)])
        cost = call_cost()
        eps = 1e-3
        sel = epsilon_optimal_selector(fam, cost, eps)
        v = value(fam, cost)
        from pathdpp import concat_measures
        for x in fam.domain():
            for mu in fam.measure_set(x).spanning(interior_samples=2):
                glued = concat_measures(mu, sel.kernel, constant_time(1))
                assert expect(glued, cost) <= expect(mu, cost) + eps or \
                    expect(glued, cost) <= v.get(x) + eps


class TestBackward:
    def test_depth_one_equals_value(self, trinomial):
        fam = build_emm_family(trinomial)
        cost = call_cost()
        assert solve_backward(fam, cost).get(trinomial.states[0]) == \
            pytest.approx(value(fam, cost).get(trinomial.states[0]), abs=1e-12)

    def test_depth_three_binomial_all_nodes(self):
        from pathdpp import binomial_market
        m = binomial_market(steps=3)
        fam = build_emm_family(m)
        cost = call_cost()
        bk = solve_backward(fam, cost)
        bf = value(fam, cost)
        # 15 tree nodes collapse onto 10 distinct states (prices recombine)
        assert len(m.states) == 15
        assert len(fam.domain()) == 10
        for x in fam.domain():
            assert bk.get(x) == pytest.approx(bf.get(x), abs=1e-7)

    def test_trinomial_lower_hedge_root_zero(self, trinomial):
        fam = build_emm_family(trinomial)
        assert solve_backward(fam, call_cost()).get(trinomial.states[0]) == \
            pytest.approx(0.0, abs=1e-12)

    def test_singleton_chains(self):
        states, fam = symmetric_chain()
        cost = CostFunctional.terminal(lambda s: float(s.factor == "a"))
        bk = solve_backward(fam, cost)
        bf = value(fam, cost)
        for x in fam.domain():
            assert bk.get(x) == pytest.approx(bf.get(x), abs=1e-12)


class TestNegativeInfinity:
    def test_truncation_route_agrees(self):
        x = make_state(1, [1.0])
        u, d = make_state(0, [2.0]), make_state(0, [0.5])
        fam = singleton_family({x: {u: 0.5, d: 0.5}}, horizon=1,
                               times=[constant_time(1)])
        cost = CostFunctional(
            lambda p: -INF if p.states[1].prices[0] > 1 else 0.0)
        v = value(fam, cost)
        assert v.get(x) == -INF
        tau = constant_time(1)
        plain = dpp_rhs(fam, cost, v, tau, x)
        floored = dpp_rhs(fam, cost, v, tau, x, truncated=True)
        assert plain == floored == -INF

    def test_truncated_expect_diverging_positive_part(self):
        x = make_state(1, [1.0])
        u, d = make_state(0, [2.0]), make_state(0, [0.5])
        mu = PathMeasure({Path((x, u)): 0.5, Path((x, d)): 0.5})
        fn = lambda p: INF if p.states[1] == u else -INF
        assert _truncated_expect(mu, fn) == INF

    def test_truncated_expect_finite(self):
        x = make_state(1, [1.0])
        u, d = make_state(0, [2.0]), make_state(0, [0.5])
        mu = PathMeasure({Path((x, u)): 0.25, Path((x, d)): 0.75})
        fn = lambda p: 4.0 if p.states[1] == u else -2.0
        assert _truncated_expect(mu, fn) == pytest.approx(-0.5)
