import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pathdpp import (INF, Kernel, Path, PathMeasure, abs_continuous,
                     concat_measures, conditional_shift, constant_time,
                     coordinate, density_process, dirac, equivalent, expect,
                     is_martingale, iota_path, make_state, partition_density,
                     product, shift)
from pathdpp.errors import NotAbsolutelyContinuous, NotAdapted
from pathdpp.measures import (cylinder_atoms, finest_partition_level,
                              stopped_distribution)


def two_atom_pair():
    a = make_state(1, [1.0])
    u, d = make_state(0, [2.0]), make_state(0, [0.5])
    up, down = Path((a, u)), Path((a, d))
    return up, down


class TestExpect:
    def test_point_mass(self):
        up, _ = two_atom_pair()
        assert expect(dirac(up), lambda p: 7.5) == 7.5

    def test_normalization(self):
        up, down = two_atom_pair()
        mu = PathMeasure({up: 0.5, down: 0.5})
        assert expect(mu, lambda p: 1.0) == 1.0

    def test_support_indicator(self):
        up, down = two_atom_pair()
        mu = PathMeasure({up: 0.25, down: 0.75})
        assert expect(mu, lambda p: 1.0 if mu(p) > 0 else 0.0) == 1.0

    def test_positive_part_dominates(self):
        up, down = two_atom_pair()
        mu = PathMeasure({up: 0.5, down: 0.5})
        fn = lambda p: INF if p == up else -INF
        assert expect(mu, fn) == INF

    def test_sentinel_costs_nothing(self):
        mu = dirac(iota_path(1))
        assert expect(mu, lambda p: 123.0) == 0.0


class TestMassValidation:
    def test_rejects_bad_total(self):
        up, down = two_atom_pair()
        with pytest.raises(ValueError):
            PathMeasure({up: 0.6, down: 0.5})

    def test_rejects_negative(self):
        up, down = two_atom_pair()
        with pytest.raises(ValueError):
            PathMeasure({up: 1.2, down: -0.2})

    def test_drops_zero_atoms(self):
        up, down = two_atom_pair()
        mu = PathMeasure({up: 1.0, down: 0.0})
        assert mu.support == [up]


class TestProductAndConcat:
    def test_product_masses(self, coin_measure):
        tau = constant_time(1)
        nu = conditional_shift(coin_measure, tau)
        joint = product(coin_measure, nu, tau)
        assert abs(sum(joint.values()) - 1.0) < 1e-12
        for (p, q), m in joint.items():
            x = coordinate(p, 1)
            assert m == pytest.approx(coin_measure(p) * nu.at(x)(q))

    def test_marginal_is_original(self, coin_measure):
        tau = constant_time(1)
        nu = conditional_shift(coin_measure, tau)
        marg = {}
        for (p, _), m in product(coin_measure, nu, tau).items():
            marg[p] = marg.get(p, 0.0) + m
        for p in coin_measure.support:
            assert marg[p] == pytest.approx(coin_measure(p))

    def test_infinite_time_keeps_measure(self, coin_measure):
        nu = Kernel({})
        out = concat_measures(coin_measure, nu, constant_time(INF))
        assert out.approx_equal(coin_measure)

    def test_deterministic_gluing(self):
        a = make_state(2, [1.0])
        b = make_state(1, [2.0])
        c = make_state(0, [3.0])
        head = dirac(Path((a, b, b)))
        nu = Kernel({b: dirac(Path((b, c, c)))})
        out = concat_measures(head, nu, constant_time(1))
        assert out.approx_equal(dirac(Path((a, b, c))))

    def test_reconstruction_identity(self, coin_measure):
        # restarting from the stopped-state conditionals reproduces the law
        for t in range(3):
            tau = constant_time(t)
            nu = conditional_shift(coin_measure, tau)
            out = concat_measures(coin_measure, nu, tau)
            assert out.approx_equal(coin_measure, atol=1e-12)

    def test_two_stage_expectation(self, coin_measure):
        # E over the glued law equals the staged evaluation
        tau = constant_time(1)
        nu = conditional_shift(coin_measure, tau)
        cost = lambda p: p.states[2].factor == "h" and 2.0 or 0.5
        lhs = expect(concat_measures(coin_measure, nu, tau), cost)
        g = {x: expect(nu.at(x), cost) for x in nu.domain()}
        rhs = expect(coin_measure, lambda p: g[coordinate(p, 1)])
        assert lhs == pytest.approx(rhs, abs=1e-12)


class TestConditionalShift:
    def test_dirac(self):
        up, _ = two_atom_pair()
        nu = conditional_shift(dirac(up), constant_time(1))
        x = coordinate(up, 1)
        assert nu.at(x).approx_equal(dirac(shift(up, 1)))

    def test_fair_coin_step_one(self, coin_states, coin_measure):
        # direct Bayes over the four paths
        s = coin_states
        nu = conditional_shift(coin_measure, constant_time(1))
        for eta in "hd":
            got = nu.at(s[(1, eta)])
            want = PathMeasure({
                Path((s[(1, eta)], s[(0, "h")], s[(0, "h")])): 0.5,
                Path((s[(1, eta)], s[(0, "d")], s[(0, "d")])): 0.5,
            })
            assert got.approx_equal(want, atol=1e-12)

    def test_expectation_reconstruction(self, coin_measure):
        tau = constant_time(1)
        nu = conditional_shift(coin_measure, tau)
        fn = lambda p: float(p.states[1].factor == "h") + 0.25
        lhs = expect(coin_measure, lambda p: fn(shift(p, 1)))
        rhs = 0.0
        for p, m in coin_measure.mass.items():
            rhs += m * expect(nu.at(coordinate(p, 1)), fn)
        assert lhs == pytest.approx(rhs, abs=1e-12)

    def test_default_kernel_fills_uncharged(self, coin_measure, coin_states):
        s = coin_states
        ghost = make_state(1, [99.0], "g")
        fallback = Kernel({ghost: dirac(Path((ghost, s[(0, "h")], s[(0, "h")])))})
        nu = conditional_shift(coin_measure, constant_time(1), default=fallback)
        assert ghost in nu.per_state


class TestAbsoluteContinuity:
    def test_reflexive(self, coin_measure):
        assert abs_continuous(coin_measure, coin_measure)

    def test_disjoint_diracs(self):
        up, down = two_atom_pair()
        assert not abs_continuous(dirac(up), dirac(down))

    def test_full_support_pair(self):
        up, down = two_atom_pair()
        q = PathMeasure({up: 2 / 3, down: 1 / 3})
        p = PathMeasure({up: 0.5, down: 0.5})
        assert abs_continuous(q, p) and equivalent(q, p)

    def test_strict_inclusion(self):
        up, down = two_atom_pair()
        q = dirac(up)
        p = PathMeasure({up: 0.5, down: 0.5})
        assert abs_continuous(q, p) and not abs_continuous(p, q)


def price_process(path, t):
    return coordinate(path, t).prices


class TestMartingaleTest:
    def test_constant_process(self, coin_measure):
        ok, _ = is_martingale(lambda p, t: 3.0, coin_measure)
        assert ok

    def test_binomial_balanced(self):
        up, down = two_atom_pair()
        q = PathMeasure({up: 1 / 3, down: 2 / 3})
        ok, _ = is_martingale(price_process, q)
        assert ok  # 2/3*2 + 1/3*... : 2*(1/3) + 0.5*(2/3) = 1

    def test_binomial_unbalanced_witness(self):
        up, down = two_atom_pair()
        q = PathMeasure({up: 0.5, down: 0.5})
        ok, witness = is_martingale(price_process, q)
        assert not ok
        s, t, prefix = witness
        assert (s, t) == (0, 1)
        assert prefix == up.prefix(0)  # the root event

    def test_not_adapted_rejected(self, coin_measure):
        peek = lambda p, t: float(p.states[2].factor == "h")
        with pytest.raises(NotAdapted):
            is_martingale(peek, coin_measure)

    def test_agrees_with_direct_recomputation(self, coin_measure):
        rng = np.random.default_rng(42)
        paths = coin_measure.support
        for _ in range(100):
            table = {}
            for p in paths:
                for t in range(3):
                    key = p.prefix(t)
                    if key not in table:
                        table[key] = float(rng.normal())
            proc = lambda p, t: table[p.prefix(t)]
            ok, _ = is_martingale(proc, coin_measure)
            assert ok == _direct_martingale(proc, coin_measure)


def _direct_martingale(proc, mu, atol=1e-9):
    """Independent check: one-step conditional means computed atom by atom."""
    paths = mu.support
    h = mu.horizon
    for t in range(h):
        for pre, members in cylinder_atoms(paths, t).items():
            mass = sum(mu(p) for p in members)
            if mass <= 0:
                continue
            mean_next = sum(mu(p) * proc(p, t + 1) for p in members) / mass
            here = proc(members[0], t)
            if abs(mean_next - here) > atol:
                return False
    return True


class TestDensityProcess:
    def test_equal_measures_constant_one(self, coin_measure):
        dp = density_process(coin_measure, coin_measure)
        for p in coin_measure.support:
            for t in range(3):
                assert dp.at(p, t) == pytest.approx(1.0)

    def test_one_step_ratios(self):
        up, down = two_atom_pair()
        q = PathMeasure({up: 2 / 3, down: 1 / 3})
        p = PathMeasure({up: 0.5, down: 0.5})
        dp = density_process(q, p)
        assert dp.at(up, 0) == 1.0
        assert dp.at(up, 1) == pytest.approx(4 / 3)
        assert dp.at(down, 1) == pytest.approx(2 / 3)

    def test_terminal_mass_one(self, coin_measure):
        rng = np.random.default_rng(3)
        w = rng.dirichlet(np.ones(4))
        q = PathMeasure(dict(zip(coin_measure.support, w)))
        dp = density_process(q, coin_measure)
        total = sum(coin_measure(p) * dp.at(p, 2) for p in coin_measure.support)
        assert total == pytest.approx(1.0, abs=1e-12)

    def test_requires_domination(self):
        up, down = two_atom_pair()
        with pytest.raises(NotAbsolutelyContinuous):
            density_process(PathMeasure({up: 0.5, down: 0.5}), dirac(up))

    def test_change_of_measure_on_martingales(self):
        # Y is a martingale under q exactly when Z*Y is one under p
        up, down = two_atom_pair()
        q = PathMeasure({up: 1 / 3, down: 2 / 3})
        p = PathMeasure({up: 0.5, down: 0.5})
        dp = density_process(q, p)
        for proc in [price_process, lambda pa, t: 1.0,
                     lambda pa, t: coordinate(pa, t).prices[0] ** 2]:
            under_q = is_martingale(proc, q)[0]
            weighted = lambda pa, t: dp.at(pa, t) * np.atleast_1d(proc(pa, t))
            under_p = is_martingale(weighted, p)[0]
            assert under_q == under_p


class TestPartitionDensity:
    def setup_method(self):
        self.up_down = two_atom_pair()

    def test_level_zero_is_one(self, coin_measure):
        rng = np.random.default_rng(0)
        q = PathMeasure(dict(zip(coin_measure.support, rng.dirichlet(np.ones(4)))))
        fn = partition_density(q, coin_measure, 0, 2)
        assert all(fn(p) == 1.0 for p in coin_measure.support)

    def test_finest_level_exact(self, coin_measure):
        rng = np.random.default_rng(1)
        q = PathMeasure(dict(zip(coin_measure.support, rng.dirichlet(np.ones(4)))))
        t = 2
        top = finest_partition_level(coin_measure, t)
        fn = partition_density(q, coin_measure, top, t)
        dp = density_process(q, coin_measure)
        for p in coin_measure.support:
            assert fn(p) == pytest.approx(dp.at(p, t), abs=1e-12)

    def test_refinement_distance_monotone(self, coin_measure):
        rng = np.random.default_rng(2)
        t = 2
        top = finest_partition_level(coin_measure, t)
        dpq = lambda q, fn: sum(coin_measure(p) * abs(density_process(q, coin_measure).at(p, t) - fn(p))
                                for p in coin_measure.support)
        for _ in range(10):
            w = rng.dirichlet(np.ones(4))
            if rng.random() < 0.5:
                w[rng.integers(4)] = 0.0
                w = w / w.sum()
            q = PathMeasure(dict(zip(coin_measure.support, w)))
            dists = [dpq(q, partition_density(q, coin_measure, lvl, t))
                     for lvl in range(top + 1)]
            assert all(b <= a + 1e-12 for a, b in zip(dists, dists[1:]))
            assert dists[-1] <= 1e-12
