import pytest

from pathdpp import (ControlFamily, CostFunctional, FiniteMeasureSet, Path,
                     PathMeasure, binomial_market, constant_path,
                     constant_time, dirac, make_state, trinomial_market)


@pytest.fixture
def coin_states():
    """Two-step fair-coin chain on factor labels."""
    s = {}
    for t in range(3):
        for eta in "hd":
            s[(t, eta)] = make_state(t, [1.0], eta)
    return s


@pytest.fixture
def coin_measure(coin_states):
    """Uniform measure on the four head/tail continuations from (2, 'h')."""
    s = coin_states
    mass = {}
    for a in "hd":
        for b in "hd":
            mass[Path((s[(2, "h")], s[(1, a)], s[(0, b)]))] = 0.25
    return PathMeasure(mass)


@pytest.fixture
def binomial():
    return binomial_market(s0=1.0, up=2.0, down=0.5, p_up=0.5, steps=1)


@pytest.fixture
def binomial2():
    return binomial_market(s0=1.0, up=2.0, down=0.5, p_up=0.5, steps=2)


@pytest.fixture
def trinomial():
    return trinomial_market(steps=1)


@pytest.fixture
def trinomial2():
    return trinomial_market(steps=2, probs=(0.4, 0.2, 0.4))


def call_cost(strike=1.0):
    return CostFunctional.terminal(lambda s: max(s.prices[0] - strike, 0.0))


@pytest.fixture
def violating_family():
    """Closed under switching but the step-1 conditional is inadmissible.

    The root offers the fair continuation and the biased-glued one; the
    interior state offers only the biased tail, so conditioning the fair
    measure at step 1 escapes the admissible set while every glue lands
    back inside.
    """
    x0 = make_state(2, [1.0], "")
    y = make_state(1, [1.0], "")
    u = make_state(0, [2.0], "")
    d = make_state(0, [0.5], "")
    fair = PathMeasure({Path((x0, y, u)): 0.5, Path((x0, y, d)): 0.5})
    glued = PathMeasure({Path((x0, y, u)): 0.9, Path((x0, y, d)): 0.1})
    tail = PathMeasure({Path((y, u, u)): 0.9, Path((y, d, d)): 0.1})
    fam = ControlFamily({
        x0: FiniteMeasureSet([fair, glued]),
        y: FiniteMeasureSet([tail]),
        u: FiniteMeasureSet([dirac(constant_path(u, 2))]),
        d: FiniteMeasureSet([dirac(constant_path(d, 2))]),
    }, times=[constant_time(t) for t in (0, 1, 2)])
    return fam, x0, y
