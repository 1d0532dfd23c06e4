"""Value functions, near-optimal selectors, and certification of the
dynamic-programming identity.

``value`` computes the exact per-state infimum of the expected cost;
``dpp_rhs`` evaluates the switching bound at a stopping time; and
``verify_dpp`` certifies that the two sides agree at every listed state
after the structural prechecks pass.  ``solve_backward`` exploits the
identity layer by layer and is cross-checked against ``value``.
"""

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import config
from .cmf import (ControlFamily, CostFunctional, Selector,
                  check_concatenability, check_disintegrability, check_tail)
from .errors import HypothesisNotVerified, NotTreeStructured
from .measures import Kernel, PathMeasure, expect
from .pathspace import (INF, IOTA, Path, RandomTime, State, constant_path,
                        coordinate)


@dataclass
class ValueFunction:
    """Per-state optimal cost; the sentinel is worth zero.

    A family whose reachable states are not all listed (the
    density-augmented case) supplies an ``evaluator`` used, and cached,
    for off-table lookups.
    """

    values: dict[State, float]
    evaluator: Callable[[State], float] | None = None

    def get(self, x: State) -> float:
        if x.is_iota:
            return 0.0
        if x in self.values:
            return self.values[x]
        if self.evaluator is not None:
            self.values[x] = float(self.evaluator(x))
            return self.values[x]
        raise KeyError(f"value unknown at {x}")

    def table(self) -> dict[State, float]:
        return dict(self.values)


@dataclass
class DppEntry:
    state: State
    time_name: str
    lhs: float
    rhs: float

    @property
    def gap(self) -> float:
        if math.isinf(self.lhs) or math.isinf(self.rhs):
            return 0.0 if self.lhs == self.rhs else INF
        return abs(self.lhs - self.rhs)


@dataclass
class DppReport:
    """Per-state comparison of the optimal cost against the switching bound."""

    entries: list[DppEntry]
    prechecks: dict[str, bool]

    @property
    def gap(self) -> float:
        return max((e.gap for e in self.entries), default=0.0)

    @property
    def worst(self) -> DppEntry | None:
        return max(self.entries, key=lambda e: e.gap) if self.entries else None

    def passed(self, tol: float = config.DPP_GAP_TOL) -> bool:
        return all(self.prechecks.values()) and self.gap <= tol


def value(fam: ControlFamily, cost: CostFunctional) -> ValueFunction:
    """Exact per-state infimum of the expected cost over the admissible set."""
    table = {x: fam.measure_set(x).minimize(cost)[0] for x in fam.domain()}
    evaluator = None
    if fam.resolver is not None:
        evaluator = lambda x: fam.measure_set(x).minimize(cost)[0]
    return ValueFunction(table, evaluator)


def _stopped_cost(v: ValueFunction, cost: CostFunctional, tau: RandomTime):
    def fn(path: Path) -> float:
        t = tau(path)
        if t == INF:
            return cost(path)
        return v.get(coordinate(path, t))

    return fn


def dpp_rhs(fam: ControlFamily, cost: CostFunctional, v: ValueFunction,
            tau: RandomTime, x: State, truncated: bool = False) -> float:
    """Switching bound: best expected value-at-the-stop over restarts at ``x``.

    ``truncated`` routes through the increasing floor sequence
    ``max(-n, .)``; with extended-real expectations both routes agree, and
    the explicit route exists for costs taking ``-inf``.
    """
    mset = fam.measure_set(x)
    fn = _stopped_cost(v, cost, tau)
    stopped = getattr(mset, "minimize_stopped", None)
    if stopped is not None:
        return stopped(tau, v, cost)
    if not truncated:
        return mset.minimize(fn)[0]
    return min(_truncated_expect(mu, fn) for mu in mset.spanning())


def _truncated_expect(mu: PathMeasure, fn) -> float:
    """Monotone limit of ``E[max(-n, fn)]`` over growing floors ``n``.

    Agrees with the extended-real expectation: a diverging positive part
    dominates at every floor, and a negatively infinite atom makes the
    floored expectations decrease without bound.
    """
    if expect(mu, lambda p: max(0.0, fn(p))) == INF:
        return INF
    finite = [abs(fn(p)) for p in mu.support
              if not math.isinf(fn(p)) and not p.is_iota_path]
    top = max(finite, default=1.0) + 1.0
    lo = expect(mu, lambda p: max(-top, fn(p)))
    lo_next = expect(mu, lambda p: max(-2.0 * top, fn(p)))
    return -INF if lo_next < lo else lo


def verify_dpp(fam: ControlFamily, cost: CostFunctional,
               require_hypotheses: bool = True, seed: int = 0,
               interior_samples: int = config.INTERIOR_SAMPLES,
               atol: float = config.VALUE_ATOL) -> DppReport:
    """Certify the dynamic-programming identity on the family's domain.

    The structural prechecks (switch-closure, tail property, conditional
    stability) are the hypotheses of the identity; by default their
    failure aborts with :class:`HypothesisNotVerified`.  Pass
    ``require_hypotheses=False`` to record the gap of a family expected
    to fail.
    """
    concat_ok, concat_w = check_concatenability(fam, seed, interior_samples, atol)
    tail_ok, tail_w = check_tail(fam, cost, seed, interior_samples, atol)
    disint_ok, disint_w = check_disintegrability(fam, seed, interior_samples, atol)
    prechecks = {"concatenability": concat_ok, "tail": tail_ok,
                 "disintegrability": disint_ok}
    if require_hypotheses and not all(prechecks.values()):
        failed = [k for k, ok in prechecks.items() if not ok]
        raise HypothesisNotVerified(f"prechecks failed: {', '.join(failed)}")
    v = value(fam, cost)
    entries = []
    for x in fam.domain():
        lhs = v.get(x)
        for tau in fam.times:
            rhs = dpp_rhs(fam, cost, v, tau, x)
            entries.append(DppEntry(x, tau.name, lhs, rhs))
    return DppReport(entries, prechecks)


def epsilon_optimal_selector(fam: ControlFamily, cost: CostFunctional,
                             eps: float) -> Selector:
    """Per-state measure within ``eps`` of optimal (exact argmin where the
    set is enumerable; ties break on the canonical atom representation)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    table = {}
    for x in fam.domain():
        val, argmin = fam.measure_set(x).minimize(cost)
        if argmin is None:
            raise ValueError(f"no attaining measure at {x}")
        got = expect(argmin, cost)
        if not got < config.eps_floor(val, eps) and got != val:
            raise ValueError(f"selector misses the eps bound at {x}")
        table[x] = argmin
    return Selector(Kernel(table))


def solve_backward(fam: ControlFamily, cost: CostFunctional) -> ValueFunction:
    """Layer-by-layer solve along the clock.

    Expired states cost their constant path; live states take the best
    one-step expectation of the next layer.  Requires the clock to
    decrement to absorption along every supported path.
    """
    horizon = fam.horizon()
    states = fam.domain()
    by_clock: dict[int, list[State]] = {}
    for x in states:
        by_clock.setdefault(x.time_to_go, []).append(x)
    table: dict[State, float] = {}
    for clock in sorted(by_clock):
        for x in by_clock[clock]:
            if clock == 0:
                table[x] = cost(constant_path(x, horizon))
                continue
            mset = fam.measure_set(x)
            onestep = getattr(mset, "minimize_onestep", None)
            if onestep is not None:
                table[x] = onestep(table)
                continue

            def next_value(path: Path, _table=table, _x=x) -> float:
                s = coordinate(path, 1)
                if s.time_to_go != _x.time_to_go - 1:
                    raise NotTreeStructured(
                        f"clock does not decrement from {_x} to {s}")
                if s not in _table:
                    raise NotTreeStructured(f"one-step state {s} missing")
                return _table[s]

            table[x] = mset.minimize(next_value)[0]
    return ValueFunction(table)
