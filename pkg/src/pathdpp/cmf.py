"""Controlled measure families: admissible sets, selectors, and executable
checks for switch-closure, the tail property, and conditional stability.

Admissible sets come in two flavours behind one protocol: explicit finite
lists, and weight-polytope handles (built in :mod:`pathdpp.markets`).
Universally quantified checks run over a spanning test set: every member
for finite sets, all vertex combinations plus seeded interior samples for
polytopes.
"""

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import config
from .errors import (InvalidTransition, KernelDomainError, MembershipFailure)
from .measures import (Kernel, PathMeasure, concat_measures, conditional_shift,
                       dirac, expect, stopped_distribution)
from .pathspace import (INF, IOTA, Path, RandomTime, State, constant_path,
                        coordinate, iota_path, limit_functional, shift)


class MeasureSet:
    """Protocol for one state's admissible measures."""

    def contains(self, mu: PathMeasure, atol: float = config.VALUE_ATOL) -> bool:
        raise NotImplementedError

    def spanning(self, rng: np.random.Generator | None = None,
                 interior_samples: int = config.INTERIOR_SAMPLES) -> list[PathMeasure]:
        """Finite test set through which the universal checks quantify."""
        raise NotImplementedError

    def minimize(self, fn: Callable[[Path], float]):
        """Exact infimum of the expectation over the (closed) set.

        Returns ``(value, argmin measure)``; ties break on the canonical
        sorted atom representation.
        """
        raise NotImplementedError


class FiniteMeasureSet(MeasureSet):
    """An admissible set given extensionally."""

    def __init__(self, measures: Sequence[PathMeasure]):
        if not measures:
            raise ValueError("admissible sets must be nonempty")
        self.measures = list(measures)

    def contains(self, mu, atol=config.VALUE_ATOL):
        return any(mu.approx_equal(m, atol) for m in self.measures)

    def spanning(self, rng=None, interior_samples=config.INTERIOR_SAMPLES):
        return list(self.measures)

    def minimize(self, fn):
        best = None
        for m in self.measures:
            v = expect(m, fn)
            if best is None or v < best[0] or (v == best[0] and m.key() < best[1].key()):
                best = (v, m)
        return best


@dataclass
class ControlFamily:
    """Per-state admissible sets together with the allowed switch times.

    ``admissible`` lists the explicitly held states; ``resolver`` may
    extend the domain on demand (used by density-augmented families whose
    reachable states depend on continuous coordinates).
    """

    admissible: dict[State, MeasureSet]
    times: list[RandomTime]
    resolver: Callable[[State], MeasureSet] | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def domain(self) -> list[State]:
        return sorted(self.admissible, key=State.key)

    def measure_set(self, x: State) -> MeasureSet:
        if x in self.admissible:
            return self.admissible[x]
        if x in self._cache:
            return self._cache[x]
        if self.resolver is not None:
            got = self.resolver(x)
            if got is not None:
                self._cache[x] = got
                return got
        raise KernelDomainError(f"no admissible set at {x}")

    def path_universe(self) -> list[Path]:
        seen: set[Path] = set()
        for x in self.domain():
            for mu in self.measure_set(x).spanning():
                seen.update(mu.mass)
        return sorted(seen, key=Path.key)

    def horizon(self) -> int:
        for x in self.domain():
            for mu in self.measure_set(x).spanning():
                return mu.horizon
        raise ValueError("empty family")


@dataclass(frozen=True)
class Selector:
    """A kernel whose value at every state lies in that state's admissible set."""

    kernel: Kernel

    def check_membership(self, fam: ControlFamily, atol: float = config.VALUE_ATOL):
        for x in self.kernel.domain():
            if x.is_iota:
                continue
            if not fam.measure_set(x).contains(self.kernel.at(x), atol):
                raise MembershipFailure(f"selector value at {x} is not admissible")
        return True


@dataclass(frozen=True)
class CostFunctional:
    """A path cost with an optional shift-invariance certificate.

    The constant sentinel path always costs zero.  When the certificate
    is claimed it can be (and in the checkers is) verified exhaustively.
    """

    fn: Callable[[Path], float]
    shift_invariant: bool = False

    def __call__(self, path: Path) -> float:
        if path.is_iota_path:
            return 0.0
        return float(self.fn(path))

    @staticmethod
    def terminal(payoff: Callable[[State], float]) -> "CostFunctional":
        """Cost read off the long-run state; shift-invariant by construction."""

        def fn(path: Path) -> float:
            limit = limit_functional(path)
            return 0.0 if limit.is_iota else float(payoff(limit))

        return CostFunctional(fn, shift_invariant=True)

    def verify_shift_invariance(self, universe: Iterable[Path],
                                atol: float = config.VALUE_ATOL):
        """Exhaustive check of invariance under every defined shift."""
        for p in universe:
            base = self(p)
            for t in range(p.horizon + 1):
                try:
                    shifted = shift(p, t)
                except Exception:
                    break
                if abs(self(shifted) - base) > atol:
                    return False, (p, t)
        return True, None


def _kernel_options(fam: ControlFamily, charged: Sequence[State],
                    rng: np.random.Generator,
                    interior_samples: int) -> list[Kernel]:
    """Spanning kernels over the charged states.

    All combinations of per-state spanning measures would explode for
    polytopes, so those contribute all vertex combinations plus a few
    seeded interior kernels.
    """
    real = [x for x in charged if not x.is_iota]
    if not real:
        return [Kernel({})]
    per_state: list[list[PathMeasure]] = []
    interior_per_state: list[list[PathMeasure]] = []
    for x in real:
        mset = fam.measure_set(x)
        span = mset.spanning(rng=rng, interior_samples=0)
        per_state.append(span)
        extra = mset.spanning(rng=rng, interior_samples=interior_samples)
        interior_per_state.append(extra[len(span):] or span)
    kernels = [Kernel(dict(zip(real, combo)))
               for combo in itertools.product(*per_state)]
    for _ in range(interior_samples):
        pick = {x: opts[rng.integers(len(opts))]
                for x, opts in zip(real, interior_per_state)}
        kernels.append(Kernel(pick))
    return kernels


def _iter_quadruples(fam: ControlFamily, rng, interior_samples):
    for x in fam.domain():
        for mu in fam.measure_set(x).spanning(rng=rng,
                                              interior_samples=interior_samples):
            for tau in fam.times:
                charged = [s for s in stopped_distribution(mu, tau) if not s.is_iota]
                kernels = _kernel_options(fam, charged, rng, interior_samples)
                for nu in kernels:
                    yield x, mu, tau, nu


def check_concatenability(fam: ControlFamily, seed: int = 0,
                          interior_samples: int = config.INTERIOR_SAMPLES,
                          atol: float = config.VALUE_ATOL):
    """Does switching to any admissible restart stay admissible?

    Returns ``(True, None)`` or ``(False, (state, measure, time, kernel))``.
    """
    rng = np.random.default_rng(seed)
    for x, mu, tau, nu in _iter_quadruples(fam, rng, interior_samples):
        glued = concat_measures(mu, nu, tau)
        if not fam.measure_set(x).contains(glued, atol):
            return False, (x, mu, tau, nu)
    return True, None


def check_tail(fam: ControlFamily, cost: CostFunctional, seed: int = 0,
               interior_samples: int = config.INTERIOR_SAMPLES,
               atol: float = config.VALUE_ATOL):
    """Does the cost see a restart only through the stopped state?

    Verifies, over the spanning quadruples, that the cost of the glued
    measure equals the two-stage evaluation ``restart mean at the stopped
    state when stopped, own cost otherwise``.
    """
    rng = np.random.default_rng(seed)
    h = fam.horizon()
    for x, mu, tau, nu in _iter_quadruples(fam, rng, interior_samples):
        lhs = expect(concat_measures(mu, nu, tau), cost)
        means: dict[State, float] = {}

        def staged(p: Path) -> float:
            t = tau(p)
            if t == INF:
                return cost(p)
            s = coordinate(p, t)
            if s not in means:
                means[s] = expect(nu.at(s, horizon=h), cost)
            return means[s]

        rhs = expect(mu, staged)
        if not _ext_close(lhs, rhs, atol):
            return False, (x, mu, tau, nu, lhs, rhs)
    return True, None


def _ext_close(a: float, b: float, atol: float) -> bool:
    if math.isinf(a) or math.isinf(b):
        return a == b
    return abs(a - b) <= atol


def check_disintegrability(fam: ControlFamily, seed: int = 0,
                           interior_samples: int = config.INTERIOR_SAMPLES,
                           atol: float = config.VALUE_ATOL):
    """Does conditioning at a switch time stay admissible?

    For every spanning measure and every time, the stopped-state
    conditionals of the shifted path must be members of the admissible
    sets at the charged states.
    """
    rng = np.random.default_rng(seed)
    for x in fam.domain():
        for mu in fam.measure_set(x).spanning(rng=rng,
                                              interior_samples=interior_samples):
            for tau in fam.times:
                kernel = conditional_shift(mu, tau)
                for s in kernel.domain():
                    if s.is_iota:
                        continue
                    if not fam.measure_set(s).contains(kernel.at(s), atol):
                        return False, (x, mu, tau, s)
    return True, None


def disintegration_kernel(fam: ControlFamily, mu: PathMeasure, tau: RandomTime,
                          default: Selector | Kernel | None = None) -> Selector:
    """Restart kernel that reproduces ``mu`` when spliced back at ``tau``.

    Charged states carry the exact conditionals (membership enforced);
    uncharged states fall back to the supplied selector.
    """
    fallback = default.kernel if isinstance(default, Selector) else default
    kernel = conditional_shift(mu, tau, default=fallback)
    for s in kernel.domain():
        if s.is_iota:
            continue
        if not fam.measure_set(s).contains(kernel.at(s)):
            raise MembershipFailure(
                f"conditional at {s} escapes the admissible set")
    return Selector(kernel)


def singleton_family(transition: Mapping[State, Mapping[State, float]],
                     horizon: int,
                     times: Sequence[RandomTime] = ()) -> ControlFamily:
    """Family with one canonical law per start state.

    ``transition`` maps each live state to its child distribution; rows
    must sum to one, decrement the clock by one, and states with an
    expired clock absorb.  The returned family contains every state
    reachable from the table's domain.
    """
    table: dict[State, dict[State, float]] = {}
    for x, row in transition.items():
        if x.time_to_go > horizon:
            raise InvalidTransition(
                f"state {x} has more clock than the horizon {horizon}")
        total = sum(row.values())
        if abs(total - 1.0) > config.MASS_ATOL:
            raise InvalidTransition(f"row at {x} sums to {total!r}")
        kept = {}
        for y, pr in row.items():
            if pr < 0:
                raise InvalidTransition(f"negative probability at {x} -> {y}")
            if pr == 0:
                continue
            if x.time_to_go > 0 and y.time_to_go != x.time_to_go - 1:
                raise InvalidTransition(
                    f"clock must decrement: {x} -> {y}")
            if x.time_to_go == 0 and y != x:
                raise InvalidTransition(f"expired state {x} must absorb")
            kept[y] = float(pr)
        table[x] = kept

    def law(x: State) -> PathMeasure:
        atoms: dict[Path, float] = {}

        def grow(prefix: list[State], mass: float):
            if len(prefix) == horizon + 1:
                atoms[Path(tuple(prefix))] = atoms.get(Path(tuple(prefix)), 0.0) + mass
                return
            s = prefix[-1]
            if s.time_to_go == 0 or s not in table:
                if s.time_to_go > 0 and s not in table:
                    raise InvalidTransition(f"no row for live state {s}")
                grow(prefix + [s], mass)
                return
            for y, pr in table[s].items():
                grow(prefix + [y], mass * pr)

        grow([x], 1.0)
        return PathMeasure(atoms)

    states: set[State] = set(table)
    frontier = list(table)
    while frontier:
        s = frontier.pop()
        for y in table.get(s, {}):
            if y not in states:
                states.add(y)
                frontier.append(y)

    admissible = {x: FiniteMeasureSet([law(x)]) for x in states}
    return ControlFamily(admissible, list(times))
