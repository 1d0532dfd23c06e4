"""Exact finitely-supported probability measures on paths.

Expectations use the extended-real convention that a positive part of
``+inf`` dominates; the sentinel path always carries zero cost.  Products
and concatenations of measures, stopped-state conditionals, absolute
continuity, martingale tests and density-ratio processes are all computed
by finite enumeration over the support.
"""

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

from . import config
from .errors import (KernelDomainError, NotAbsolutelyContinuous, NotAdapted)
from .pathspace import (INF, IOTA, Path, RandomTime, State, concat_paths,
                        coordinate, iota_path, shift)

PathFunctional = Callable[[Path], float]


@dataclass(frozen=True)
class PathMeasure:
    """A finitely-supported probability on paths.

    Zero-mass atoms are dropped at construction; all supported paths must
    share one horizon.
    """

    mass: Mapping[Path, float]

    def __post_init__(self):
        cleaned = {p: float(m) for p, m in self.mass.items() if m != 0.0}
        for p, m in cleaned.items():
            if m < 0:
                raise ValueError(f"negative mass {m} at {p}")
        total = sum(cleaned.values())
        if abs(total - 1.0) > config.MASS_ATOL:
            raise ValueError(f"masses sum to {total!r}, not 1")
        horizons = {p.horizon for p in cleaned}
        if len(horizons) > 1:
            raise ValueError(f"mixed horizons {horizons} in one measure")
        object.__setattr__(self, "mass", cleaned)

    @property
    def support(self) -> list[Path]:
        return sorted(self.mass, key=Path.key)

    @property
    def horizon(self) -> int:
        return next(iter(self.mass)).horizon

    def __call__(self, path: Path) -> float:
        return self.mass.get(path, 0.0)

    def items(self):
        return [(p, self.mass[p]) for p in self.support]

    def key(self):
        """Canonical sorted (path, mass) tuple, used for tie-breaking."""
        return tuple((p.key(), m) for p, m in self.items())

    def approx_equal(self, other: "PathMeasure", atol: float = config.VALUE_ATOL) -> bool:
        paths = set(self.mass) | set(other.mass)
        return all(abs(self(p) - other(p)) <= atol for p in paths)

    def start_state(self) -> State | None:
        """The common initial state, or None if the start is random."""
        starts = {coordinate(p, 0) for p in self.mass}
        return next(iter(starts)) if len(starts) == 1 else None


def dirac(path: Path) -> PathMeasure:
    return PathMeasure({path: 1.0})


def mixture(parts: Iterable[tuple[float, PathMeasure]]) -> PathMeasure:
    out: dict[Path, float] = {}
    for w, mu in parts:
        for p, m in mu.mass.items():
            out[p] = out.get(p, 0.0) + w * m
    return PathMeasure(out)


def expect(mu: PathMeasure, fn: PathFunctional) -> float:
    """``sum fn(path) * mass`` with extended-real conventions.

    The result is ``+inf`` as soon as the positive part diverges, whatever
    the negative part does; the constant sentinel path contributes zero.
    """
    pos = 0.0
    neg = 0.0
    for p, m in mu.mass.items():
        g = 0.0 if p.is_iota_path else float(fn(p))
        if g > 0:
            pos = pos + g * m if g != INF else INF
        elif g < 0:
            neg = neg + (-g) * m if g != -INF else INF
    if pos == INF:
        return INF
    if neg == INF:
        return -INF
    return pos - neg


@dataclass(frozen=True)
class Kernel:
    """A finite map from states to path measures.

    The sentinel maps to the point mass at the constant sentinel path, and
    the measure attached to any other state starts at that state.
    """

    per_state: Mapping[State, PathMeasure]

    def __post_init__(self):
        checked = dict(self.per_state)
        for x, mu in checked.items():
            if x.is_iota:
                if not mu.approx_equal(dirac(iota_path(mu.horizon))):
                    raise ValueError("the sentinel must map to its constant path")
                continue
            mass_at_x = sum(m for p, m in mu.mass.items()
                            if coordinate(p, 0) == x)
            if abs(mass_at_x - 1.0) > config.VALUE_ATOL:
                raise ValueError(
                    f"kernel at {x} puts mass {mass_at_x} on paths starting there")
        object.__setattr__(self, "per_state", checked)

    def at(self, x: State, horizon: int | None = None) -> PathMeasure:
        if x.is_iota:
            if x in self.per_state:
                return self.per_state[x]
            if horizon is None:
                raise KernelDomainError("sentinel lookup needs a horizon")
            return dirac(iota_path(horizon))
        try:
            return self.per_state[x]
        except KeyError:
            raise KernelDomainError(f"kernel undefined at {x}") from None

    def domain(self) -> list[State]:
        return sorted(self.per_state, key=State.key)

    def merged_over(self, fallback: "Kernel | None") -> "Kernel":
        """This kernel, completed by ``fallback`` off its own domain."""
        if fallback is None:
            return self
        table = dict(fallback.per_state)
        table.update(self.per_state)
        return Kernel(table)


def product(mu: PathMeasure, nu: Kernel, tau: RandomTime) -> dict[tuple[Path, Path], float]:
    """Joint mass of (path, restart path) under ``mu`` and ``nu`` at ``tau``."""
    out: dict[tuple[Path, Path], float] = {}
    h = mu.horizon
    for p, m in mu.mass.items():
        x = coordinate(p, tau(p))
        second = nu.at(x, horizon=h)
        for q, w in second.mass.items():
            key = (p, q)
            out[key] = out.get(key, 0.0) + m * w
    return out


def concat_measures(mu: PathMeasure, nu: Kernel, tau: RandomTime) -> PathMeasure:
    """Pushforward of the product under path gluing.

    Paths with ``tau = inf`` keep their own mass; elsewhere the restart
    measure attached to the stopped state is spliced in.
    """
    out: dict[Path, float] = {}
    for (p, q), m in product(mu, nu, tau).items():
        glued = concat_paths(p, q, tau)
        out[glued] = out.get(glued, 0.0) + m
    return PathMeasure(out)


def stopped_distribution(mu: PathMeasure, tau: RandomTime) -> dict[State, float]:
    """Mass of each stopped state; mass stopped at ``inf`` lands on the sentinel."""
    out: dict[State, float] = {}
    for p, m in mu.mass.items():
        x = coordinate(p, tau(p))
        out[x] = out.get(x, 0.0) + m
    return out


def conditional_shift(mu: PathMeasure, tau: RandomTime,
                      default: Kernel | None = None) -> Kernel:
    """Exact law of the post-``tau`` path given the stopped state.

    States never reached keep whatever ``default`` assigns (the usual
    freedom of redefining a conditional off the support); the sentinel
    always maps to its constant path.
    """
    buckets: dict[State, dict[Path, float]] = {}
    weights: dict[State, float] = {}
    for p, m in mu.mass.items():
        t = tau(p)
        x = coordinate(p, t)
        tail = shift(p, t)
        bucket = buckets.setdefault(x, {})
        bucket[tail] = bucket.get(tail, 0.0) + m
        weights[x] = weights.get(x, 0.0) + m
    table: dict[State, PathMeasure] = {}
    for x, bucket in buckets.items():
        w = weights[x]
        table[x] = PathMeasure({p: m / w for p, m in bucket.items()})
    kernel = Kernel(table)
    return kernel.merged_over(default)


def abs_continuous(q: PathMeasure, p: PathMeasure) -> bool:
    """True when every null atom of ``p`` is a null atom of ``q``."""
    return all(p(path) > 0.0 for path in q.mass)


def equivalent(q: PathMeasure, p: PathMeasure) -> bool:
    return abs_continuous(q, p) and abs_continuous(p, q)


def cylinder_atoms(paths: Iterable[Path], t: int) -> dict[tuple, list[Path]]:
    """Group paths by their step-``t`` prefix."""
    atoms: dict[tuple, list[Path]] = {}
    for p in paths:
        atoms.setdefault(p.prefix(t), []).append(p)
    return atoms


def _as_vector(value) -> tuple[float, ...]:
    if isinstance(value, (int, float)):
        return (float(value),)
    return tuple(float(v) for v in value)


def check_adapted(process, paths: Sequence[Path], upto: int):
    """Verify the process value at each step depends only on the prefix."""
    for t in range(upto + 1):
        seen: dict[tuple, tuple[float, ...]] = {}
        for p in paths:
            v = _as_vector(process(p, t))
            pre = p.prefix(t)
            if pre in seen and seen[pre] != v:
                raise NotAdapted(
                    f"step {t}: two paths sharing a prefix carry values "
                    f"{seen[pre]} and {v}")
            seen[pre] = v


def is_martingale(process, q: PathMeasure, atol: float = config.VALUE_ATOL):
    """Martingale test over the generating family of prefix events.

    ``process(path, t)`` may be scalar or vector valued and must be
    adapted (checked).  Returns ``(True, None)`` or ``(False, witness)``
    where the witness names the offending step pair and prefix event.
    """
    paths = q.support
    h = q.horizon
    check_adapted(process, paths, h)
    for s in range(h + 1):
        for pre, members in cylinder_atoms(paths, s).items():
            if sum(q(p) for p in members) <= 0:
                continue
            for t in range(s, h + 1):
                dim = len(_as_vector(process(members[0], s)))
                tot_t = [0.0] * dim
                tot_s = [0.0] * dim
                for p in members:
                    m = q(p)
                    for i, v in enumerate(_as_vector(process(p, t))):
                        tot_t[i] += m * v
                    for i, v in enumerate(_as_vector(process(p, s))):
                        tot_s[i] += m * v
                if max(abs(a - b) for a, b in zip(tot_t, tot_s)) > atol:
                    return False, (s, t, pre)
    return True, None


@dataclass(frozen=True)
class DensityProcess:
    """Step-wise likelihood ratio of a measure pair along prefix events.

    ``at(path, t)`` is the ratio of the two masses of the step-``t``
    prefix event containing the path; the table is a martingale under the
    base measure by construction (validated).
    """

    values: Mapping[tuple[Path, int], float]
    base: PathMeasure

    def at(self, path: Path, t: int) -> float:
        return self.values[(path, t)]

    def validate(self, atol: float = config.VALUE_ATOL):
        paths = self.base.support
        h = self.base.horizon
        for t in range(h):
            for pre, members in cylinder_atoms(paths, t).items():
                mass = sum(self.base(p) for p in members)
                if mass <= 0:
                    continue
                now = sum(self.base(p) * self.at(p, t) for p in members)
                nxt = sum(self.base(p) * self.at(p, t + 1) for p in members)
                if abs(now - nxt) > atol:
                    raise ValueError(
                        f"density table fails the martingale identity at step {t}")


def density_process(q: PathMeasure, p: PathMeasure) -> DensityProcess:
    """Conditional likelihood-ratio process of ``q`` against ``p``.

    Requires ``q`` absolutely continuous w.r.t. ``p``; the ratio on a
    ``p``-null prefix event is set to zero.
    """
    if not abs_continuous(q, p):
        raise NotAbsolutelyContinuous("density requested without q << p")
    values: dict[tuple[Path, int], float] = {}
    paths = p.support
    h = p.horizon
    for t in range(h + 1):
        for pre, members in cylinder_atoms(paths, t).items():
            if len(members) == len(paths):
                # the whole-support cell carries both full masses, which
                # are exactly one; float atom sums would only add noise
                ratio = 1.0
            else:
                pm = math.fsum(p(x) for x in members)
                qm = math.fsum(q(x) for x in members)
                ratio = 0.0 if pm == 0.0 else qm / pm
            for x in members:
                values[(x, t)] = ratio
    dp = DensityProcess(values, p)
    dp.validate()
    return dp


def peeling_partitions(atoms: Sequence[tuple], levels: int | None = None) -> list[list[list[tuple]]]:
    """Nested partition chain from trivial to singletons.

    Each refinement step splits exactly one atom off the remaining block,
    in canonical atom order.  A one-atom-at-a-time chain never increases
    the base-weighted absolute distance to the exact ratio, which makes
    the refinement approximations monotone.
    """
    atoms = list(atoms)
    n = len(atoms)
    chain = []
    top = max(n - 1, 0) if levels is None else levels
    for k in range(top + 1):
        k_eff = min(k, n - 1)
        cells = [[a] for a in atoms[:k_eff]]
        rest = atoms[k_eff:]
        if rest:
            cells.append(rest)
        chain.append(cells)
    return chain


def prefix_partitions(atoms: Sequence[tuple], t: int) -> list[list[list[tuple]]]:
    """Nested chain grouping step-``t`` prefix atoms by shorter prefixes."""
    chain = []
    for k in range(t + 2):
        cells: dict[tuple, list[tuple]] = {}
        for pre in atoms:
            cells.setdefault(pre[:k], []).append(pre)
        chain.append(list(cells.values()))
    return chain


def partition_density(q: PathMeasure, p: PathMeasure, level: int, t: int,
                      chain: str = "peel") -> Callable[[Path], float]:
    """Block-wise ratio approximation of the step-``t`` density.

    Level 0 uses the trivial partition (constant 1); the finest level
    reproduces :func:`density_process` at ``t`` exactly.  The default
    ``peel`` chain refines one prefix atom per level and is monotone in
    base-weighted absolute distance; the ``prefix`` chain groups by
    shorter prefixes and is provided for comparison (not monotone in
    general).
    """
    if not abs_continuous(q, p):
        raise NotAbsolutelyContinuous("density requested without q << p")
    paths = p.support
    atom_map = cylinder_atoms(paths, t)
    atoms = sorted(atom_map, key=lambda pre: tuple(s.key() for s in pre))
    if chain == "peel":
        levels = peeling_partitions(atoms)
    elif chain == "prefix":
        levels = prefix_partitions(atoms, t)
    else:
        raise ValueError(f"unknown chain {chain!r}")
    cells = levels[min(level, len(levels) - 1)]
    ratio_of: dict[tuple, float] = {}
    for cell in cells:
        members = [x for pre in cell for x in atom_map[pre]]
        if len(members) == len(paths):
            r = 1.0  # whole-support cell: both full masses are exactly one
        else:
            pm = math.fsum(p(x) for x in members)
            qm = math.fsum(q(x) for x in members)
            r = 0.0 if pm == 0.0 else qm / pm
        for pre in cell:
            ratio_of[pre] = r

    def fn(path: Path) -> float:
        return ratio_of[path.prefix(t)]

    return fn


def finest_partition_level(p: PathMeasure, t: int, chain: str = "peel") -> int:
    atoms = cylinder_atoms(p.support, t)
    if chain == "peel":
        return max(len(atoms) - 1, 0)
    return t + 1
