"""Finite event-tree markets.

A market is a rooted tree whose nodes carry states (clock, prices,
factor) and strictly positive child probabilities.  Each node induces a
weight polytope: child weights that average the children's prices back to
the node's price.  Products of these local polytopes across a subtree are
the risk-neutral measure sets; their vertices are enumerated exactly from
basic feasible solutions, which suffices because expectations are
multilinear in the node weights.
"""

import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.optimize import linprog

from . import config
from .cmf import ControlFamily, CostFunctional, FiniteMeasureSet, MeasureSet
from .dpp import ValueFunction, solve_backward
from .errors import (NoMartingaleMeasure, UnboundedPrimal, VertexCapExceeded)
from .measures import PathMeasure, expect
from .pathspace import Path, RandomTime, State, make_state

_ROUND = 12


@dataclass
class TreeMarket:
    """Event tree with physical child probabilities.

    ``states[i]`` is node ``i``'s state; leaves are exactly the nodes with
    an expired clock.  Children of one node must carry distinct states, and
    any two nodes sharing a state must have matching child layouts, so the
    per-state measure sets are well defined.
    """

    states: list[State]
    children: list[list[int]]
    probs: list[list[float]]
    root: int = 0

    def __post_init__(self):
        self._validate()
        self._paths_cache: dict[int, list[tuple[int, ...]]] = {}

    def _validate(self):
        n = len(self.states)
        if not (len(self.children) == len(self.probs) == n):
            raise ValueError("states, children and probs must align")
        dims = {len(s.prices) for s in self.states}
        if len(dims) != 1:
            raise ValueError("all nodes must share one price dimension")
        for i in range(n):
            kids = self.children[i]
            pr = self.probs[i]
            state = self.states[i]
            if state.time_to_go == 0:
                if kids:
                    raise ValueError(f"expired node {i} has children")
                continue
            if not kids:
                raise ValueError(f"live node {i} has no children")
            if len(kids) != len(pr):
                raise ValueError(f"node {i}: children/probs mismatch")
            if any(p <= 0 for p in pr):
                raise ValueError(f"node {i}: child probabilities must be positive")
            if abs(sum(pr) - 1.0) > config.MASS_ATOL:
                raise ValueError(f"node {i}: child probabilities sum to {sum(pr)}")
            kid_states = [self.states[c] for c in kids]
            if len(set(kid_states)) != len(kid_states):
                raise ValueError(f"node {i}: children must have distinct states")
            for c in kids:
                if self.states[c].time_to_go != state.time_to_go - 1:
                    raise ValueError(f"edge {i}->{c}: clock must decrement")
        by_state: dict[State, tuple] = {}
        for i in range(n):
            sig = tuple(sorted((self.states[c].key(), round(p, _ROUND))
                               for c, p in zip(self.children[i], self.probs[i])))
            prev = by_state.setdefault(self.states[i], sig)
            if prev != sig:
                raise ValueError(
                    f"nodes sharing state {self.states[i]} have different"
                    " child layouts")

    @property
    def horizon(self) -> int:
        return self.states[self.root].time_to_go

    @property
    def dim(self) -> int:
        return len(self.states[self.root].prices)

    @property
    def price_floor(self) -> float:
        return min(min(s.prices) for s in self.states)

    def node_of_state(self, state: State) -> int:
        for i, s in enumerate(self.states):
            if s == state:
                return i
        raise KeyError(f"no node with state {state}")

    def subtree(self, node: int) -> list[int]:
        out = [node]
        i = 0
        while i < len(out):
            out.extend(self.children[out[i]])
            i += 1
        return out

    def node_paths(self, node: int) -> list[tuple[int, ...]]:
        """Node-id sequences from ``node`` down to the leaves."""
        if node in self._paths_cache:
            return self._paths_cache[node]
        paths: list[tuple[int, ...]] = []

        def grow(prefix: list[int]):
            kids = self.children[prefix[-1]]
            if not kids:
                paths.append(tuple(prefix))
                return
            for c in kids:
                grow(prefix + [c])

        grow([node])
        self._paths_cache[node] = paths
        return paths

    def to_path(self, node_path: Sequence[int]) -> Path:
        """State path padded with the absorbed leaf to the global horizon."""
        states = [self.states[i] for i in node_path]
        pad = self.horizon + 1 - len(states)
        states += [states[-1]] * pad
        return Path(tuple(states))

    def physical_measure(self, node: int) -> PathMeasure:
        mass: dict[Path, float] = {}
        for np_ in self.node_paths(node):
            m = 1.0
            for a, b in zip(np_, np_[1:]):
                m *= self.probs[a][self.children[a].index(b)]
            mass[self.to_path(np_)] = m
        return PathMeasure(mass)

    # --- standard builders -------------------------------------------------

    @classmethod
    def from_moves(cls, s0: float, steps: int, moves: Sequence[float],
                   probs: Sequence[float], factor: str = "") -> "TreeMarket":
        """Single-asset tree where each step multiplies the price by one of
        ``moves`` with the given physical probabilities."""
        states: list[State] = []
        children: list[list[int]] = []
        prob_rows: list[list[float]] = []

        def build(price: float, clock: int) -> int:
            idx = len(states)
            states.append(make_state(clock, [price], factor))
            children.append([])
            prob_rows.append([])
            if clock > 0:
                kids = [build(price * m, clock - 1) for m in moves]
                children[idx] = kids
                prob_rows[idx] = [float(p) for p in probs]
            return idx

        build(float(s0), steps)
        return cls(states, children, prob_rows)


def binomial_market(s0=1.0, up=2.0, down=0.5, p_up=0.5, steps=1,
                    factor="") -> TreeMarket:
    return TreeMarket.from_moves(s0, steps, [up, down], [p_up, 1 - p_up], factor)


def trinomial_market(s0=1.0, up=2.0, mid=1.0, down=0.5,
                     probs=(1 / 3, 1 / 3, 1 / 3), steps=1,
                     factor="") -> TreeMarket:
    return TreeMarket.from_moves(s0, steps, [up, mid, down], list(probs), factor)


def physical_family(market: TreeMarket,
                    times: Sequence[RandomTime] = ()) -> ControlFamily:
    """Singleton family of the market's physical laws, one per node state."""
    admissible = {}
    for i, s in enumerate(market.states):
        if s not in admissible:
            admissible[s] = FiniteMeasureSet([market.physical_measure(i)])
    return ControlFamily(admissible, list(times))


# --- local weight polytopes ------------------------------------------------


def _local_system(market: TreeMarket, node: int):
    kids = market.children[node]
    prices = np.array([market.states[c].prices for c in kids], dtype=float).T
    a = np.vstack([np.ones((1, len(kids))), prices])
    b = np.concatenate([[1.0], np.array(market.states[node].prices)])
    return a, b


def _basic_feasible(a: np.ndarray, b: np.ndarray, tol: float = 1e-9) -> list[np.ndarray]:
    m, k = a.shape
    rank = np.linalg.matrix_rank(a, tol=1e-11)
    seen = {}
    for cols in itertools.combinations(range(k), min(rank, k)):
        sub = a[:, cols]
        sol, *_ = np.linalg.lstsq(sub, b, rcond=None)
        q = np.zeros(k)
        q[list(cols)] = sol
        if np.linalg.norm(a @ q - b) > tol or (q < -tol).any():
            continue
        q = np.clip(q, 0.0, None)
        q /= q.sum()
        key = tuple(round(x, _ROUND) for x in q)
        seen.setdefault(key, q)
    return [seen[k] for k in sorted(seen)]


def _interior_point(a: np.ndarray, b: np.ndarray, tol: float = 1e-9):
    """Most-interior weight vector, or None when only boundary solutions exist."""
    m, k = a.shape
    c = np.zeros(k + 1)
    c[-1] = -1.0
    a_eq = np.hstack([a, np.zeros((m, 1))])
    a_ub = np.hstack([-np.eye(k), np.ones((k, 1))])
    res = linprog(c, A_ub=a_ub, b_ub=np.zeros(k), A_eq=a_eq, b_eq=b,
                  bounds=[(0, 1)] * k + [(0, 1)], method="highs")
    if not res.success:
        return None
    t = res.x[-1]
    if t <= tol:
        return None
    return res.x[:-1]


class NodePolytopes:
    """Per-node vertex and interior-point cache for one market."""

    def __init__(self, market: TreeMarket):
        self.market = market
        self._vertices: dict[int, list[np.ndarray]] = {}
        self._interior: dict[int, np.ndarray | None] = {}

    def vertices(self, node: int) -> list[np.ndarray]:
        if node not in self._vertices:
            a, b = _local_system(self.market, node)
            verts = _basic_feasible(a, b)
            if not verts:
                raise NoMartingaleMeasure(
                    f"node with state {self.market.states[node]} admits no"
                    " balancing weights")
            self._vertices[node] = verts
        return self._vertices[node]

    def interior(self, node: int) -> np.ndarray | None:
        if node not in self._interior:
            a, b = _local_system(self.market, node)
            self._interior[node] = _interior_point(a, b)
        return self._interior[node]


class EmmPolytopeSet(MeasureSet):
    """Closed polytope of balanced path measures on one subtree.

    Membership, vertex enumeration (products of local basic feasible
    solutions, capped), seeded interior sampling and exact linear
    minimization over the vertex list.
    """

    def __init__(self, market: TreeMarket, node: int, cache: NodePolytopes,
                 max_vertices: int = config.MAX_VERTICES):
        self.market = market
        self.node = node
        self.cache = cache
        self.max_vertices = max_vertices
        self._live = [n for n in market.subtree(node) if market.children[n]]
        self._node_paths = market.node_paths(node)
        self._tree_paths = {market.to_path(np_): np_ for np_ in self._node_paths}
        self._vertex_cache: list[PathMeasure] | None = None

    # -- assembling measures from per-node weights

    def _weights_to_measure(self, weights: Mapping[int, np.ndarray]) -> PathMeasure:
        mass: dict[Path, float] = {}
        for np_ in self._node_paths:
            m = 1.0
            for a, b in zip(np_, np_[1:]):
                m *= weights[a][self.market.children[a].index(b)]
            if m > 0:
                mass[self.market.to_path(np_)] = m
        return PathMeasure(mass)

    def vertices(self) -> list[PathMeasure]:
        if self._vertex_cache is not None:
            return self._vertex_cache
        counts = [len(self.cache.vertices(n)) for n in self._live]
        total = 1
        for c in counts:
            total *= c
            if total > self.max_vertices:
                raise VertexCapExceeded(
                    f"{total}+ vertex combinations exceed the cap"
                    f" {self.max_vertices}")
        seen: dict[tuple, PathMeasure] = {}
        for combo in itertools.product(*(self.cache.vertices(n) for n in self._live)):
            weights = dict(zip(self._live, combo))
            mu = self._weights_to_measure(weights)
            seen.setdefault(mu.key(), mu)
        self._vertex_cache = [seen[k] for k in sorted(seen)]
        return self._vertex_cache

    def interior_measure(self, rng: np.random.Generator | None = None) -> PathMeasure:
        """A strictly positive member; randomized around the most-interior
        point when a generator is supplied."""
        weights = {}
        for n in self._live:
            base = self.cache.interior(n)
            if base is None:
                raise NoMartingaleMeasure(
                    f"no interior weights at state {self.market.states[n]}")
            if rng is None:
                weights[n] = base
            else:
                verts = self.cache.vertices(n)
                lam = rng.dirichlet(np.ones(len(verts)))
                mixed = sum(l * v for l, v in zip(lam, verts))
                weights[n] = 0.5 * base + 0.5 * mixed
        return self._weights_to_measure(weights)

    def spanning(self, rng=None, interior_samples=config.INTERIOR_SAMPLES):
        out = list(self.vertices())
        if interior_samples > 0:
            out.append(self.interior_measure())
            gen = rng if rng is not None else np.random.default_rng(0)
            out.extend(self.interior_measure(gen)
                       for _ in range(interior_samples - 1))
        return out

    # -- membership

    def node_masses(self, mass: Mapping[Path, float]) -> dict[int, float] | None:
        """Mass reaching each subtree node, or None when the support leaves
        the subtree's path set."""
        reach: dict[int, float] = {}
        for path, m in mass.items():
            np_ = self._tree_paths.get(path)
            if np_ is None:
                return None
            for node in np_:
                reach[node] = reach.get(node, 0.0) + m
        return reach

    def contains_mass(self, mass: Mapping[Path, float],
                      atol: float = config.VALUE_ATOL) -> bool:
        if any(m < -atol for m in mass.values()):
            return False
        total = sum(mass.values())
        if abs(total - 1.0) > max(atol, config.MASS_ATOL):
            return False
        reach = self.node_masses(mass)
        if reach is None:
            return False
        edge: dict[tuple[int, int], float] = {}
        for path, m in mass.items():
            np_ = self._tree_paths[path]
            for a, b in zip(np_, np_[1:]):
                edge[(a, b)] = edge.get((a, b), 0.0) + m
        for n in self._live:
            mn = reach.get(n, 0.0)
            if mn <= atol:
                continue
            q = np.array([edge.get((n, c), 0.0) / mn
                          for c in self.market.children[n]])
            a, b = _local_system(self.market, n)
            if np.max(np.abs(a @ q - b)) > atol:
                return False
        return True

    def contains(self, mu: PathMeasure, atol=config.VALUE_ATOL) -> bool:
        return self.contains_mass(mu.mass, atol)

    # -- optimization

    def minimize(self, fn):
        best = None
        for m in self.vertices():
            v = expect(m, fn)
            if best is None or v < best[0] or (v == best[0] and m.key() < best[1].key()):
                best = (v, m)
        return best

    def minimize_onestep(self, table: Mapping[State, float]) -> float:
        """Best one-step average of the next layer's values at this node."""
        kids = self.market.children[self.node]
        vals = np.array([table[self.market.states[c]] for c in kids])
        return min(float(v @ vals) for v in self.cache.vertices(self.node))


def build_emm_family(market: TreeMarket, times: Sequence[RandomTime] = (),
                     max_vertices: int = config.MAX_VERTICES) -> ControlFamily:
    """Admissible sets = closed balanced-weight polytopes per node state."""
    ok, witness = certify_nflvr(market)
    if not ok:
        raise NoMartingaleMeasure(
            f"no strictly positive balancing weights at state {witness}")
    cache = NodePolytopes(market)
    admissible: dict[State, MeasureSet] = {}
    for i, s in enumerate(market.states):
        if s not in admissible:
            admissible[s] = EmmPolytopeSet(market, i, cache, max_vertices)
    return ControlFamily(admissible, list(times))


def certify_nflvr(market: TreeMarket):
    """Strictly positive balancing weights at every node.

    Returns ``(True, witness measure)`` with an interior measure assembled
    tree-wide from the root, or ``(False, offending state)``.
    """
    cache = NodePolytopes(market)
    for n in range(len(market.states)):
        if not market.children[n]:
            continue
        try:
            has_any = bool(cache.vertices(n))
        except NoMartingaleMeasure:
            return False, market.states[n]
        if not has_any or cache.interior(n) is None:
            return False, market.states[n]
    witness = EmmPolytopeSet(market, market.root, cache).interior_measure()
    return True, witness


def lower_hedge(market: TreeMarket,
                payoff: Callable[[tuple[float, ...], str], float],
                max_vertices: int = config.MAX_VERTICES) -> ValueFunction:
    """Cheapest risk-neutral price of the terminal claim, per node state.

    Solved by backward induction over the balanced-weight family; the
    infimum ranges over the closed polytope.
    """
    fam = build_emm_family(market, times=(), max_vertices=max_vertices)
    cost = CostFunctional.terminal(lambda s: payoff(s.prices, s.factor))
    return solve_backward(fam, cost)


def subhedge_plan(market: TreeMarket,
                  payoff: Callable[[tuple[float, ...], str], float]):
    """Best sub-replicating plan: the largest initial wealth for which some
    trading strategy stays at or below the claim on every leaf.

    Returns ``(y, strategy)`` with per-node holdings; unboundedness means
    the tree admits an arbitrage.
    """
    live = [n for n in range(len(market.states)) if market.children[n]]
    pos = {n: i for i, n in enumerate(live)}
    d = market.dim
    nvar = 1 + d * len(live)
    rows = []
    rhs = []
    for np_ in market.node_paths(market.root):
        row = np.zeros(nvar)
        row[0] = 1.0
        for a, b in zip(np_, np_[1:]):
            ds = np.array(market.states[b].prices) - np.array(market.states[a].prices)
            j = 1 + d * pos[a]
            row[j:j + d] += ds
        leaf = market.states[np_[-1]]
        rows.append(row)
        rhs.append(float(payoff(leaf.prices, leaf.factor)))
    c = np.zeros(nvar)
    c[0] = -1.0
    res = linprog(c, A_ub=np.array(rows), b_ub=np.array(rhs),
                  bounds=[(None, None)] * nvar, method="highs")
    if res.status == 3:
        raise UnboundedPrimal("sub-replication LP is unbounded (arbitrage)")
    if not res.success:
        raise RuntimeError(f"sub-replication LP failed: {res.message}")
    strategy = {n: tuple(res.x[1 + d * pos[n]: 1 + d * pos[n] + d]) for n in live}
    return float(res.x[0]), strategy


def primal_subhedge(market: TreeMarket,
                    payoff: Callable[[tuple[float, ...], str], float]) -> float:
    return subhedge_plan(market, payoff)[0]
