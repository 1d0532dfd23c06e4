"""Density-augmented families and the dual side of utility maximization.

The dual control problem minimizes ``E[V(terminal prices, factor,
z * likelihood ratio)]`` over balanced measures.  It is rephrased as an
ordinary control problem by appending the scaled ratio process as an
extra numeric state coordinate; path gluing then realizes exactly the
multiplicative splicing of densities, because restart kernels start at
the spliced coordinate.

Values of the augmented problem are convex programs in the atom masses
and are solved with cvxpy; the switching bound at a stopping time is an
independent program over the stopped layer whose terms come from subtree
value profiles.
"""

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import cvxpy as cp
import numpy as np
from scipy.optimize import linprog, minimize, minimize_scalar

from . import config
from .cmf import ControlFamily, CostFunctional, MeasureSet
from .errors import InfeasibleWealth, KernelDomainError
from .markets import EmmPolytopeSet, NodePolytopes, TreeMarket, _local_system
from .measures import PathMeasure, density_process, expect
from .pathspace import (INF, Path, RandomTime, State, limit_functional,
                        make_state)

_SOLVE_OPTS = dict(tol_gap_abs=1e-13, tol_gap_rel=1e-13, tol_feas=1e-13)


def _solve(problem: cp.Problem):
    """Interior-point solve pushed past the solver's comfort zone.

    The requested tolerances sit below what the solver certifies, so its
    reduced-accuracy warning fires on solutions that are in fact good to
    ten digits or better; residuals are what the callers check.
    """
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="Solution may be inaccurate")
        problem.solve(solver=cp.CLARABEL, **_SOLVE_OPTS)
    return problem


def augment_state(x: State, z: float) -> State:
    """Append the ratio coordinate to the numeric part of a state."""
    return State(x.time_to_go, (*x.prices, float(z)), x.factor)


def _terminal(path: Path) -> tuple[tuple[float, ...], str]:
    last = path.states[-1]
    return last.prices, last.factor


def split_state(xt: State) -> tuple[State, float]:
    base = State(xt.time_to_go, xt.prices[:-1], xt.factor)
    return base, xt.prices[-1]


def augment_path(path: Path, zs: Sequence[float]) -> Path:
    return Path(tuple(augment_state(s, z) for s, z in zip(path.states, zs)))


# --- dual objectives ---------------------------------------------------------


class DualUtility:
    """Terminal objective ``V(prices, factor, z)`` of the dual problem."""

    endowment: Callable[[tuple[float, ...], str], float] | None = None

    def V(self, prices, factor, z) -> float:
        raise NotImplementedError

    @property
    def separable(self) -> bool:
        """True when ``V = core(z) + z * endowment`` with no endowment set,
        so subtree values factor into a profile in the start ratio."""
        return self.endowment is None

    def _endow(self, prices, factor) -> float:
        return 0.0 if self.endowment is None else float(self.endowment(prices, factor))


class LogDual(DualUtility):
    """``V = -log z - 1 + z * endowment`` (conjugate of logarithmic utility)."""

    kind = "log"

    def __init__(self, endowment=None):
        self.endowment = endowment

    def V(self, prices, factor, z):
        if z <= 0:
            return INF
        return -math.log(z) - 1.0 + z * self._endow(prices, factor)


class PowerDual(DualUtility):
    """``V = ((1-p)/p) z^(p/(p-1)) + z * endowment`` for ``0 < p < 1``."""

    kind = "power"

    def __init__(self, p: float, endowment=None):
        if not 0 < p < 1:
            raise ValueError("power exponent must lie in (0, 1)")
        self.p = p
        self.beta = p / (p - 1.0)
        self.coef = (1.0 - p) / p
        self.endowment = endowment

    def V(self, prices, factor, z):
        if z <= 0:
            return INF
        return self.coef * z ** self.beta + z * self._endow(prices, factor)


class CustomDual(DualUtility):
    """Arbitrary callback objective; solved by the generic optimizer."""

    kind = "custom"

    def __init__(self, fn: Callable[[tuple[float, ...], str, float], float],
                 endowment=None):
        self.fn = fn
        self.endowment = endowment

    def V(self, prices, factor, z):
        return float(self.fn(prices, factor, z)) + z * self._endow(prices, factor)


class DualTerminalCost(CostFunctional):
    """Cost reading the dual objective off the absorbed augmented state."""

    def __init__(self, utility: DualUtility):
        def fn(path: Path) -> float:
            limit = limit_functional(path)
            base, z = split_state(limit)
            return utility.V(base.prices, base.factor, z)

        CostFunctional.__init__(self, fn, True)
        object.__setattr__(self, "utility", utility)


# --- augmented measures ------------------------------------------------------


def augmented_measure(market: TreeMarket, node: int, ratio_law: PathMeasure,
                      z: float) -> PathMeasure:
    """Physical law of the base path paired with ``z`` times the
    likelihood-ratio process of ``ratio_law`` against the physical law."""
    phys = market.physical_measure(node)
    if z == 0.0:
        return PathMeasure({augment_path(p, [0.0] * (p.horizon + 1)): m
                            for p, m in phys.mass.items()})
    dens = density_process(ratio_law, phys)
    mass: dict[Path, float] = {}
    for p, m in phys.mass.items():
        zs = [z * dens.at(p, t) for t in range(p.horizon + 1)]
        mass[augment_path(p, zs)] = m
    return PathMeasure(mass)


class DualMeasureSet(MeasureSet):
    """Admissible set at an augmented state ``(node state, z)``.

    Its members are the physical laws of the pair (base path, scaled
    ratio process of a balanced measure); membership recovers the
    balanced measure from the terminal ratio and checks the intermediate
    coordinates against the conditional ratios.
    """

    def __init__(self, market: TreeMarket, node: int, z: float,
                 cache: NodePolytopes):
        if z < 0:
            raise ValueError("ratio coordinate must be nonnegative")
        self.market = market
        self.node = node
        self.z = float(z)
        self.cache = cache
        self.emm = EmmPolytopeSet(market, node, cache)
        self.phys = market.physical_measure(node)
        self._profile_cache: dict[tuple, float] = {}

    # -- spanning / membership

    def spanning(self, rng=None, interior_samples=config.INTERIOR_SAMPLES):
        base = self.emm.spanning(rng=rng, interior_samples=interior_samples)
        return [augmented_measure(self.market, self.node, q, self.z) for q in base]

    def contains(self, mu: PathMeasure, atol=config.VALUE_ATOL) -> bool:
        h = self.phys.horizon
        base_mass: dict[Path, float] = {}
        z_paths: dict[Path, tuple[float, ...]] = {}
        for p, m in mu.mass.items():
            bases, zs = [], []
            for s in p.states:
                b, zc = split_state(s)
                bases.append(b)
                zs.append(zc)
            bp = Path(tuple(bases))
            if bp in z_paths and z_paths[bp] != tuple(zs):
                return False  # two ratio trajectories over one base path
            z_paths[bp] = tuple(zs)
            base_mass[bp] = base_mass.get(bp, 0.0) + m
            if abs(zs[0] - self.z) > atol:
                return False
        for bp, m in base_mass.items():
            if abs(m - self.phys(bp)) > atol:
                return False
        if len(base_mass) != len(self.phys.mass):
            return False
        if self.z <= atol:
            return all(max(zs) <= atol for zs in z_paths.values())
        ratio = {bp: zs[-1] / self.z * self.phys(bp)
                 for bp, zs in z_paths.items()}
        if abs(sum(ratio.values()) - 1.0) > max(atol, 10 * config.MASS_ATOL):
            return False
        if not self.emm.contains_mass(ratio, atol):
            return False
        # intermediate coordinates must be the conditional ratios
        for t in range(h + 1):
            cells: dict[tuple, list[Path]] = {}
            for bp in z_paths:
                cells.setdefault(bp.prefix(t), []).append(bp)
            for members in cells.values():
                pm = sum(self.phys(bp) for bp in members)
                qm = sum(ratio[bp] for bp in members)
                want = 0.0 if pm == 0 else self.z * qm / pm
                for bp in members:
                    if abs(z_paths[bp][t] - want) > max(atol, 1e-8):
                        return False
        return True

    # -- common program scaffolding

    def _atom_layout(self):
        node_paths = self.market.node_paths(self.node)
        paths = [self.market.to_path(np_) for np_ in node_paths]
        pmass = np.array([self.phys(p) for p in paths])
        return node_paths, paths, pmass

    def _polytope_constraints(self, q, node_paths):
        """Balance constraints on atom masses for every live subtree node."""
        cons = [cp.sum(q) == 1]
        live: dict[int, list[tuple[int, int]]] = {}
        for i, np_ in enumerate(node_paths):
            for depth, (a, b) in enumerate(zip(np_, np_[1:])):
                live.setdefault(a, []).append((i, b))
        for n, hits in live.items():
            s_parent = np.array(self.market.states[n].prices)
            for d in range(self.market.dim):
                expr = 0
                reach = 0
                for i, child in hits:
                    price = self.market.states[child].prices[d]
                    expr = expr + q[i] * price
                    reach = reach + q[i]
                cons.append(expr == s_parent[d] * reach)
        return cons

    # -- exact minimization of dual terminal costs

    def minimize(self, fn):
        if isinstance(fn, DualTerminalCost):
            return self._minimize_dual(fn.utility)
        return self._generic_minimize(fn)

    def _minimize_dual(self, utility: DualUtility):
        node_paths, paths, pmass = self._atom_layout()
        if len(paths) == 1:
            mu = augmented_measure(self.market, self.node, dirac_like(paths[0]), self.z)
            val = expect(mu, DualTerminalCost(utility))
            return val, mu
        if self.z == 0.0:
            mu = augmented_measure(self.market, self.node, self.phys, 0.0)
            return expect(mu, DualTerminalCost(utility)), mu
        if isinstance(utility, CustomDual):
            return self._generic_minimize(DualTerminalCost(utility))
        q = cp.Variable(len(paths), nonneg=True)
        cons = self._polytope_constraints(q, node_paths)
        endow = np.array([utility._endow(*_terminal(p)) for p in paths])
        if isinstance(utility, LogDual):
            core = -pmass @ cp.log(q)
            const = float(pmass @ (np.log(pmass) - math.log(self.z) - 1.0))
        else:
            w = pmass ** (1.0 - utility.beta)
            core = utility.coef * self.z ** utility.beta * (w @ cp.power(q, utility.beta))
            const = 0.0
        objective = core + self.z * (endow @ q)
        prob = _solve(cp.Problem(cp.Minimize(objective), cons))
        if q.value is None:
            raise RuntimeError(f"dual program failed: status {prob.status}")
        qv = np.clip(q.value, 0.0, None)
        qv = qv / qv.sum()
        ratio = PathMeasure(dict(zip(paths, qv)))
        mu = augmented_measure(self.market, self.node, ratio, self.z)
        return float(prob.value) + const, mu

    def _generic_minimize(self, fn):
        """Multistart smooth optimization over per-node weights.

        Used for callback objectives without convex structure; accuracy is
        limited by the local solver and the number of starts.
        """
        live = [n for n in self.market.subtree(self.node)
                if self.market.children[n]]
        if not live:
            mu = self.spanning(interior_samples=0)[0]
            return expect(mu, fn), mu
        sizes = [len(self.market.children[n]) for n in live]
        offsets = np.cumsum([0] + sizes)
        systems = [_local_system(self.market, n) for n in live]

        def weights_of(x):
            return {n: x[offsets[i]:offsets[i + 1]] for i, n in enumerate(live)}

        def measure_of(x):
            w = weights_of(x)
            mass = {}
            for np_ in self.market.node_paths(self.node):
                m = 1.0
                for a, b in zip(np_, np_[1:]):
                    m *= w[a][self.market.children[a].index(b)]
                if m > 0:
                    mass[self.market.to_path(np_)] = m
            total = sum(mass.values())
            return PathMeasure({p: m / total for p, m in mass.items()})

        def objective(x):
            x = np.clip(x, 0.0, None)
            mu = augmented_measure(self.market, self.node, measure_of(x), self.z)
            val = expect(mu, fn)
            return val if math.isfinite(val) else 1e20

        cons = []
        for i, (a, b) in enumerate(systems):
            lo, hi = offsets[i], offsets[i + 1]
            cons.append({"type": "eq",
                         "fun": (lambda x, a=a, b=b, lo=lo, hi=hi:
                                 a @ x[lo:hi] - b)})
        starts = []
        interior = np.concatenate([self.cache.interior(n) for n in live])
        starts.append(interior)
        rng = np.random.default_rng(7)
        for _ in range(4):
            mix = []
            for n in live:
                verts = self.cache.vertices(n)
                lam = rng.dirichlet(np.ones(len(verts)))
                mix.append(0.5 * self.cache.interior(n)
                           + 0.5 * sum(l * v for l, v in zip(lam, verts)))
            starts.append(np.concatenate(mix))
        best = None
        for x0 in starts:
            res = minimize(objective, x0, method="SLSQP", constraints=cons,
                           bounds=[(0.0, 1.0)] * offsets[-1],
                           options={"maxiter": 500, "ftol": 1e-12})
            val = objective(res.x)
            if best is None or val < best[0]:
                best = (val, res.x)
        mu = augmented_measure(self.market, self.node, measure_of(best[1]), self.z)
        return best[0], mu

    # -- subtree value profiles and the stopped-layer program

    def _profile(self, node: int, utility: DualUtility) -> float:
        """Multiplier/offset of the subtree value in the start ratio.

        For the log objective this is the least relative entropy of the
        physical subtree law against a balanced one; for the power
        objective the least ``sum P^(1-beta) Q^beta``.
        """
        key = (node, utility.kind, getattr(utility, "p", None))
        if key in self._profile_cache:
            return self._profile_cache[key]
        sub = DualMeasureSet(self.market, node, 1.0, self.cache)
        node_paths, paths, pmass = sub._atom_layout()
        if len(paths) == 1:
            out = 0.0 if utility.kind == "log" else 1.0
        else:
            q = cp.Variable(len(paths), nonneg=True)
            cons = sub._polytope_constraints(q, node_paths)
            if utility.kind == "log":
                obj = pmass @ np.log(pmass) - pmass @ cp.log(q)
            else:
                w = pmass ** (1.0 - utility.beta)
                obj = w @ cp.power(q, utility.beta)
            prob = _solve(cp.Problem(cp.Minimize(obj), cons))
            if q.value is None:
                raise RuntimeError(f"profile program failed: {prob.status}")
            out = float(prob.value)
        self._profile_cache[key] = out
        return out

    def _stop_steps(self, tau: RandomTime) -> dict[tuple[int, ...], int]:
        """Stop step per base node path, clipped to the horizon.

        The time must read only base coordinates: its value is evaluated
        under two different ratio trajectories and must agree.
        """
        h = self.phys.horizon
        probe_laws = [self.phys] + self.emm.vertices()[:1]
        steps: dict[tuple[int, ...], int] = {}
        for np_ in self.market.node_paths(self.node):
            p = self.market.to_path(np_)
            vals = []
            for law in probe_laws:
                mu = augmented_measure(self.market, self.node, law,
                                       self.z if self.z > 0 else 1.0)
                lifted = next(ap for ap in mu.mass
                              if tuple(split_state(s)[0] for s in ap.states)
                              == p.states)
                vals.append(tau(lifted))
            if len(set(vals)) != 1:
                raise ValueError(
                    f"{tau.name} reads the ratio coordinate; the stopped"
                    " program needs a base-measurable time")
            t = vals[0]
            steps[np_] = h if t == INF else min(int(t), h)
        return steps

    def minimize_stopped(self, tau: RandomTime, v, cost) -> float:
        """Best expected value-at-the-stop over the admissible set.

        Solved as a convex program over the stopped-layer masses whose
        objective aggregates subtree value profiles; independent of the
        one-shot program behind :meth:`minimize`.
        """
        if not isinstance(cost, DualTerminalCost):
            raise ValueError("stopped program needs a dual terminal cost")
        utility = cost.utility
        if not utility.separable or isinstance(utility, CustomDual):
            return self._stopped_generic(tau, v, cost)
        steps = self._stop_steps(tau)
        atoms: dict[tuple[int, ...], float] = {}
        for np_, m in ((np_, self.phys(self.market.to_path(np_)))
                       for np_ in self.market.node_paths(self.node)):
            pre = np_[: steps[np_] + 1]
            atoms[pre] = atoms.get(pre, 0.0) + m
        names = sorted(atoms)
        if self.z == 0.0:
            zero = augmented_measure(self.market, self.node, self.phys, 0.0)
            return expect(zero, cost)
        index = {pre: i for i, pre in enumerate(names)}
        m_var = cp.Variable(len(names), nonneg=True)
        cons = [cp.sum(m_var) == 1]
        # flow and balance constraints through every pre-stop node
        interior: dict[tuple[int, ...], list[tuple[int, ...]]] = {}
        for pre in names:
            for k in range(1, len(pre)):
                interior.setdefault(pre[:k], []).append(pre)
        for prefix, members in interior.items():
            node = prefix[-1]
            s_parent = np.array(self.market.states[node].prices)
            kids: dict[int, list[tuple[int, ...]]] = {}
            for pre in members:
                kids.setdefault(pre[len(prefix)], []).append(pre)
            mass_of = {c: sum(m_var[index[pre]] for pre in lst)
                       for c, lst in kids.items()}
            reach = sum(mass_of.values())
            for d in range(self.market.dim):
                expr = sum(self.market.states[c].prices[d] * mass_of[c]
                           for c in mass_of)
                cons.append(expr == s_parent[d] * reach)
        pmass = np.array([atoms[pre] for pre in names])
        if isinstance(utility, LogDual):
            consts = np.array([
                -math.log(self.z) + math.log(pmass[i]) - 1.0
                + self._profile(pre[-1], utility)
                for i, pre in enumerate(names)])
            objective = -pmass @ cp.log(m_var) + float(pmass @ consts)
        else:
            w = np.array([
                utility.coef * self.z ** utility.beta
                * pmass[i] ** (1.0 - utility.beta)
                * self._profile(pre[-1], utility)
                for i, pre in enumerate(names)])
            objective = w @ cp.power(m_var, utility.beta)
        prob = _solve(cp.Problem(cp.Minimize(objective), cons))
        if m_var.value is None:
            raise RuntimeError(f"stopped program failed: {prob.status}")
        return float(prob.value)

    def _stopped_generic(self, tau, v, cost) -> float:
        """Fallback via the value oracle at reached states (endowments and
        callback objectives); accuracy limited by the outer local solver."""
        steps = self._stop_steps(tau)
        atoms: dict[tuple[int, ...], float] = {}
        for np_ in self.market.node_paths(self.node):
            pre = np_[: steps[np_] + 1]
            atoms[pre] = atoms.get(pre, 0.0) + self.phys(self.market.to_path(np_))
        names = sorted(atoms)
        pmass = np.array([atoms[pre] for pre in names])
        value_cache: dict[tuple[int, float], float] = {}

        def inner(node: int, zeta: float) -> float:
            key = (node, round(zeta, 12))
            if key not in value_cache:
                sub = DualMeasureSet(self.market, node, zeta, self.cache)
                value_cache[key] = sub.minimize(cost)[0]
            return value_cache[key]

        def objective(m):
            m = np.clip(m, 1e-15, None)
            return sum(pm * inner(pre[-1], self.z * mi / pm)
                       for pm, mi, pre in zip(pmass, m, names))

        cons = [{"type": "eq", "fun": lambda m: np.sum(m) - 1.0}]
        interior: dict[tuple[int, ...], list[int]] = {}
        for i, pre in enumerate(names):
            for k in range(1, len(pre)):
                interior.setdefault(pre[:k], []).append(i)
        for prefix, idxs in interior.items():
            node = prefix[-1]
            for d in range(self.market.dim):
                coef = np.zeros(len(names))
                for i in idxs:
                    child = names[i][len(prefix)]
                    coef[i] = (self.market.states[child].prices[d]
                               - self.market.states[node].prices[d])
                cons.append({"type": "eq",
                             "fun": (lambda m, c=coef: c @ m)})
        best = None
        for x0 in [pmass, np.ones(len(names)) / len(names)]:
            res = minimize(objective, x0, method="SLSQP", constraints=cons,
                           bounds=[(0.0, 1.0)] * len(names),
                           options={"maxiter": 300, "ftol": 1e-12})
            val = objective(res.x)
            if best is None or val < best:
                best = val
        return float(best)


def dirac_like(path: Path) -> PathMeasure:
    return PathMeasure({path: 1.0})


# --- family construction and the headline quantities -------------------------


def build_dual_family(market: TreeMarket, z0: float,
                      times: Sequence[RandomTime] = ()) -> ControlFamily:
    """Augmented-state family at the root, resolving reached states on demand."""
    cache = NodePolytopes(market)
    root_state = augment_state(market.states[market.root], z0)

    def resolver(xt: State) -> MeasureSet:
        base, z = split_state(xt)
        try:
            node = market.node_of_state(base)
        except KeyError:
            raise KernelDomainError(f"no market node behind {xt}") from None
        return DualMeasureSet(market, node, z, cache)

    admissible = {root_state: DualMeasureSet(market, market.root, z0, cache)}
    return ControlFamily(admissible, list(times), resolver=resolver)


def dual_utility_value(market: TreeMarket, utility: DualUtility,
                       z0: float) -> float:
    """Least expected dual objective at the root for start ratio ``z0``."""
    cache = NodePolytopes(market)
    mset = DualMeasureSet(market, market.root, z0, cache)
    return mset.minimize(DualTerminalCost(utility))[0]


# --- the primal side ---------------------------------------------------------


class LogUtility:
    name = "log"

    def U(self, x):
        return math.log(x) if x > 0 else -INF

    def marginal(self, x):
        return 1.0 / x

    def dual(self, endowment=None) -> DualUtility:
        return LogDual(endowment)


class PowerUtility:
    def __init__(self, p: float):
        if not 0 < p < 1:
            raise ValueError("power exponent must lie in (0, 1)")
        self.p = p
        self.name = f"power({p})"

    def U(self, x):
        return (x ** self.p) / self.p if x > 0 else -INF

    def marginal(self, x):
        return x ** (self.p - 1.0)

    def dual(self, endowment=None) -> DualUtility:
        return PowerDual(self.p, endowment)


def primal_utility_value(market: TreeMarket, utility, endowment, xi: float,
                         grad_tol: float = 1e-8) -> float:
    """Best expected utility of terminal wealth over trading strategies."""
    return primal_utility_plan(market, utility, endowment, xi, grad_tol)[0]


def primal_utility_plan(market: TreeMarket, utility, endowment, xi: float,
                        grad_tol: float = 1e-8, max_iter: int = 50_000):
    """Best expected utility of terminal wealth over trading strategies.

    Concave in the per-node holdings; maximized by gradient ascent with
    backtracking until the gradient norm drops below ``grad_tol``.
    Returns ``(value, per-node holdings)``.
    """
    live = [n for n in range(len(market.states)) if market.children[n]]
    pos = {n: i for i, n in enumerate(live)}
    d = market.dim
    node_paths = market.node_paths(market.root)
    pmass = []
    legs = []
    endowments = []
    for np_ in node_paths:
        m = 1.0
        for a, b in zip(np_, np_[1:]):
            m *= market.probs[a][market.children[a].index(b)]
        pmass.append(m)
        legs.append([(pos[a],
                      np.array(market.states[b].prices)
                      - np.array(market.states[a].prices))
                     for a, b in zip(np_, np_[1:])])
        leaf = market.states[np_[-1]]
        endowments.append(0.0 if endowment is None
                          else float(endowment(leaf.prices, leaf.factor)))
    pmass = np.array(pmass)

    def wealth(h):
        out = np.full(len(node_paths), xi, dtype=float)
        for i, path_legs in enumerate(legs):
            for j, ds in path_legs:
                out[i] += h[j] @ ds
            out[i] += endowments[i]
        return out

    def score(h):
        w = wealth(h)
        if (w <= 0).any():
            return -INF
        return float(pmass @ np.array([utility.U(x) for x in w]))

    def gradient(h):
        w = wealth(h)
        mus = pmass * np.array([utility.marginal(x) for x in w])
        g = np.zeros((len(live), d))
        for i, path_legs in enumerate(legs):
            for j, ds in path_legs:
                g[j] += mus[i] * ds
        return g

    h = np.zeros((len(live), d))
    if score(h) == -INF:
        h = _feasible_start(market, live, pos, d, node_paths, legs,
                            endowments, xi)
        if h is None or score(h) == -INF:
            raise InfeasibleWealth("no strategy keeps wealth positive")
    current = score(h)
    for _ in range(max_iter):
        g = gradient(h)
        norm = float(np.sqrt((g * g).sum()))
        if norm <= grad_tol:
            break
        step = 1.0
        while step > 1e-18:
            cand = h + step * g
            val = score(cand)
            if val > current + 0.5 * step * norm * norm:
                h, current = cand, val
                break
            step *= 0.5
        else:
            break
    return current, {n: tuple(h[pos[n]]) for n in live}


def _feasible_start(market, live, pos, d, node_paths, legs, endowments, xi):
    """Strategy maximizing the worst-case wealth, used when doing nothing
    already violates the utility domain."""
    nvar = len(live) * d + 1
    c = np.zeros(nvar)
    c[-1] = -1.0
    rows = []
    rhs = []
    for i, path_legs in enumerate(legs):
        row = np.zeros(nvar)
        row[-1] = 1.0
        for j, ds in path_legs:
            row[j * d:(j + 1) * d] -= ds
        rows.append(row)
        rhs.append(xi + endowments[i])
    res = linprog(c, A_ub=np.array(rows), b_ub=np.array(rhs),
                  bounds=[(None, None)] * (nvar - 1) + [(None, 1e12)],
                  method="highs")
    if not res.success or res.x[-1] <= 1e-12:
        return None
    return res.x[:-1].reshape(len(live), d)


# --- conjugacy ---------------------------------------------------------------


@dataclass
class ConjugacyRow:
    xi: float
    primal: float
    envelope_plus: float
    envelope_minus: float

    @property
    def plus_gap(self):
        return abs(self.primal - self.envelope_plus)

    @property
    def minus_gap(self):
        return abs(self.primal - self.envelope_minus)


@dataclass
class ConjugacyReport:
    rows: list[ConjugacyRow]
    convention: str
    max_gap: float

    def passed(self, tol: float = config.CONJUGACY_ATOL) -> bool:
        return self.max_gap <= tol


def conjugacy_check(market: TreeMarket, utility, endowment,
                    xi_grid: Sequence[float], z_grid: Sequence[float],
                    refine: bool = True) -> ConjugacyReport:
    """Compare the primal utility value against both envelope conventions.

    For each wealth level the dual value curve is scanned over the ratio
    grid (optionally polished by a bounded scalar minimization around the
    best grid point) under both sign conventions; the report names the
    convention that matches the primal values.
    """
    dual = utility.dual(endowment)
    cache: dict[float, float] = {}

    def vz(z: float) -> float:
        if z not in cache:
            cache[z] = dual_utility_value(market, dual, z)
        return cache[z]

    zs = sorted(float(z) for z in z_grid)
    rows = []
    for xi in xi_grid:
        primal = primal_utility_value(market, utility, endowment, xi)
        envs = {}
        for sign, label in [(1.0, "plus"), (-1.0, "minus")]:
            vals = [vz(z) + sign * xi * z for z in zs]
            k = int(np.argmin(vals))
            best = vals[k]
            if refine and 0 < k < len(zs) - 1:
                res = minimize_scalar(
                    lambda z: vz(float(z)) + sign * xi * float(z),
                    bounds=(zs[k - 1], zs[k + 1]), method="bounded",
                    options={"xatol": 1e-12})
                best = min(best, float(res.fun))
            envs[label] = best
        rows.append(ConjugacyRow(float(xi), primal, envs["plus"], envs["minus"]))
    plus_gap = max(r.plus_gap for r in rows)
    minus_gap = max(r.minus_gap for r in rows)
    if plus_gap <= minus_gap:
        convention = "value plus wealth-times-ratio"
        max_gap = plus_gap
    else:
        convention = "value minus wealth-times-ratio"
        max_gap = minus_gap
    return ConjugacyReport(rows, convention, max_gap)
