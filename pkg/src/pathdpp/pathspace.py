"""States, paths, random/stopping times, shifts and path gluing.

The state space is ``clock x prices x factor`` plus a distinguished
sentinel ``IOTA``.  Paths are finite step sequences over a fixed horizon;
a path whose terminal state is absorbing is extended constantly past the
horizon, and every path takes the value ``IOTA`` at infinite times.
"""

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

from .errors import EvaluationPastHorizon, FactorMismatch, HorizonOverflow

INF = math.inf


@dataclass(frozen=True)
class State:
    """One point of the state space.

    ``time_to_go`` is the number of steps left on the clock, ``prices`` the
    numeric coordinates (currency units), ``factor`` a categorical label.
    The sentinel has ``is_iota`` set; its other fields are ignored by every
    operation and there is exactly one canonical sentinel value.
    """

    time_to_go: int
    prices: tuple[float, ...]
    factor: str = ""
    is_iota: bool = False

    def key(self):
        """Canonical sort key (sentinel sorts first)."""
        return (not self.is_iota, self.time_to_go, self.prices, self.factor)

    def translate(self, dt: int, dp: tuple[float, ...]) -> "State":
        if self.is_iota:
            return self
        prices = tuple(p + d for p, d in zip(self.prices, dp))
        return State(self.time_to_go + dt, prices, self.factor)

    def __str__(self):
        if self.is_iota:
            return "iota"
        px = ",".join(format(p, ".12g") for p in self.prices)
        return f"(T={self.time_to_go}|S={px}|{self.factor})"


IOTA = State(0, (), "", is_iota=True)


def make_state(time_to_go: int, prices: Sequence[float], factor: str = "") -> State:
    return State(int(time_to_go), tuple(float(p) for p in prices), factor)


@dataclass(frozen=True)
class Path:
    """A step sequence of ``horizon + 1`` states."""

    states: tuple[State, ...]

    def __post_init__(self):
        if not self.states:
            raise ValueError("a path needs at least one state")

    @property
    def horizon(self) -> int:
        return len(self.states) - 1

    @property
    def is_iota_path(self) -> bool:
        return all(s.is_iota for s in self.states)

    @property
    def absorbed(self) -> bool:
        """True when the terminal state is absorbing for this path: the
        clock ran out, the last step is a fixed point, or the path is the
        constant sentinel path."""
        last = self.states[-1]
        if last.is_iota:
            return self.is_iota_path
        if last.time_to_go == 0:
            return True
        return len(self.states) >= 2 and self.states[-2] == last

    def key(self):
        return tuple(s.key() for s in self.states)

    def prefix(self, t: int) -> tuple[State, ...]:
        return self.states[: t + 1]

    def __str__(self):
        return "[" + " -> ".join(str(s) for s in self.states) + "]"


def path_of(states: Iterable[State]) -> Path:
    return Path(tuple(states))


def iota_path(horizon: int) -> Path:
    return Path((IOTA,) * (horizon + 1))


def constant_path(state: State, horizon: int) -> Path:
    return Path((state,) * (horizon + 1))


def coordinate(path: Path, t) -> State:
    """State of ``path`` at time ``t``; ``IOTA`` at ``t = inf``; the
    terminal state past the horizon when that state is absorbing."""
    if t == INF:
        return IOTA
    t = int(t)
    if t < 0:
        raise ValueError("negative time")
    if t <= path.horizon:
        return path.states[t]
    if path.absorbed:
        return path.states[-1]
    raise EvaluationPastHorizon(f"step {t} past horizon {path.horizon} of {path}")


def shift(path: Path, t) -> Path:
    """The path ``s -> X_(t+s)``, re-indexed on the same horizon.

    ``t = inf`` gives the constant sentinel path.  For finite ``t`` the
    tail past the horizon must be absorbing.
    """
    if t == INF:
        return iota_path(path.horizon)
    t = int(t)
    if t == 0:
        return path
    return Path(tuple(coordinate(path, t + s) for s in range(path.horizon + 1)))


class RandomTime:
    """A time index attached to each path: an integer step or ``inf``.

    Backed either by a callable or by an explicit table; a table doubles
    as the enumeration universe for stopping-time validation.
    """

    def __init__(self, fn: Callable[[Path], float] | None = None,
                 table: Mapping[Path, float] | None = None,
                 name: str = "tau"):
        if fn is None and table is None:
            raise ValueError("either fn or table is required")
        self._fn = fn
        self._table = dict(table) if table is not None else None
        self.name = name

    def __call__(self, path: Path) -> float:
        if self._table is not None and path in self._table:
            return self._table[path]
        if self._fn is not None:
            return self._fn(path)
        raise KeyError(f"{self.name} undefined on {path}")

    def __repr__(self):
        return f"RandomTime({self.name})"

    @property
    def table(self):
        return self._table


class StoppingTime(RandomTime):
    """A random time whose value is determined by the path up to it.

    Construct through :func:`check_stopping_time` /
    :meth:`StoppingTime.validated`, or through the trusted factories
    :func:`constant_time` and :func:`hitting_time`.
    """

    def __init__(self, fn=None, table=None, name="tau", _trusted=False):
        super().__init__(fn, table, name)
        self.validated = _trusted

    @classmethod
    def validated_from(cls, tau: RandomTime, universe: Sequence[Path]) -> "StoppingTime":
        ok, witness = check_stopping_time(tau, universe)
        if not ok:
            raise ValueError(
                f"{tau.name} anticipates the future: value at {witness[0]} "
                f"differs from value at {witness[1]} sharing the same prefix")
        st = cls(tau._fn, tau._table, tau.name, _trusted=True)
        return st


def constant_time(t, name: str | None = None) -> StoppingTime:
    label = name or (f"t={t}" if t != INF else "t=inf")
    value = t if t == INF else int(t)
    return StoppingTime(fn=lambda path: value, name=label, _trusted=True)


def hitting_time(pred: Callable[[State], bool], name: str = "hit") -> StoppingTime:
    """First step whose state satisfies ``pred``; ``inf`` when never hit."""

    def fn(path: Path) -> float:
        for t, s in enumerate(path.states):
            if pred(s):
                return t
        return INF

    return StoppingTime(fn=fn, name=name, _trusted=True)


def check_stopping_time(tau: RandomTime, universe: Sequence[Path]):
    """Enumerative test that ``tau`` never looks past its own value.

    Returns ``(True, None)`` or ``(False, (path, other_path))`` with a pair
    agreeing up to ``tau(path)`` on which the values differ.
    """
    values = {p: tau(p) for p in universe}
    for p, t in values.items():
        if t == INF:
            continue
        t = int(t)
        pre = p.prefix(t)
        for q, tq in values.items():
            if q.prefix(t) == pre and tq != t:
                return False, (p, q)
    return True, None


def concat_paths(omega: Path, omega_prime: Path, tau: RandomTime) -> Path:
    """Glue ``omega_prime`` onto ``omega`` at ``tau``.

    Numeric components of the tail are translated so the splice is
    continuous in value; categorical factors must already match at the
    splice point.  When ``tau(omega) = inf`` the result is ``omega``.
    """
    t0 = tau(omega)
    if t0 == INF:
        return omega
    t0 = int(t0)
    if t0 > omega.horizon:
        # glue point past the horizon: nothing of omega_prime is visible
        coordinate(omega, t0)  # raises unless absorbed
        return omega
    anchor = coordinate(omega, t0)
    start = coordinate(omega_prime, 0)
    if anchor.is_iota or start.is_iota:
        if anchor != start:
            raise FactorMismatch("cannot glue the sentinel onto a real state")
        return omega
    if anchor.factor != start.factor:
        raise FactorMismatch(
            f"factor {start.factor!r} of the tail start does not match "
            f"{anchor.factor!r} at the splice point")
    if len(anchor.prices) != len(start.prices):
        raise FactorMismatch("price dimension mismatch at the splice point")
    dt = anchor.time_to_go - start.time_to_go
    dp = tuple(a - b for a, b in zip(anchor.prices, start.prices))
    states = list(omega.states[:t0])
    for t in range(t0, omega.horizon + 1):
        try:
            tail = coordinate(omega_prime, t - t0)
        except EvaluationPastHorizon as exc:
            raise HorizonOverflow(
                f"glued path needs step {t - t0} of {omega_prime} "
                "but its tail is not absorbing") from exc
        states.append(tail.translate(dt, dp))
    return Path(tuple(states))


def limit_functional(path: Path, retraction: State | None = None) -> State:
    """Long-run state of a path.

    Returns the eventual constant value when the path settles (always the
    case for instances whose clock decrements to absorption), the sentinel
    for the constant sentinel path, and otherwise the designated
    retraction value (terminal state by default).  Invariant under shifts
    whenever the shift is defined.
    """
    if path.is_iota_path:
        return IOTA
    if path.absorbed:
        return path.states[-1]
    return retraction if retraction is not None else path.states[-1]
