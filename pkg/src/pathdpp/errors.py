"""Exception hierarchy shared across the library."""


class PathDppError(Exception):
    """Base class for all library errors."""


class EvaluationPastHorizon(PathDppError):
    """A path was evaluated at a finite step beyond its horizon and its
    terminal state is not absorbing."""


class FactorMismatch(PathDppError):
    """Path gluing requires equal categorical factors at the splice point."""


class HorizonOverflow(PathDppError):
    """A glued path would need more steps than the horizon provides."""


class KernelDomainError(PathDppError):
    """A kernel was evaluated at a state outside its domain."""


class NotAdapted(PathDppError):
    """A process value at step t depends on states after t."""


class NotAbsolutelyContinuous(PathDppError):
    """Density requested for a measure pair without absolute continuity."""


class HypothesisNotVerified(PathDppError):
    """A certification was requested before its structural prechecks passed."""


class NotTreeStructured(PathDppError):
    """Backward induction requires a clock that decrements to absorption."""


class NoMartingaleMeasure(PathDppError):
    """A node's balance system admits no probability solution."""


class UnboundedPrimal(PathDppError):
    """The trading LP is unbounded, signalling an arbitrage."""


class InfeasibleWealth(PathDppError):
    """No strategy keeps terminal wealth inside the utility domain."""


class MembershipFailure(PathDppError):
    """A restart kernel produced a measure outside the admissible set."""


class InvalidTransition(PathDppError):
    """A transition table violates row normalization or clock structure."""


class VertexCapExceeded(PathDppError):
    """Vertex enumeration would exceed the configured global cap."""


class ParseError(PathDppError):
    """A scenario file could not be parsed."""


class ValidationError(PathDppError):
    """A scenario file parsed but failed schema or semantic validation."""
