"""Central numeric tolerances and enumeration limits.

Every equality assertion in the library routes through one of these
constants so that a scenario file can tighten or relax them in one place.
"""

# probability masses must sum to one within this
MASS_ATOL = 1e-12

# generic equality tolerance for expectations, masses, martingale tests
VALUE_ATOL = 1e-9

# certification threshold for dynamic-programming gaps
DPP_GAP_TOL = 1e-7

# agreement required between hedging value and the trading LP
DUALITY_ATOL = 1e-6

# conservation of density-process mass under the base measure
DENSITY_MASS_ATOL = 1e-12

# agreement between conjugate envelope and the primal utility value
CONJUGACY_ATOL = 1e-4

# number of seeded interior samples used to span a weight polytope
INTERIOR_SAMPLES = 8

# hard cap on enumerated polytope vertices (product across tree nodes)
MAX_VERTICES = 100_000


def eps_floor(value: float, eps: float) -> float:
    """Near-optimality threshold ``value + eps`` with ``-inf + eps = -1/eps``."""
    if value == float("-inf"):
        return -1.0 / eps
    if value == float("inf"):
        return float("inf")
    return value + eps
