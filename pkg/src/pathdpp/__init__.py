"""Exact engine for controlled measure families on finite path spaces.

Verifies the structural hypotheses of the dynamic-programming identity
(switch-closure, tail property, conditional stability), certifies the
identity itself, and applies the machinery to sub-replication and dual
utility maximization on finite event-tree markets with LP cross-checks.
"""

__version__ = "0.1.0"

from .pathspace import (INF, IOTA, Path, RandomTime, State, StoppingTime,
                        check_stopping_time, concat_paths, constant_path,
                        constant_time, coordinate, hitting_time, iota_path,
                        limit_functional, make_state, shift)
from .measures import (DensityProcess, Kernel, PathMeasure, abs_continuous,
                       concat_measures, conditional_shift, density_process,
                       dirac, equivalent, expect, is_martingale,
                       partition_density, product)
from .cmf import (ControlFamily, CostFunctional, FiniteMeasureSet, MeasureSet,
                  Selector, check_concatenability, check_disintegrability,
                  check_tail, disintegration_kernel, singleton_family)
from .dpp import (DppReport, ValueFunction, dpp_rhs, epsilon_optimal_selector,
                  solve_backward, value, verify_dpp)
from .markets import (EmmPolytopeSet, TreeMarket, binomial_market,
                      build_emm_family, certify_nflvr, lower_hedge,
                      physical_family, primal_subhedge, subhedge_plan,
                      trinomial_market)
from .dualutil import (ConjugacyReport, CustomDual, DualMeasureSet,
                       DualTerminalCost, DualUtility, LogDual, LogUtility,
                       PowerDual, PowerUtility, augment_state,
                       augmented_measure, build_dual_family, conjugacy_check,
                       dual_utility_value, primal_utility_plan,
                       primal_utility_value, split_state)
