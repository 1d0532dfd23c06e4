"""Batch front end: load a scenario file, run the requested task, emit a
machine-readable report.

Verbs map onto tasks: ``check`` runs the structural axiom checks, ``dpp``
certifies the dynamic-programming identity, ``hedge`` prices a claim and
cross-checks the trading LP, ``utility`` runs the dual problem or the
conjugacy comparison, ``selector`` dumps a near-optimal restart kernel.
Exit codes: 0 success, 1 certification failure, 2 input error.
"""

import argparse
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources
from typing import Any

import jsonschema
import numpy as np

from . import __version__, config
from .cmf import (ControlFamily, CostFunctional, FiniteMeasureSet,
                  check_concatenability, check_disintegrability, check_tail,
                  singleton_family)
from .dpp import epsilon_optimal_selector, solve_backward, value, verify_dpp
from .dualutil import (DualTerminalCost, LogDual, LogUtility, PowerDual,
                       PowerUtility, build_dual_family, conjugacy_check,
                       dual_utility_value)
from .errors import ParseError, PathDppError, ValidationError
from .markets import (TreeMarket, build_emm_family, certify_nflvr,
                      lower_hedge, physical_family, primal_subhedge)
from .measures import PathMeasure
from .pathspace import (INF, Path, State, constant_time, hitting_time,
                        make_state)

ENV_PREFIX = "PATHDPP_"


def _rational(x) -> float:
    if isinstance(x, str):
        return float(Fraction(x))
    return float(x)


def _schema() -> dict:
    text = resources.files("pathdpp").joinpath(
        "schema/scenario.schema.json").read_text()
    return json.loads(text)


@dataclass
class Scenario:
    """Validated scenario file contents."""

    task: str
    name: str
    seed: int
    interior_samples: int
    max_vertices: int
    tolerances: dict[str, float]
    raw: dict

    @property
    def market(self) -> TreeMarket | None:
        if "market" not in self.raw:
            return None
        spec = self.raw["market"]
        try:
            if spec["kind"] == "moves":
                return TreeMarket.from_moves(
                    _rational(spec["s0"]), spec["steps"],
                    [_rational(v) for v in spec["moves"]],
                    [_rational(v) for v in spec["probs"]],
                    spec.get("factor", ""))
            nodes = spec["nodes"]
            states = [make_state(n["t"], [_rational(v) for v in n["s"]],
                                 n.get("eta", "")) for n in nodes]
            children = [list(n.get("children", [])) for n in nodes]
            probs = [[_rational(v) for v in n.get("probs", [])] for n in nodes]
            return TreeMarket(states, children, probs)
        except ValueError as exc:
            raise ValidationError(f"market: {exc}") from exc


def load_scenario(path: str) -> Scenario:
    """Parse and validate one scenario file."""
    try:
        with open(path, "rb") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    try:
        jsonschema.validate(raw, _schema())
    except jsonschema.ValidationError as exc:
        field_path = "/".join(str(p) for p in exc.absolute_path) or "(top level)"
        raise ValidationError(f"{path}: field {field_path}: {exc.message}") from exc
    _validate_semantics(path, raw)
    name = raw.get("name") or os.path.splitext(os.path.basename(path))[0]
    tol = {"value": config.VALUE_ATOL, "dpp_gap": config.DPP_GAP_TOL,
           "duality": config.DUALITY_ATOL, "conjugacy": config.CONJUGACY_ATOL}
    tol.update(raw.get("tolerances", {}))
    scenario = Scenario(task=raw["task"], name=name,
                        seed=int(raw.get("seed", 0)),
                        interior_samples=int(raw.get("interior_samples",
                                                     config.INTERIOR_SAMPLES)),
                        max_vertices=int(raw.get("max_vertices",
                                                 config.MAX_VERTICES)),
                        tolerances=tol, raw=raw)
    scenario.market  # market structure is part of validation
    return scenario


_REQUIRED = {
    "verify_axioms": ["family", "tau_set"],
    "verify_dpp": ["family", "tau_set", "payoff"],
    "lower_hedge": ["market", "payoff"],
    "dual_utility": ["market", "V", "z0"],
    "conjugacy": ["market", "utility", "xi_grid", "z_grid"],
    "selector": ["family", "payoff", "eps"],
}


def _validate_semantics(path: str, raw: dict):
    task = raw["task"]
    missing = [k for k in _REQUIRED[task] if k not in raw]
    if missing:
        raise ValidationError(
            f"{path}: task {task} requires fields {', '.join(missing)}")
    fam = raw.get("family")
    if fam:
        kind = fam["kind"]
        if kind in ("singleton", "emm", "dual") and "market" not in raw:
            raise ValidationError(f"{path}: family kind {kind} needs a market")
        if kind == "dual" and "z0" not in fam and "z0" not in raw:
            raise ValidationError(f"{path}: dual family needs z0")
        if kind == "extensional" and "states" not in fam:
            raise ValidationError(f"{path}: extensional family needs states")
        for entry in fam.get("states", []):
            for measure in entry["measures"]:
                total = sum(Fraction(str(a["mass"])) if isinstance(a["mass"], str)
                            else Fraction(a["mass"]) for a in measure["atoms"])
                if abs(float(total) - 1.0) > 1e-9:
                    raise ValidationError(
                        f"{path}: measure masses sum to {float(total)}, not 1")


def _payoff_fn(spec: dict):
    kind = spec["type"]
    if kind == "call":
        k, a = float(spec.get("strike", 1.0)), int(spec.get("asset", 0))
        return lambda prices, eta: max(prices[a] - k, 0.0)
    if kind == "put":
        k, a = float(spec.get("strike", 1.0)), int(spec.get("asset", 0))
        return lambda prices, eta: max(k - prices[a], 0.0)
    if kind == "const":
        v = float(spec.get("value", 0.0))
        return lambda prices, eta: v
    table = {(tuple(e["s"]), e.get("eta", "")): float(e["value"])
             for e in spec.get("entries", [])}

    def lookup(prices, eta):
        try:
            return table[(tuple(prices), eta)]
        except KeyError:
            raise ValidationError(f"payoff table misses ({prices}, {eta!r})")

    return lookup


def _terminal_cost(spec: dict) -> CostFunctional:
    payoff = _payoff_fn(spec)
    return CostFunctional.terminal(lambda s: payoff(s.prices, s.factor))


def _times(spec_list, horizon: int):
    times = []
    for spec in spec_list:
        kind = spec["kind"]
        if kind == "all_const":
            times.extend(constant_time(t) for t in range(horizon + 1))
            times.append(constant_time(INF))
        elif kind == "const":
            t = spec["t"]
            times.append(constant_time(INF if t == "inf" else int(t)))
        else:
            coord = int(spec.get("coord", 0))
            level = float(spec["level"])
            op = spec.get("op", ">=")
            name = spec.get("name", f"hit[{coord}]{op}{level}")
            if op == ">=":
                pred = lambda s, c=coord, l=level: (not s.is_iota
                                                    and s.prices[c] >= l)
            else:
                pred = lambda s, c=coord, l=level: (not s.is_iota
                                                    and s.prices[c] <= l)
            times.append(hitting_time(pred, name=name))
    return times


def _state_of(spec: dict) -> State:
    return make_state(spec["t"], [_rational(v) for v in spec["s"]],
                      spec.get("eta", ""))


def _family(scenario: Scenario, times) -> ControlFamily:
    spec = scenario.raw["family"]
    kind = spec["kind"]
    market = scenario.market
    if kind == "singleton":
        return ControlFamily(physical_family(market).admissible, list(times))
    if kind == "emm":
        fam = build_emm_family(market, times=times,
                               max_vertices=scenario.max_vertices)
        return fam
    if kind == "dual":
        z0 = _rational(spec.get("z0", scenario.raw.get("z0", 1.0)))
        return build_dual_family(market, z0, times=times)
    admissible = {}
    for entry in spec["states"]:
        x = _state_of(entry["state"])
        measures = []
        for mspec in entry["measures"]:
            mass = {}
            for atom in mspec["atoms"]:
                p = Path(tuple(_state_of(s) for s in atom["path"]))
                mass[p] = mass.get(p, 0.0) + _rational(atom["mass"])
            measures.append(PathMeasure(mass))
        admissible[x] = FiniteMeasureSet(measures)
    return ControlFamily(admissible, list(times))


def _utility(spec: dict):
    if spec["kind"] == "log":
        return LogUtility()
    return PowerUtility(float(spec["p"]))


def _dual_utility(spec: dict):
    endow = _payoff_fn(spec["endowment"]) if spec.get("endowment") else None
    if spec["kind"] == "log":
        return LogDual(endow)
    return PowerDual(float(spec["p"]), endow)


def _z_grid(spec):
    if isinstance(spec, list):
        return [float(z) for z in spec]
    return list(np.geomspace(spec["lo"], spec["hi"], spec["n"]))


@dataclass
class Report:
    """Machine-readable task outcome.

    The canonical form (:func:`render` with ``json``) excludes timing so
    identical scenario and seed re-runs are byte-identical.
    """

    task: str
    scenario: str
    seed: int
    version: str
    passed: bool
    verdicts: dict[str, bool] = field(default_factory=dict)
    witnesses: dict[str, str] = field(default_factory=dict)
    values: dict[str, float] = field(default_factory=dict)
    extras: dict[str, Any] = field(default_factory=dict)
    timing_s: float = 0.0


def _state_key(x: State) -> str:
    return str(x)


def run(scenario: Scenario, tolerance: float | None = None,
        seed: int | None = None) -> Report:
    """Execute the scenario task; deterministic given (scenario, seed)."""
    t0 = time.time()
    seed = scenario.seed if seed is None else seed
    report = Report(task=scenario.task, scenario=scenario.name, seed=seed,
                    version=__version__, passed=False)
    runner = {
        "verify_axioms": _run_axioms,
        "verify_dpp": _run_dpp,
        "lower_hedge": _run_hedge,
        "dual_utility": _run_dual,
        "conjugacy": _run_conjugacy,
        "selector": _run_selector,
    }[scenario.task]
    runner(scenario, report, tolerance, seed)
    report.timing_s = time.time() - t0
    return report


def _horizon_of(scenario: Scenario) -> int:
    if scenario.market is not None:
        return scenario.market.horizon
    fam = scenario.raw.get("family", {})
    if "horizon" in fam:
        return int(fam["horizon"])
    entry = fam["states"][0]["measures"][0]["atoms"][0]
    return len(entry["path"]) - 1


def _run_axioms(scenario: Scenario, report: Report, tolerance, seed):
    horizon = _horizon_of(scenario)
    times = _times(scenario.raw["tau_set"], horizon)
    fam = _family(scenario, times)
    k = scenario.interior_samples
    atol = tolerance or scenario.tolerances["value"]
    ok_c, w_c = check_concatenability(fam, seed, k, atol)
    report.verdicts["concatenability"] = ok_c
    if not ok_c:
        report.witnesses["concatenability"] = (
            f"state {w_c[0]} measure {w_c[1].key()} time {w_c[2].name}")
    if "payoff" in scenario.raw:
        cost = _terminal_cost(scenario.raw["payoff"])
        ok_t, w_t = check_tail(fam, cost, seed, k, atol)
        report.verdicts["tail"] = ok_t
        if not ok_t:
            report.witnesses["tail"] = (
                f"state {w_t[0]} time {w_t[2].name} lhs {w_t[4]} rhs {w_t[5]}")
    ok_d, w_d = check_disintegrability(fam, seed, k, atol)
    report.verdicts["disintegrability"] = ok_d
    if not ok_d:
        report.witnesses["disintegrability"] = (
            f"measure at {w_d[0]} conditioned at {w_d[2].name} escapes at"
            f" state {w_d[3]}")
    report.passed = all(report.verdicts.values())


def _run_dpp(scenario: Scenario, report: Report, tolerance, seed):
    horizon = _horizon_of(scenario)
    times = _times(scenario.raw["tau_set"], horizon)
    fam = _family(scenario, times)
    cost = _terminal_cost(scenario.raw["payoff"])
    gap_tol = tolerance or scenario.tolerances["dpp_gap"]
    rep = verify_dpp(fam, cost, require_hypotheses=False, seed=seed,
                     interior_samples=scenario.interior_samples,
                     atol=scenario.tolerances["value"])
    report.verdicts.update(rep.prechecks)
    report.verdicts["dpp_gap"] = rep.gap <= gap_tol
    report.extras["gap"] = rep.gap
    if rep.worst is not None and rep.gap > 0:
        report.witnesses["dpp_gap"] = (
            f"state {rep.worst.state} time {rep.worst.time_name}"
            f" lhs {rep.worst.lhs} rhs {rep.worst.rhs}")
    for entry in rep.entries:
        report.values[f"{_state_key(entry.state)}@{entry.time_name}"] = entry.lhs
    report.passed = all(report.verdicts.values())


def _run_hedge(scenario: Scenario, report: Report, tolerance, seed):
    market = scenario.market
    payoff = _payoff_fn(scenario.raw["payoff"])
    vf = lower_hedge(market, payoff, max_vertices=scenario.max_vertices)
    y = primal_subhedge(market, payoff)
    root_value = vf.get(market.states[market.root])
    gap = abs(root_value - y)
    tol = tolerance or scenario.tolerances["duality"]
    report.values = {_state_key(x): v for x, v in vf.table().items()}
    report.extras["subreplication_wealth"] = y
    report.extras["duality_gap"] = gap
    report.verdicts["duality"] = gap <= tol
    report.passed = report.verdicts["duality"]


def _run_dual(scenario: Scenario, report: Report, tolerance, seed):
    market = scenario.market
    util = _dual_utility(scenario.raw["V"])
    z0 = _rational(scenario.raw["z0"])
    val = dual_utility_value(market, util, z0)
    report.extras["dual_value"] = val
    report.values[_state_key(market.states[market.root]) + f"@z={z0:g}"] = val
    ok_z = True
    fam = build_dual_family(market, z0,
                            times=_times(scenario.raw.get("tau_set", []),
                                         market.horizon))
    root = fam.domain()[0]
    phys = market.physical_measure(market.root)
    for mu in fam.measure_set(root).spanning(
            rng=np.random.default_rng(seed),
            interior_samples=scenario.interior_samples):
        total = sum(p.states[-1].prices[-1] * m for p, m in mu.mass.items())
        if abs(total - z0) > config.DENSITY_MASS_ATOL * max(1.0, z0):
            ok_z = False
    report.verdicts["ratio_conservation"] = ok_z
    if scenario.raw.get("tau_set"):
        rep = verify_dpp(fam, DualTerminalCost(util), seed=seed,
                         interior_samples=scenario.interior_samples,
                         atol=scenario.tolerances["value"])
        gap_tol = tolerance or scenario.tolerances["dpp_gap"]
        report.verdicts.update(rep.prechecks)
        report.verdicts["dpp_gap"] = rep.gap <= gap_tol
        report.extras["gap"] = rep.gap
    report.passed = all(report.verdicts.values())


def _run_conjugacy(scenario: Scenario, report: Report, tolerance, seed):
    market = scenario.market
    util = _utility(scenario.raw["utility"])
    endow = (_payoff_fn(scenario.raw["payoff"])
             if "payoff" in scenario.raw else None)
    rep = conjugacy_check(market, util, endow,
                          [float(x) for x in scenario.raw["xi_grid"]],
                          _z_grid(scenario.raw["z_grid"]))
    tol = tolerance or scenario.tolerances["conjugacy"]
    report.extras["convention"] = rep.convention
    report.extras["max_gap"] = rep.max_gap
    report.extras["rows"] = [
        {"xi": r.xi, "primal": r.primal, "envelope_plus": r.envelope_plus,
         "envelope_minus": r.envelope_minus} for r in rep.rows]
    report.verdicts["conjugacy"] = rep.passed(tol)
    report.passed = report.verdicts["conjugacy"]


def _run_selector(scenario: Scenario, report: Report, tolerance, seed):
    horizon = _horizon_of(scenario)
    times = _times(scenario.raw.get("tau_set", []), horizon)
    fam = _family(scenario, times)
    cost = _terminal_cost(scenario.raw["payoff"])
    sel = epsilon_optimal_selector(fam, cost, float(scenario.raw["eps"]))
    vf = value(fam, cost)
    dump = {}
    for x in sel.kernel.domain():
        mu = sel.kernel.at(x)
        dump[_state_key(x)] = [
            {"path": [str(s) for s in p.states], "mass": m}
            for p, m in mu.items()]
        report.values[_state_key(x)] = vf.get(x)
    report.extras["selector"] = dump
    report.passed = True


# --- rendering ---------------------------------------------------------------


def _canonical(obj):
    if isinstance(obj, float):
        if math.isinf(obj):
            return "inf" if obj > 0 else "-inf"
        if obj == int(obj) and abs(obj) < 1e15:
            return float(obj)
        return float(format(obj, ".12g"))
    if isinstance(obj, dict):
        return {str(k): _canonical(v) for k, v in sorted(obj.items())}
    if isinstance(obj, (list, tuple)):
        return [_canonical(v) for v in obj]
    return obj


def render(report: Report, fmt: str = "json") -> bytes:
    """Serialize a report; ``json`` is canonical and bit-exact."""
    if fmt == "json":
        body = {
            "task": report.task, "scenario": report.scenario,
            "seed": report.seed, "version": report.version,
            "passed": report.passed, "verdicts": report.verdicts,
            "witnesses": report.witnesses, "values": report.values,
            "extras": report.extras,
        }
        text = json.dumps(_canonical(body), sort_keys=True,
                          separators=(",", ":"))
        return (text + "\n").encode()
    if fmt == "csv":
        lines = ["state,value"]
        for k in sorted(report.values):
            lines.append(f"\"{k}\",{format(report.values[k], '.12g')}")
        return ("\n".join(lines) + "\n").encode()
    if fmt == "text":
        lines = [f"task: {report.task} ({report.scenario})",
                 f"seed: {report.seed}   version: {report.version}",
                 f"result: {'PASS' if report.passed else 'FAIL'}"]
        for k, ok in report.verdicts.items():
            mark = "ok" if ok else "FAIL"
            lines.append(f"  [{mark}] {k}")
            if k in report.witnesses:
                lines.append(f"        witness: {report.witnesses[k]}")
        for k, v in sorted(report.values.items()):
            lines.append(f"  {k} = {format(v, '.12g')}")
        for k, v in report.extras.items():
            if k != "rows" and k != "selector":
                lines.append(f"  {k}: {v}")
        lines.append(f"  elapsed: {report.timing_s:.3f}s")
        return ("\n".join(lines) + "\n").encode()
    raise ValidationError(f"unknown format {fmt!r}")


# --- entry point -------------------------------------------------------------

_VERB_TASKS = {
    "check": {"verify_axioms"},
    "dpp": {"verify_dpp"},
    "hedge": {"lower_hedge"},
    "utility": {"dual_utility", "conjugacy"},
    "selector": {"selector"},
}


def _env_default(name: str, cast, fallback):
    raw = os.environ.get(ENV_PREFIX + name)
    if raw is None:
        return fallback
    return cast(raw)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="pathdpp",
        description="exact control checks and pricing on finite event trees")
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb, tasks in _VERB_TASKS.items():
        p = sub.add_parser(verb, help=f"run a scenario with task {sorted(tasks)}")
        p.add_argument("--scenario", required=True)
        p.add_argument("--format",
                       default=_env_default("FORMAT", str, "text"),
                       choices=["json", "csv", "text"])
        p.add_argument("--tolerance", type=float,
                       default=_env_default("TOLERANCE", float, None))
        p.add_argument("--seed", type=int,
                       default=_env_default("SEED", int, None))
        p.add_argument("--max-vertices", type=int,
                       default=_env_default("MAX_VERTICES", int, None))
    args = parser.parse_args(argv)
    try:
        scenario = load_scenario(args.scenario)
        if scenario.task not in _VERB_TASKS[args.verb]:
            raise ValidationError(
                f"verb {args.verb} cannot run task {scenario.task}; allowed:"
                f" {sorted(_VERB_TASKS[args.verb])}")
        if args.max_vertices is not None:
            scenario.max_vertices = args.max_vertices
        report = run(scenario, tolerance=args.tolerance, seed=args.seed)
    except (ParseError, ValidationError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return 2
    except PathDppError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    sys.stdout.buffer.write(render(report, args.format))
    return 0 if report.passed else 1


if __name__ == "__main__":
    sys.exit(main())
