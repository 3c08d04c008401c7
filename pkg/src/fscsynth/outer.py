"""Anytime synthesis: grow the memory model and rerun the inner search."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .checker import eval_mc, expected_visits
from .events import EventLog
from .family import FscFamily, Quotient, Solution, make_reduced_family, policy_consistency
from .inner import (Budget, BudgetExceeded, Incumbent, Problem, _significances, inner_synthesize)
from .model import Pomdp, Specification

logger = logging.getLogger(__name__)


class MemoryLimitError(ValueError):
    pass


@dataclass(frozen=True)
class SymmetryRecord:
    obs: int
    first: int  # node whose parameter lost `removed_first`
    new: int  # freshly injected node, lost `removed_new`
    removed_first: int
    removed_new: int


@dataclass
class Options:
    method: str = "ar"
    complete: bool = False
    symmetry: bool = True
    memory_limit: int = 3
    timeout: Optional[float] = 60.0
    eps_rel: float = 0.0
    eps_abs: float = 1e-9
    slice_seconds: float = 1.0


@dataclass
class SynthesisState:
    mu: tuple
    family: FscFamily
    incumbent: Incumbent
    solution: Optional[Solution] = None  # pi* of the last round
    quotient: Optional[Quotient] = None
    history: list = field(default_factory=list)
    symmetry: list = field(default_factory=list)


@dataclass
class Summary:
    fsc: object
    value: Optional[float]
    nodes: int
    history: list
    symmetry: list
    families: int
    conflicts: int
    rounds: int
    wall_time: float
    stop: str
    global_bound: Optional[float]
    bounds: dict = field(default_factory=dict)  # requirement text -> tightest family bound
    trace: list = field(default_factory=list)  # (value, elapsed seconds)

    @property
    def found(self) -> bool:
        return self.fsc is not None


def _close(a: float, b: float, tol: float = 1e-9) -> bool:
    if math.isinf(a) or math.isinf(b):
        return a == b
    return abs(a - b) <= tol * max(1.0, abs(a), abs(b))


def injection_scores(problem: Problem, quotient: Quotient, family: FscFamily, solution: Solution,
                     incumbent: Incumbent) -> dict:
    """Observation -> score of adding a node there; only candidates appear."""
    pomdp = problem.pomdp
    obj = problem.objective
    scores: dict = {}
    if incumbent.fsc is None:
        for sig, p, _ in _significances(problem, quotient, family, solution, obj.label, obj.maximizing):
            z = family.params[p][1]
            if pomdp.is_trivial(z):
                continue
            scores[z] = scores.get(z, 0.0) + sig
        return scores

    fsc = incumbent.fsc
    mc = problem.evaluate(fsc).mcs[obj.label]
    values = eval_mc(mc, obj.kind)
    visits = expected_visits(mc)
    for i, (s, n) in enumerate(mc.labels):
        z = pomdp.obs[s]
        if pomdp.is_trivial(z) or visits[i] == 0:
            continue
        j = quotient.state_index.get((s, n))
        if j is None:
            continue
        a_star = quotient.option_of(solution.choices[j])[0]
        if a_star == fsc.action.get((n, z)):
            continue
        gap = solution.values[j] - values[i] if obj.maximizing else values[i] - solution.values[j]
        if np.isnan(gap):
            gap = 0.0
        with np.errstate(invalid="ignore"):
            score = visits[i] * max(0.0, gap)
        if np.isnan(score):
            score = 0.0
        scores[z] = scores.get(z, 0.0) + float(score)
    return {z: v for z, v in scores.items() if v > 0}


def choose_injection(scores: dict, mu, memory_limit: int) -> tuple[Optional[int], str]:
    """Best observation to inject, or (None, reason) with reason saturation / memory-limit."""
    if not scores:
        return None, "saturation"
    open_ = {z: v for z, v in scores.items() if mu[z] < memory_limit}
    if not open_:
        return None, "memory-limit"
    best = max(open_.values())
    return min(z for z, v in open_.items() if v == best), ""


def inject_memory(mu, z: int, memory_limit: Optional[int] = None) -> tuple:
    if memory_limit is not None and mu[z] >= memory_limit:
        raise MemoryLimitError(f"observation {z} already has {mu[z]} nodes (limit {memory_limit})")
    mu = list(mu)
    mu[z] += 1
    return tuple(mu)


def symmetry_weights(quotient: Quotient, family: FscFamily, solution: Solution, z: int, label: str,
                     maximize: bool):
    """Most significant inconsistent parameter of z and the visit weight of each action pi* uses there."""
    reach = quotient.reachable(solution)
    visits = quotient.visits(solution, label)
    inconsistent = [p for p, _ in policy_consistency(quotient, solution) if family.params[p][1] == z]
    if not inconsistent:
        return None, {}
    if len(inconsistent) > 1:
        scored = {p: s for s, p, _ in _significances(None, quotient, family, solution, label, maximize)}
        inconsistent.sort(key=lambda p: (-scored.get(p, 0.0), p))
    p = inconsistent[0]
    weights: dict = {}
    for s in np.flatnonzero(reach & (quotient.state_param == p)):
        a = quotient.option_of(solution.choices[s])[0]
        w = visits[s] if np.isfinite(visits[s]) else 0.0
        weights[a] = weights.get(a, 0.0) + float(w)
    return p, weights


def symmetry_record(family: FscFamily, param: int, weights: dict, new_node: int) -> Optional[SymmetryRecord]:
    if len(weights) < 2:
        return None
    # weights are sums of visits; compare them on a grid so float noise cannot break ties
    ranked = sorted(weights, key=lambda a: (-round(weights[a], 9), a))
    a_i, a_j = ranked[0], ranked[1]
    n, z = family.params[param]
    return SymmetryRecord(z, n, new_node, a_i, a_j)


def symmetry_allowed(pomdp: Pomdp, z: int) -> bool:
    """Swapping nodes of z needs a free choice of entry node; a point start in z is pinned to node 0."""
    start = pomdp.initial_state
    return start is None or pomdp.obs[start] != z


def apply_symmetry(family: FscFamily, records) -> FscFamily:
    domains = [list(d) for d in family.domains]
    for r in records:
        edits = [(family.index.get((r.first, r.obs)), r.removed_first),
                 (family.index.get((r.new, r.obs)), r.removed_new)]
        trial = [list(d) for d in domains]
        ok = True
        for p, a in edits:
            if p is None:
                ok = False
                break
            trial[p] = [o for o in trial[p] if o[0] != a]
            if not trial[p]:
                ok = False
        if ok:
            domains = trial
        else:
            logger.info("symmetry reduction at observation %d skipped: a domain would become empty", r.obs)
    return family.with_domains(domains)


def symmetry_reduce(family: FscFamily, record: Optional[SymmetryRecord]) -> FscFamily:
    return family if record is None else apply_symmetry(family, [record])


def synthesize(pomdp: Pomdp, spec: Specification, options: Optional[Options] = None,
               on_incumbent: Optional[Callable] = None, events: Optional[EventLog] = None,
               cancel: Optional[Callable[[], bool]] = None) -> Summary:
    options = options or Options()
    events = events or EventLog()
    start = time.monotonic()
    problem = Problem(pomdp, spec, options.eps_rel, options.eps_abs)
    P = problem.pomdp
    obj = problem.objective
    deadline = start + options.timeout if options.timeout else None
    budget = Budget(deadline, cancel)
    trace = []

    def announce(fsc, value):
        elapsed = time.monotonic() - start
        trace.append((value, elapsed))
        if on_incumbent is not None:
            on_incumbent(fsc, value, elapsed)

    incumbent = Incumbent(callbacks=[announce])
    state = SynthesisState(tuple([1] * P.num_observations), None, incumbent)
    families = conflicts = rounds = 0
    bounds: dict = {}
    global_bound = None
    stop = "saturation"
    fallback_done = False

    def run_round(family, quotient):
        nonlocal families, conflicts, rounds
        rounds += 1
        events.emit("round", mu=list(state.mu), members=family.size)
        result = inner_synthesize(problem, quotient, family, options.method, incumbent, options.complete,
                                  budget, events, options.slice_seconds)
        families += result.stats.families
        conflicts += result.stats.conflicts
        if result.root is not None:
            for i, sol in result.root.bounds.items():
                if i < len(problem.requirements):
                    req = problem.requirements[i]
                    v = sol.value()
                    key = str(req)
                    if key not in bounds:
                        bounds[key] = v
                    else:
                        bounds[key] = min(bounds[key], v) if req.maximizing else max(bounds[key], v)
        return result

    try:
        while True:
            budget.check()
            base = make_reduced_family(P, state.mu)
            quotient = Quotient(P, base)
            family = apply_symmetry(base, state.symmetry) if options.symmetry else base
            state.family, state.quotient = family, quotient
            if global_bound is None:
                global_bound = quotient.solve(base, obj.kind, obj.label, obj.maximizing).value()
            result = run_round(family, quotient)
            if not result.finished:
                stop = "timeout"
                break
            if incumbent.value is not None and _close(incumbent.value, global_bound):
                stop = "global-optimum"
                break
            state.solution = quotient.solve(family, obj.kind, obj.label, obj.maximizing)
            scores = injection_scores(problem, quotient, family, state.solution, incumbent)
            z, reason = choose_injection(scores, state.mu, options.memory_limit)
            if z is None:
                if options.symmetry and state.symmetry and not fallback_done and family.domains != base.domains:
                    fallback_done = True
                    events.emit("fallback", mu=list(state.mu))
                    result = run_round(base, quotient)
                    if not result.finished:
                        stop = "timeout"
                        break
                    if incumbent.value is not None and _close(incumbent.value, global_bound):
                        stop = "global-optimum"
                        break
                stop = reason
                break
            record = None
            if options.symmetry and symmetry_allowed(P, z):
                p, weights = symmetry_weights(quotient, family, state.solution, z, obj.label,
                                                 obj.maximizing)
                if p is not None:
                    record = symmetry_record(family, p, weights, state.mu[z])
            state.mu = inject_memory(state.mu, z, options.memory_limit)
            state.history.append(z)
            if record is not None:
                state.symmetry.append(record)
            events.emit("inject", obs=z, mu=list(state.mu),
                        symmetry=None if record is None else [record.removed_first, record.removed_new])
    except BudgetExceeded:
        stop = "timeout"

    fsc = incumbent.fsc
    summary = Summary(
        fsc=fsc,
        value=incumbent.value,
        nodes=fsc.k if fsc is not None else 0,
        history=list(state.history),
        symmetry=list(state.symmetry),
        families=families,
        conflicts=conflicts,
        rounds=rounds,
        wall_time=time.monotonic() - start,
        stop=stop,
        global_bound=global_bound,
        bounds=bounds,
        trace=trace,
    )
    events.emit("summary", value=summary.value, stop=stop, history=summary.history,
                families=families, conflicts=conflicts, rounds=rounds)
    return summary
