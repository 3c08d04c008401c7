"""Brute-force oracle: evaluate every member of a family on its induced chain."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .family import Fsc, FscFamily, make_reduced_family
from .inner import Problem
from .model import Pomdp, Specification

DEFAULT_CAP = 10**6


class CapExceeded(ValueError):
    pass


@dataclass
class EnumerationResult:
    fsc: Optional[Fsc]
    value: Optional[float]
    members: int
    admissible: int
    values: Optional[list] = None  # per member objective, when requested


def enumerate_family(problem: Problem, family: FscFamily, cap: int = DEFAULT_CAP,
                     keep_values: bool = False) -> EnumerationResult:
    """Best admissible member of `family`; ties go to the first member in lexicographic order."""
    if family.size > cap:
        raise CapExceeded(f"family has {family.size} members, cap is {cap}")
    obj = problem.objective
    best = best_value = None
    admissible = 0
    values = [] if keep_values else None
    for assignment in family.members():
        fsc = family.fsc(assignment)
        ev = problem.evaluate(fsc)
        if values is not None:
            values.append(ev.objective)
        if not ev.admissible:
            continue
        admissible += 1
        if best is None or obj.improves(ev.objective, best_value):
            best, best_value = fsc, ev.objective
    if best is not None:
        best = Fsc(best.k, best.action, best.update, best_value)
    return EnumerationResult(best, best_value, family.size, admissible, values)


def run_enumerate(pomdp: Pomdp, spec: Specification, mu=None, k: Optional[int] = None,
                  cap: int = DEFAULT_CAP) -> EnumerationResult:
    problem = Problem(pomdp, spec)
    P = problem.pomdp
    if mu is None:
        mu = [k or 1] * pomdp.num_observations
    mu = list(mu)
    if len(mu) == pomdp.num_observations and P.num_observations > len(mu):
        mu.append(1)  # observation of the fresh initial state
    return enumerate_family(problem, make_reduced_family(P, mu), cap)
