"""Search for the best admissible FSC inside a fixed family.

Two oracles are available: abstraction refinement over the quotient MDP
(``ar``) and counterexample-guided enumeration over a conflict store
(``cegis``). ``hybrid`` alternates between them in time slices.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import math
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .checker import eval_mc
from .events import EventLog
from .family import (Fsc, FscFamily, Quotient, Solution, extract_fsc, induced_mc,
                     policy_consistency)
from .model import Constraint, Mc, Pomdp, Specification, mc_from_rows, normalize_initial

logger = logging.getLogger(__name__)


class BudgetExceeded(Exception):
    pass


@dataclass(frozen=True)
class Requirement:
    """Threshold on a reachability or reward value (constraint or running optimum)."""

    kind: str
    direction: str
    threshold: float
    label: str

    @classmethod
    def of(cls, c: Constraint) -> "Requirement":
        return cls(c.kind, c.direction, c.threshold, c.label)

    @property
    def maximizing(self) -> bool:
        return self.direction == ">="

    def holds(self, value: float) -> bool:
        if self.direction == ">=":
            return value >= self.threshold
        return value <= self.threshold

    def __str__(self):
        return f"{self.kind} {self.direction} {self.threshold:.10g} reach {self.label}"


@dataclass
class Evaluation:
    values: list  # per requirement, value at the initial state
    objective: float
    admissible: bool
    mcs: dict  # label -> induced Mc


class Problem:
    """A POMDP with a single initial state, a specification and the tightening rule."""

    def __init__(self, pomdp: Pomdp, spec: Specification, eps_rel: float = 0.0, eps_abs: float = 1e-9):
        spec.check_labels(pomdp)
        self.pomdp = normalize_initial(pomdp)
        self.spec = spec
        self.requirements = [Requirement.of(c) for c in spec.effective_constraints()]
        self.objective = spec.objective
        self.eps_rel = eps_rel
        self.eps_abs = eps_abs

    def optimum_requirement(self, value: Optional[float]) -> Optional[Requirement]:
        if value is None:
            return None
        obj = self.objective
        if obj.maximizing:
            return Requirement(obj.kind, ">=", value * (1 + self.eps_rel) + self.eps_abs, obj.label)
        return Requirement(obj.kind, "<=", value * (1 - self.eps_rel) - self.eps_abs, obj.label)

    def evaluate(self, fsc: Fsc) -> Evaluation:
        mcs = {}
        cache = {}

        def value(kind, label):
            if label not in mcs:
                mcs[label] = induced_mc(self.pomdp, fsc, label)
            if (kind, label) not in cache:
                cache[(kind, label)] = float(eval_mc(mcs[label], kind)[0])
            return cache[(kind, label)]

        values = [value(r.kind, r.label) for r in self.requirements]
        objective = value(self.objective.kind, self.objective.label)
        admissible = all(r.holds(v) for r, v in zip(self.requirements, values))
        return Evaluation(values, objective, admissible, mcs)


@dataclass
class Incumbent:
    fsc: Optional[Fsc] = None
    value: Optional[float] = None
    callbacks: list = field(default_factory=list)

    def offer(self, problem: Problem, fsc: Fsc, value: float) -> bool:
        req = problem.optimum_requirement(self.value)
        if req is not None and not req.holds(value):
            return False
        self.fsc = Fsc(fsc.k, fsc.action, fsc.update, value)
        self.value = value
        for cb in self.callbacks:
            cb(self.fsc, value)
        return True


@dataclass
class Budget:
    deadline: Optional[float] = None
    cancel: Optional[Callable[[], bool]] = None

    def check(self):
        if self.deadline is not None and time.monotonic() >= self.deadline:
            raise BudgetExceeded()
        if self.cancel is not None and self.cancel():
            raise BudgetExceeded()

    def remaining(self) -> float:
        if self.deadline is None:
            return math.inf
        return self.deadline - time.monotonic()


# --- abstraction refinement ------------------------------------------------------

PRUNED_VIOLATE = "pruned-all-violate"
PRUNED_OPTIMUM = "pruned-by-optimum"
IMPROVING = "improving-fsc-found"
ALL_SATISFY = "all-members-satisfy"
UNDECIDED = "undecided"


@dataclass
class FamilyVerdict:
    tag: str
    fsc: Optional[Fsc] = None
    value: Optional[float] = None
    constraint: Optional[int] = None  # violated requirement; len(requirements) = running optimum
    solution: Optional[Solution] = None  # objective policy pi* with its values
    bounds: dict = field(default_factory=dict)  # requirement index -> favourable Solution
    certified: tuple = ()
    exhausted: bool = False  # no member can beat what was found
    split_on: Optional[Solution] = None
    split_label: Optional[str] = None
    split_maximize: bool = True


def analyze_family(problem: Problem, quotient: Quotient, family: FscFamily,
                   optimum: Optional[float]) -> FamilyVerdict:
    bounds = {}
    reqs = problem.requirements
    for i, req in enumerate(reqs):
        sol = quotient.solve(family, req.kind, req.label, req.maximizing)
        bounds[i] = sol
        if not req.holds(sol.value()):
            return FamilyVerdict(PRUNED_VIOLATE, constraint=i, bounds=bounds, exhausted=True)
    obj = problem.objective
    sol_obj = quotient.solve(family, obj.kind, obj.label, obj.maximizing)
    opt_req = problem.optimum_requirement(optimum)
    if opt_req is not None:
        bounds[len(reqs)] = sol_obj
        if not opt_req.holds(sol_obj.value()):
            return FamilyVerdict(PRUNED_OPTIMUM, constraint=len(reqs), solution=sol_obj, bounds=bounds,
                                 exhausted=True)
    certified = []
    for i, req in enumerate(reqs):
        adverse = quotient.solve(family, req.kind, req.label, not req.maximizing)
        if req.holds(adverse.value()):
            certified.append(i)
    verdict = FamilyVerdict(UNDECIDED, solution=sol_obj, bounds=bounds, certified=tuple(certified))
    if len(certified) == len(reqs):
        verdict.tag = ALL_SATISFY

    candidates = [(sol_obj, obj.label, obj.maximizing, True)]
    candidates += [(bounds[i], reqs[i].label, reqs[i].maximizing, False)
                   for i in range(len(reqs)) if i not in certified]
    seen = set()
    for sol, label, maximize, is_objective in candidates:
        inconsistent = policy_consistency(quotient, sol)
        if inconsistent:
            if verdict.split_on is None:
                verdict.split_on, verdict.split_label, verdict.split_maximize = sol, label, maximize
            continue
        fsc = extract_fsc(family, quotient.selection(sol))
        key = family.assignment_of(fsc)
        if key in seen:
            continue
        seen.add(key)
        ev = problem.evaluate(fsc)
        if not ev.admissible:
            continue
        if opt_req is None or opt_req.holds(ev.objective):
            if verdict.fsc is None or obj.improves(ev.objective, verdict.value):
                verdict.tag = IMPROVING
                verdict.fsc = fsc
                verdict.value = ev.objective
        if is_objective:
            # the objective policy is a member and attains the family bound
            verdict.exhausted = True
    return verdict


def significance(quotient: Quotient, family: FscFamily, param: int, options, solution: Solution,
                 visits: np.ndarray, maximize: bool) -> float:
    """Visit-weighted value lost at `param` if pi* had to use one of its other chosen options."""
    chosen = {a * quotient.k + m for a, m in options}
    reach = quotient.reachable(solution)
    total = 0.0
    for s in np.flatnonzero(reach & (quotient.state_param == param)):
        w = visits[s]
        if w == 0:
            continue
        c = solution.choices[s]
        lo, hi = quotient.groups[s], quotient.groups[s + 1]
        best_q = solution.q[c]
        alt = [solution.q[d] for d in range(lo, hi)
               if d != c and quotient.choice_option[d] in chosen and not np.isnan(solution.q[d])]
        if not alt:
            continue
        with np.errstate(invalid="ignore"):
            loss = best_q - max(alt) if maximize else min(alt) - best_q
        if np.isnan(loss):  # inf - inf
            loss = 0.0
        loss = max(loss, 0.0)
        if loss == 0:
            continue
        total += w * loss
    return float(total)


def _significances(problem, quotient, family, solution, label, maximize):
    inconsistent = policy_consistency(quotient, solution)
    if not inconsistent:
        return []
    visits = quotient.visits(solution, label)
    return [(significance(quotient, family, p, opts, solution, visits, maximize), p, opts)
            for p, opts in inconsistent]


def split(problem: Problem, quotient: Quotient, family: FscFamily, solution: Solution,
          label: str, maximize: bool) -> list[FscFamily]:
    """Split the most significant inconsistent parameter of `solution`."""
    scored = _significances(problem, quotient, family, solution, label, maximize)
    if not scored:
        return split_fallback(family)
    best = max(scored, key=lambda t: (t[0], -t[1]))
    _, p, opts = best
    return partition(family, p, opts)


def partition(family: FscFamily, p: int, chosen) -> list[FscFamily]:
    dom = family.domains[p]
    chosen = [o for o in dom if o in set(chosen)]
    rest = [o for o in dom if o not in set(chosen)]
    children = [family.restrict(p, [o]) for o in chosen]
    if rest:
        children.append(family.restrict(p, rest))
    return children


def split_fallback(family: FscFamily) -> list[FscFamily]:
    """Halve the first non-singleton domain (used when no policy is inconsistent)."""
    for p, dom in enumerate(family.domains):
        if len(dom) > 1:
            half = len(dom) // 2
            return [family.restrict(p, dom[:half]), family.restrict(p, dom[half:])]
    return []


def incomplete_restrict(quotient: Quotient, family: FscFamily, solution: Solution) -> FscFamily:
    """Keep only the options pi* uses: fixed where consistent, the chosen set where not."""
    chosen = quotient.selection(solution)
    domains = list(family.domains)
    for p, opts in chosen.items():
        domains[p] = tuple(sorted(o for o in opts if o in family.domains[p]))
    return family.with_domains(domains)


# --- counterexamples ------------------------------------------------------------


@dataclass
class Counterexample:
    states: list  # product states (state, node) in C
    constraint: int
    value: float
    relevant: dict  # (node, obs) -> option chosen by the refuted controller


def _sub_value(mc: Mc, inside: np.ndarray, bound: np.ndarray, req: Requirement) -> float:
    """Value at the initial state of the sub-chain of `inside`, other states rerouted via their bound."""
    n = mc.num_states
    if not inside[mc.initial]:
        return float(bound[mc.initial])
    top, bottom = n, n + 1
    rows = []
    rewards = np.zeros(n + 2)
    targets = [top]
    for s in range(n):
        if inside[s]:
            lo, hi = mc.matrix.indptr[s], mc.matrix.indptr[s + 1]
            rows.append(list(zip(mc.matrix.indices[lo:hi], mc.matrix.data[lo:hi])))
            rewards[s] = mc.rewards[s]
            if mc.targets[s]:
                targets.append(s)
            continue
        b = bound[s]
        if req.kind == "P":
            row = [(top, b), (bottom, 1.0 - b)] if 0.0 < b < 1.0 else [(top if b >= 1.0 else bottom, 1.0)]
        elif mc.targets[s]:
            row = [(top, 1.0)]
        elif math.isinf(b):
            row = [(bottom, 1.0)]
        else:
            row = [(top, 1.0)]
            rewards[s] = b
        rows.append(row)
    rows.append([(top, 1.0)])
    rows.append([(bottom, 1.0)])
    sub = mc_from_rows(rows, mc.initial, rewards, targets)
    return float(eval_mc(sub, req.kind)[mc.initial])


def compute_ce(mc: Mc, req: Requirement, bound: np.ndarray, constraint: int = 0) -> Counterexample:
    """Greedy counterexample: breadth-first waves from the initial state, then a reverse shrink.

    `mc` is an induced chain whose `labels` are (state, node) pairs and
    `bound` holds the family bound (ub for >=, lb for <=) per chain state.
    """
    n = mc.num_states
    dist = np.full(n, -1)
    dist[mc.initial] = 0
    order = [mc.initial]
    queue = deque([mc.initial])
    while queue:
        s = queue.popleft()
        for t in mc.matrix.indices[mc.matrix.indptr[s]:mc.matrix.indptr[s + 1]]:
            if dist[t] < 0:
                dist[t] = dist[s] + 1
                order.append(int(t))
                queue.append(int(t))
    inside = np.zeros(n, dtype=bool)
    found = None
    for d in range(int(dist.max()) + 1):
        inside[dist == d] = True
        value = _sub_value(mc, inside, bound, req)
        if not req.holds(value):
            found = value
            break
    if found is None:
        raise RuntimeError("controller does not violate the requirement on its own reachable chain")
    members = [s for s in order if inside[s]]
    for s in reversed(members):
        inside[s] = False
        value = _sub_value(mc, inside, bound, req)
        if req.holds(value):
            inside[s] = True
        else:
            found = value
    states = [mc.labels[s] for s in np.flatnonzero(inside)]
    return Counterexample(states, constraint, found, {})


def generalize_ce(ce: Counterexample, pomdp: Pomdp, fsc: Fsc, complete: bool = True,
                  selection: Optional[dict] = None, family: Optional[FscFamily] = None) -> dict:
    """Conflict {parameter: option} refuting every member that agrees with `fsc` on it.

    In incomplete mode a parameter is dropped when its observation is
    consistent under pi* (`selection`, parameter index -> options chosen over
    all product states) and `fsc` picks the option pi* picks.
    """
    relevant = {}
    for s, n in ce.states:
        p = (n, pomdp.obs[s])
        relevant[p] = fsc.option(p)
    if complete or selection is None:
        return relevant
    inconsistent_obs = {family.params[p][1] for p, opts in selection.items() if len(opts) > 1}
    out = {}
    for p, opt in relevant.items():
        chosen = selection.get(family.index[p], set())
        if p[1] not in inconsistent_obs and chosen == {opt}:
            continue
        out[p] = opt
    return out


# --- conflict store -----------------------------------------------------------------


class ConflictStore:
    """Lexicographic enumeration of family members avoiding all learned conflicts."""

    def __init__(self, family: FscFamily, conflicts=()):
        self.family = family
        self.position = [{o: i for i, o in enumerate(d)} for d in family.domains]
        self.conflicts = []  # (constraint, {param: option})
        self.by_last = {}
        self.cursor = None
        self.exhausted = False
        for constraint, conflict in conflicts:
            self.add(conflict, constraint)

    def add(self, conflict: dict, constraint: int = -1) -> bool:
        """Store a conflict; returns False when it cannot match any member."""
        items = []
        for param, opt in conflict.items():
            p = self.family.index[param]
            pos = self.position[p].get(opt)
            if pos is None:
                return False
            items.append((p, pos))
        self.conflicts.append((constraint, dict(conflict)))
        if not items:
            self.exhausted = True
            return True
        items.sort()
        self.by_last.setdefault(items[-1][0], []).append(items)
        return True

    def _blocked(self, i: int, pos: list) -> bool:
        for items in self.by_last.get(i, ()):
            if all(pos[p] == v for p, v in items):
                return True
        return False

    def next_candidate(self):
        if self.exhausted:
            return None
        sizes = [len(d) for d in self.family.domains]
        n = len(sizes)
        if self.cursor is None:
            pos = [0] * n
        else:
            pos = list(self.cursor)
            j = n - 1
            while j >= 0:
                pos[j] += 1
                if pos[j] < sizes[j]:
                    break
                pos[j] = 0
                j -= 1
            if j < 0:
                self.exhausted = True
                return None
        i = 0
        while i < n:
            if pos[i] >= sizes[i]:
                if i == 0:
                    self.exhausted = True
                    return None
                pos[i] = 0
                i -= 1
                pos[i] += 1
                for j in range(i + 1, n):
                    pos[j] = 0
                continue
            if self._blocked(i, pos):
                pos[i] += 1
                for j in range(i + 1, n):
                    pos[j] = 0
                continue
            i += 1
        self.cursor = pos
        return tuple(self.family.domains[p][v] for p, v in enumerate(pos))

    def refutes(self, assignment) -> bool:
        values = dict(zip(self.family.params, assignment))
        return any(all(values[p] == o for p, o in c.items()) for _, c in self.conflicts)


def cegis_round(store: ConflictStore):
    """Next unrefuted candidate assignment, or None when the store is exhausted."""
    return store.next_candidate()


# --- the inner loop ----------------------------------------------------------------


@dataclass
class InnerStats:
    families: int = 0
    pruned_members: int = 0
    refuted_members: int = 0
    dropped_members: int = 0
    candidates: int = 0
    conflicts: int = 0
    ce_sizes: list = field(default_factory=list)


@dataclass
class InnerResult:
    fsc: Optional[Fsc]
    value: Optional[float]
    finished: bool  # search space exhausted (not cut by the budget)
    root: Optional[FamilyVerdict]
    stats: InnerStats
    learned: list = field(default_factory=list)  # (family, constraint, conflict) for auditing


class InnerSearch:
    def __init__(self, problem: Problem, quotient: Quotient, family: FscFamily, incumbent: Incumbent,
                 complete: bool = True, budget: Optional[Budget] = None, events: Optional[EventLog] = None,
                 keep_conflicts: bool = False):
        self.problem = problem
        self.quotient = quotient
        self.family = family
        self.incumbent = incumbent
        self.complete = complete
        self.budget = budget or Budget()
        self.events = events or EventLog()
        self.stats = InnerStats()
        self.keep_conflicts = keep_conflicts
        self.learned = []
        self.best = None
        self.best_value = None

    def _offer(self, fsc, value):
        if self.incumbent.offer(self.problem, fsc, value):
            self.best, self.best_value = self.incumbent.fsc, value
            self.events.emit("incumbent", value=value)
            return True
        return False

    # AR ---------------------------------------------------------------------

    def analyze(self, family):
        self.budget.check()
        verdict = analyze_family(self.problem, self.quotient, family, self.incumbent.value)
        self.stats.families += 1
        self.events.emit("family", members=family.size, verdict=verdict.tag,
                         bound=verdict.solution.value() if verdict.solution else None)
        if verdict.fsc is not None:
            self._offer(verdict.fsc, verdict.value)
        return verdict

    def refine(self, family, verdict, conflicts=()) -> list:
        """Children of an undecided family (possibly after the incomplete restriction)."""
        sol, label, maximize = verdict.split_on, verdict.split_label, verdict.split_maximize
        if not self.complete:
            base = verdict.solution
            restricted = incomplete_restrict(self.quotient, family, base)
            self.stats.dropped_members += family.size - restricted.size
            if restricted.domains != family.domains:
                self.events.emit("restrict", before=family.size, after=restricted.size)
                return [restricted]
        if sol is None:
            children = split_fallback(family)
        else:
            children = split(self.problem, self.quotient, family, sol, label, maximize)
        self.events.emit("split", members=family.size, children=[c.size for c in children])
        return children

    def _key(self, verdict):
        v = verdict.solution.value() if verdict.solution is not None else 0.0
        return -v if self.problem.objective.maximizing else v

    def run_ar(self, conflicts_of=None):
        heap = []
        counter = itertools.count()
        root_verdict = None
        root = self.family
        heap.append((0.0, next(counter), root, []))
        hybrid = conflicts_of is not None
        while heap:
            key, _, family, conflicts = heapq.heappop(heap)
            if conflicts and _refuted(family, conflicts):
                self.stats.refuted_members += family.size
                continue
            if hybrid and conflicts_of(family, conflicts):
                continue
            verdict = self.analyze(family)
            if root_verdict is None:
                root_verdict = verdict
            if verdict.exhausted or verdict.tag in (PRUNED_VIOLATE, PRUNED_OPTIMUM):
                self.stats.pruned_members += family.size
                self.events.emit("pruned", members=family.size, verdict=verdict.tag)
                continue
            if verdict.tag == IMPROVING:
                # re-analyse under the tightened optimum
                heapq.heappush(heap, (self._key(verdict), next(counter), family, conflicts))
                continue
            for child in self.refine(family, verdict):
                heapq.heappush(heap, (self._key(verdict), next(counter), child, list(conflicts)))
        return root_verdict

    # CEGIS ------------------------------------------------------------------

    def run_cegis(self, family=None, conflicts=(), slice_end=None):
        """Enumerate members of `family` until exhausted; returns (exhausted, store)."""
        family = family or self.family
        store = ConflictStore(family, conflicts)
        seed = self.analyze(family)
        if seed.exhausted or seed.tag in (PRUNED_VIOLATE, PRUNED_OPTIMUM):
            self.stats.pruned_members += family.size
            return True, store, seed
        reqs = self.problem.requirements
        selections = {}
        while True:
            self.budget.check()
            if slice_end is not None and time.monotonic() >= slice_end:
                return False, store, seed
            assignment = store.next_candidate()
            if assignment is None:
                return True, store, seed
            self.stats.candidates += 1
            fsc = family.fsc(assignment)
            ev = self.problem.evaluate(fsc)
            if ev.admissible:
                self._offer(fsc, ev.objective)
            opt_req = self.problem.optimum_requirement(self.incumbent.value)
            checks = list(enumerate(reqs))
            if opt_req is not None:
                checks.append((len(reqs), opt_req))
            for i, req in checks:
                value = ev.values[i] if i < len(reqs) else ev.objective
                if req.holds(value):
                    continue
                bound_solution = self._bound_solution(seed, family, i, req)
                mc = ev.mcs[req.label]
                bound = np.array([bound_solution.values[self.quotient.state_index[st]] for st in mc.labels])
                ce = compute_ce(mc, req, bound, i)
                selection = None
                if not self.complete:
                    if i not in selections:
                        selections[i] = self.quotient.selection(bound_solution, reachable_only=False)
                    selection = selections[i]
                conflict = generalize_ce(ce, self.problem.pomdp, fsc, self.complete, selection, family)
                store.add(conflict, i)
                self.stats.conflicts += 1
                self.stats.ce_sizes.append(len(ce.states))
                if self.keep_conflicts:
                    self.learned.append((family, req, conflict))
                self.events.emit("conflict", constraint=i, ce_size=len(ce.states), params=len(conflict))

    def _bound_solution(self, seed, family, i, req):
        sol = seed.bounds.get(i)
        if sol is None:
            sol = self.quotient.solve(family, req.kind, req.label, req.maximizing)
            seed.bounds[i] = sol
        return sol

    # hybrid -----------------------------------------------------------------

    def run_hybrid(self, slice_seconds: float = 1.0):
        state = {"phase": "ar", "until": time.monotonic() + slice_seconds}

        def maybe_cegis(family, conflicts):
            now = time.monotonic()
            if now >= state["until"]:
                state["phase"] = "cegis" if state["phase"] == "ar" else "ar"
                state["until"] = now + slice_seconds
            if state["phase"] != "cegis":
                return False
            exhausted, store, _ = self.run_cegis(family, conflicts, slice_end=state["until"])
            if exhausted:
                return True
            conflicts[:] = [(c, conf) for c, conf in store.conflicts]
            state["phase"] = "ar"
            state["until"] = time.monotonic() + slice_seconds
            return False

        return self.run_ar(conflicts_of=maybe_cegis)


def _refuted(family: FscFamily, conflicts) -> bool:
    for _, conflict in conflicts:
        if all(family.domains[family.index[p]] == (o,) for p, o in conflict.items()):
            return True
    return False


def inner_synthesize(problem: Problem, quotient: Quotient, family: FscFamily, method: str = "ar",
                     incumbent: Optional[Incumbent] = None, complete: bool = True,
                     budget: Optional[Budget] = None, events: Optional[EventLog] = None,
                     slice_seconds: float = 1.0, keep_conflicts: bool = False) -> InnerResult:
    incumbent = incumbent if incumbent is not None else Incumbent()
    search = InnerSearch(problem, quotient, family, incumbent, complete, budget, events, keep_conflicts)
    root = None
    finished = True
    try:
        if method == "ar":
            root = search.run_ar()
        elif method == "cegis":
            _, _, root = search.run_cegis()
        elif method == "hybrid":
            root = search.run_hybrid(slice_seconds)
        else:
            raise ValueError(f"unknown method {method}")
    except BudgetExceeded:
        finished = False
    return InnerResult(search.best, search.best_value, finished, root, search.stats, search.learned)
