"""Deterministic FSCs, families of FSCs and the quotient MDP over a family."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Optional

import numpy as np
import scipy.sparse as sp

from .checker import Mdp, expected_visits, q_values, solve_mdp
from .model import Mc, ModelError, Pomdp, mc_from_rows

Option = tuple[int, int]  # (action, successor node)
Param = tuple[int, int]  # (node, observation)


@dataclass(frozen=True)
class Fsc:
    """Mealy-style controller; `action` and `update` are keyed by (node, observation)."""

    k: int
    action: dict
    update: dict
    value: Optional[float] = None

    def option(self, param: Param) -> Option:
        return self.action[param], self.update[param]

    def next_node(self, node: int, obs: int) -> int:
        # updates into a node the observation has no memory for fall back to node 0
        return node if (node, obs) in self.action else 0


@dataclass(frozen=True)
class FscFamily:
    mu: tuple[int, ...]
    params: tuple[Param, ...]
    domains: tuple[tuple[Option, ...], ...]

    @property
    def k(self) -> int:
        return max(self.mu)

    @cached_property
    def index(self) -> dict:
        return {p: i for i, p in enumerate(self.params)}

    @property
    def size(self) -> int:
        return math.prod(len(d) for d in self.domains)

    @property
    def num_params(self) -> int:
        return len(self.params)

    def restrict(self, param: int, subdomain: Iterable[Option]) -> "FscFamily":
        sub = tuple(sorted(set(subdomain)))
        if not sub:
            raise ValueError("cannot restrict a parameter to an empty domain")
        if not set(sub) <= set(self.domains[param]):
            raise ValueError(f"options {sub} are not a subset of the domain of {self.params[param]}")
        domains = list(self.domains)
        domains[param] = sub
        return FscFamily(self.mu, self.params, tuple(domains))

    def with_domains(self, domains) -> "FscFamily":
        return FscFamily(self.mu, self.params, tuple(tuple(sorted(d)) for d in domains))

    def contains(self, fsc: Fsc) -> bool:
        return all(fsc.option(p) in d for p, d in zip(self.params, self.domains))

    def assignment_of(self, fsc: Fsc) -> tuple[Option, ...]:
        return tuple(fsc.option(p) for p in self.params)

    def fsc(self, assignment: Iterable[Option]) -> Fsc:
        action = {}
        update = {}
        for p, (a, n) in zip(self.params, assignment):
            action[p] = a
            update[p] = n
        return Fsc(self.k, action, update)

    def members(self):
        """Iterate over all member assignments in lexicographic domain order."""
        return itertools.product(*self.domains)


def make_reduced_family(pomdp: Pomdp, mu: Iterable[int]) -> FscFamily:
    mu = tuple(int(m) for m in mu)
    if len(mu) != pomdp.num_observations or min(mu) < 1:
        raise ValueError("memory model needs a positive node count per observation")
    k = max(mu)
    params = []
    domains = []
    obs_actions = [pomdp.observation_actions(z) for z in range(pomdp.num_observations)]
    for z, acts in enumerate(obs_actions):
        if not acts and any(o == z for o in pomdp.obs):
            raise ModelError(f"no action is enabled in all states of observation {z}")
    for n in range(k):
        for z in range(pomdp.num_observations):
            if n < mu[z] and obs_actions[z]:
                params.append((n, z))
                domains.append(tuple((a, m) for a in obs_actions[z] for m in range(k)))
    return FscFamily(mu, tuple(params), tuple(domains))


def make_full_family(pomdp: Pomdp, k: int) -> FscFamily:
    if k < 1:
        raise ValueError("k must be positive")
    return make_reduced_family(pomdp, (k,) * pomdp.num_observations)


def _target_mask(pomdp: Pomdp, states: list, label: str) -> np.ndarray:
    target = pomdp.target(label)
    return np.array([s in target for s, _ in states], dtype=bool)


def induced_mc(pomdp: Pomdp, fsc: Fsc, label: str) -> Mc:
    """Product chain of `pomdp` under `fsc`, restricted to reachable (state, node) pairs."""
    s0 = pomdp.initial_state
    if s0 is None:
        raise ModelError("induced chains need a point initial state; call normalize_initial")
    index = {(s0, 0): 0}
    states = [(s0, 0)]
    rows = []
    rewards = []
    i = 0
    while i < len(states):
        s, n = states[i]
        z = pomdp.obs[s]
        if (n, z) in fsc.action:
            a, m = fsc.action[(n, z)], fsc.update[(n, z)]
        elif z == pomdp.bootstrap:
            a, m = pomdp.enabled(s)[0], 0
        else:
            raise ModelError(f"controller has no choice for node {n} and observation {z}")
        dist = pomdp.transitions.get((s, a))
        if dist is None:
            raise ModelError(f"controller picks disabled action {pomdp.actions[a]} in state {s}")
        row = []
        for t, p in dist:
            succ = (t, fsc.next_node(m, pomdp.obs[t]))
            j = index.get(succ)
            if j is None:
                j = index[succ] = len(states)
                states.append(succ)
            row.append((j, p))
        rows.append(row)
        rewards.append(pomdp.reward(s, a))
        i += 1
    return mc_from_rows(rows, 0, rewards, np.flatnonzero(_target_mask(pomdp, states, label)), labels=states)


@dataclass(eq=False)
class Solution:
    """Optimal values and policy of the quotient restricted to a family."""

    values: np.ndarray  # per product state
    choices: np.ndarray  # chosen global choice per product state
    q: np.ndarray  # per global choice, nan where the family disables it
    visits_cache: Optional[np.ndarray] = None

    def value(self, state: int = 0) -> float:
        return float(self.values[state])


class Quotient:
    """Product of the POMDP with all options of a root family.

    Subfamilies of the root share this structure; their quotient MDP is the
    root MDP with the choices outside their domains masked away.
    """

    def __init__(self, pomdp: Pomdp, family: FscFamily):
        if pomdp.initial_state is None:
            raise ModelError("quotient needs a point initial state; call normalize_initial")
        self.pomdp = pomdp
        self.family = family
        k = family.k
        self.k = k
        self.num_options = len(pomdp.actions) * k
        s0 = pomdp.initial_state
        index = {(s0, 0): 0}
        states = [(s0, 0)]
        groups = [0]
        cols, vals, indptr = [], [], [0]
        choice_param, choice_option, choice_reward = [], [], []
        i = 0
        while i < len(states):
            s, n = states[i]
            z = pomdp.obs[s]
            p = family.index[(n, z)]
            for a, m in family.domains[p]:
                for t, prob in pomdp.transitions[(s, a)]:
                    zt = pomdp.obs[t]
                    succ = (t, m if m < family.mu[zt] else 0)
                    j = index.get(succ)
                    if j is None:
                        j = index[succ] = len(states)
                        states.append(succ)
                    cols.append(j)
                    vals.append(prob)
                indptr.append(len(cols))
                choice_param.append(p)
                choice_option.append(a * k + m)
                choice_reward.append(pomdp.reward(s, a))
            groups.append(len(choice_param))
            i += 1
        n_states = len(states)
        self.states = states
        self.state_index = index
        self.matrix = sp.csr_matrix(
            (np.array(vals), np.array(cols, dtype=np.int64), np.array(indptr, dtype=np.int64)),
            shape=(len(choice_param), n_states))
        self.groups = np.array(groups, dtype=np.int64)
        self.choice_param = np.array(choice_param, dtype=np.int64)
        self.choice_option = np.array(choice_option, dtype=np.int64)
        self.choice_state = np.repeat(np.arange(n_states), np.diff(self.groups))
        self.rewards = np.array(choice_reward, dtype=float)
        self.state_param = np.array([family.index[(n, pomdp.obs[s])] for s, n in states], dtype=np.int64)
        self.state_obs = np.array([pomdp.obs[s] for s, _ in states], dtype=np.int64)
        self._targets = {}

    @property
    def num_states(self) -> int:
        return len(self.states)

    def option_of(self, choice: int) -> Option:
        return divmod(int(self.choice_option[choice]), self.k)

    def targets(self, label: str) -> np.ndarray:
        if label not in self._targets:
            self._targets[label] = _target_mask(self.pomdp, self.states, label)
        return self._targets[label]

    def choice_mask(self, family: FscFamily) -> np.ndarray:
        if family.params != self.family.params:
            raise ValueError("family does not share the quotient's parameters")
        allowed = np.zeros((family.num_params, self.num_options), dtype=bool)
        for p, dom in enumerate(family.domains):
            for a, m in dom:
                allowed[p, a * self.k + m] = True
        return allowed[self.choice_param, self.choice_option]

    def mdp(self, family: FscFamily, label: str):
        """Quotient MDP of `family` and the global ids of its choices."""
        mask = self.choice_mask(family)
        rows = np.flatnonzero(mask)
        counts = np.add.reduceat(mask.astype(np.int64), self.groups[:-1])
        if np.any(counts == 0):
            raise ValueError("family leaves a product state without options")
        groups = np.concatenate([[0], np.cumsum(counts)])
        sub = Mdp(self.matrix[rows], groups, self.rewards[rows], self.targets(label), 0)
        return sub, rows

    def solve(self, family: FscFamily, kind: str, label: str, maximize: bool) -> Solution:
        sub, rows = self.mdp(family, label)
        values, policy = solve_mdp(sub, maximize, kind)
        q = np.full(len(self.choice_param), np.nan)
        q[rows] = q_values(sub, values, kind)
        choices = rows[sub.groups[:-1] + policy]
        return Solution(values, choices, q)

    def policy_mc(self, solution: Solution) -> Mc:
        return Mc(self.matrix[solution.choices], 0, self.rewards[solution.choices], np.zeros(self.num_states, bool))

    def reachable(self, solution: Solution) -> np.ndarray:
        matrix = self.matrix[solution.choices]
        seen = np.zeros(self.num_states, dtype=bool)
        seen[0] = True
        todo = [0]
        while todo:
            s = todo.pop()
            for t in matrix.indices[matrix.indptr[s]:matrix.indptr[s + 1]]:
                if not seen[t]:
                    seen[t] = True
                    todo.append(int(t))
        return seen

    def visits(self, solution: Solution, label: str) -> np.ndarray:
        if solution.visits_cache is None:
            mc = Mc(self.matrix[solution.choices], 0, self.rewards[solution.choices], self.targets(label))
            solution.visits_cache = expected_visits(mc)
        return solution.visits_cache

    def selection(self, solution: Solution, reachable_only: bool = True) -> dict:
        """Options chosen per parameter, over the states reachable under the policy by default."""
        reach = self.reachable(solution) if reachable_only else np.ones(self.num_states, dtype=bool)
        chosen: dict = {}
        for s in np.flatnonzero(reach):
            c = solution.choices[s]
            chosen.setdefault(int(self.choice_param[c]), set()).add(self.option_of(c))
        return chosen


def policy_consistency(quotient: Quotient, solution: Solution) -> list:
    """Inconsistent parameters as (parameter index, sorted chosen options)."""
    chosen = quotient.selection(solution)
    return [(p, tuple(sorted(opts))) for p, opts in sorted(chosen.items()) if len(opts) > 1]


def extract_fsc(family: FscFamily, selection: dict) -> Fsc:
    assignment = []
    for p, dom in enumerate(family.domains):
        opts = selection.get(p)
        if opts is None:
            assignment.append(dom[0])
            continue
        if len(opts) != 1:
            raise ValueError(f"policy is inconsistent in parameter {family.params[p]}")
        (opt,) = opts
        assignment.append(opt)
    return family.fsc(assignment)


def quotient_mdp(pomdp: Pomdp, family: FscFamily) -> Quotient:
    return Quotient(pomdp, family)
