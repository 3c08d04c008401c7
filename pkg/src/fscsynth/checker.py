"""Reachability and expected-reward analysis of explicit MCs and MDPs.

Values follow indefinite-horizon semantics: probabilities of eventually
reaching the target set, and rewards accumulated until the target is hit.
A state that reaches the target with probability < 1 has reward value +inf.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .model import Constraint, Mc

logger = logging.getLogger(__name__)

PRECISION = 1e-10
MAX_SWEEPS = 1_000_000


class ConvergenceError(RuntimeError):
    def __init__(self, message, residual):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


@dataclass(eq=False)
class Mdp:
    """Sparse MDP. Choices of state s are rows groups[s]:groups[s+1] of `matrix`."""

    matrix: sp.csr_matrix
    groups: np.ndarray
    rewards: np.ndarray  # per choice
    targets: np.ndarray  # bool per state
    initial: int

    @property
    def num_states(self) -> int:
        return self.matrix.shape[1]

    @property
    def num_choices(self) -> int:
        return self.matrix.shape[0]

    @classmethod
    def from_mc(cls, mc: Mc) -> "Mdp":
        n = mc.num_states
        return cls(mc.matrix, np.arange(n + 1), np.asarray(mc.rewards, float), mc.targets, mc.initial)

    def choice_state(self) -> np.ndarray:
        return np.repeat(np.arange(self.num_states), np.diff(self.groups))

    def induced_mc(self, policy: np.ndarray) -> Mc:
        """MC obtained by fixing `policy` (local choice offsets per state)."""
        rows = self.groups[:-1] + policy
        return Mc(self.matrix[rows], self.initial, self.rewards[rows], self.targets)


# --- graph helpers -----------------------------------------------------------


def _successors(matrix: sp.csr_matrix, row: int) -> np.ndarray:
    return matrix.indices[matrix.indptr[row]:matrix.indptr[row + 1]]


def _backward_reach(mdp: Mdp, seeds: np.ndarray, allowed: np.ndarray, all_choices: bool) -> np.ndarray:
    """Fixpoint of states in `allowed` that can (some choice / every choice) move into the set.

    all_choices=False: s joins if some choice has a successor in the set.
    all_choices=True:  s joins if every choice has a successor in the set.
    """
    inside = seeds.copy()
    matrix = mdp.matrix
    while True:
        hit = np.asarray(matrix[:, inside].sum(axis=1)).ravel() > 0
        if all_choices:
            per_state = np.logical_and.reduceat(hit, mdp.groups[:-1])
        else:
            per_state = np.logical_or.reduceat(hit, mdp.groups[:-1])
        new = inside | (per_state & allowed)
        if np.array_equal(new, inside):
            return inside
        inside = new


def prob0_max(mdp: Mdp) -> np.ndarray:
    """States where the maximal reachability probability is 0."""
    can = _backward_reach(mdp, mdp.targets.copy(), ~mdp.targets, all_choices=False)
    return ~can


def prob0_min(mdp: Mdp) -> np.ndarray:
    """States where the minimal reachability probability is 0."""
    forced = _backward_reach(mdp, mdp.targets.copy(), ~mdp.targets, all_choices=True)
    return ~forced


def prob1_min(mdp: Mdp) -> np.ndarray:
    """States reaching the target almost surely under every policy."""
    zero = prob0_min(mdp)
    bad = _backward_reach(mdp, zero, ~mdp.targets, all_choices=False)
    return ~bad


def prob1_max(mdp: Mdp) -> np.ndarray:
    """States reaching the target almost surely under some policy."""
    matrix = mdp.matrix
    u = np.ones(mdp.num_states, dtype=bool)
    while True:
        # choices staying inside u
        outside = np.asarray(matrix[:, ~u].sum(axis=1)).ravel() > 0
        stay = ~outside
        r = mdp.targets.copy()
        while True:
            hit = np.asarray(matrix[:, r].sum(axis=1)).ravel() > 0
            ok = np.logical_or.reduceat(hit & stay, mdp.groups[:-1])
            new = r | (ok & u)
            if np.array_equal(new, r):
                break
            r = new
        if np.array_equal(r, u):
            return u
        u = r


def sccs_bottom_up(matrix: sp.csr_matrix, groups: np.ndarray, states: np.ndarray) -> list[np.ndarray]:
    """Strongly connected components among `states`, successors before predecessors."""
    member = np.zeros(matrix.shape[1], dtype=bool)
    member[states] = True
    succ = {}
    for s in states:
        rows = matrix.indices[matrix.indptr[groups[s]]:matrix.indptr[groups[s + 1]]]
        succ[int(s)] = [int(t) for t in np.unique(rows) if member[t]]
    index = {}
    low = {}
    on_stack = set()
    stack = []
    out = []
    counter = 0
    for root in succ:
        if root in index:
            continue
        work = [(root, 0)]
        while work:
            v, i = work.pop()
            if i == 0:
                index[v] = low[v] = counter
                counter += 1
                stack.append(v)
                on_stack.add(v)
            recurse = False
            targets = succ[v]
            while i < len(targets):
                w = targets[i]
                i += 1
                if w not in index:
                    work.append((v, i))
                    work.append((w, 0))
                    recurse = True
                    break
                if w in on_stack:
                    low[v] = min(low[v], index[w])
            if recurse:
                continue
            if low[v] == index[v]:
                comp = []
                while True:
                    w = stack.pop()
                    on_stack.discard(w)
                    comp.append(w)
                    if w == v:
                        break
                out.append(np.array(sorted(comp), dtype=np.int64))
            if work:
                parent = work[-1][0]
                low[parent] = min(low[parent], low[v])
    return out


# --- Markov chains -------------------------------------------------------------


def _mc_prob_sets(mc: Mc):
    mdp = Mdp.from_mc(mc)
    zero = prob0_max(mdp)
    one = prob1_max(mdp)
    return zero, one


def eval_mc(mc: Mc, kind: str, backend: str = "linear") -> np.ndarray:
    """Per-state reachability probability ("P") or expected reward ("R")."""
    if backend == "iteration":
        return _iterate_chain(Mdp.from_mc(mc), kind)
    if backend != "linear":
        raise ValueError(f"unknown backend {backend}")
    n = mc.num_states
    zero, one = _mc_prob_sets(mc)
    targets = mc.targets
    if kind == "P":
        values = np.zeros(n)
        values[targets] = 1.0
        values[one] = 1.0
        maybe = ~(zero | one | targets)
        if maybe.any():
            idx = np.flatnonzero(maybe)
            a = mc.matrix[idx][:, idx]
            b = np.asarray(mc.matrix[idx][:, one | targets].sum(axis=1)).ravel()
            values[idx] = _linsolve(a, b)
        return np.clip(values, 0.0, 1.0)
    if kind == "R":
        values = np.full(n, np.inf)
        values[targets] = 0.0
        finite = one & ~targets
        if finite.any():
            idx = np.flatnonzero(finite)
            a = mc.matrix[idx][:, idx]
            values[idx] = _linsolve(a, mc.rewards[idx])
        return values
    raise ValueError(f"unknown value kind {kind}")


def _linsolve(a: sp.csr_matrix, b: np.ndarray) -> np.ndarray:
    m = sp.identity(a.shape[0], format="csc") - a.tocsc()
    if a.shape[0] <= 400:
        return np.linalg.solve(m.toarray(), b)
    return spla.spsolve(m, b)


def expected_visits(mc: Mc) -> np.ndarray:
    """Expected number of visits of each state before absorption.

    Target states are absorbing and count their single entering visit.
    States of non-target recurrent classes get +inf when reachable.
    """
    n = mc.num_states
    matrix = mc.matrix.tolil(copy=True)
    for t in np.flatnonzero(mc.targets):
        matrix.rows[t] = [t]
        matrix.data[t] = [1.0]
    matrix = matrix.tocsr()
    groups = np.arange(n + 1)
    comps = sccs_bottom_up(matrix, groups, np.arange(n))
    comp_of = np.empty(n, dtype=np.int64)
    for i, comp in enumerate(comps):
        comp_of[comp] = i
    recurrent = np.zeros(n, dtype=bool)
    for comp in comps:
        if mc.targets[comp].any():
            continue
        leaves = False
        for s in comp:
            if np.any(comp_of[_successors(matrix, s)] != comp_of[s]):
                leaves = True
                break
        if not leaves:
            recurrent[comp] = True
    transient = ~(recurrent | mc.targets)
    visits = np.zeros(n)
    start = np.zeros(n)
    start[mc.initial] = 1.0
    idx = np.flatnonzero(transient)
    if idx.size:
        q = matrix[idx][:, idx]
        m = sp.identity(idx.size, format="csc") - q.tocsc()
        if idx.size <= 400:
            visits[idx] = np.linalg.solve(m.toarray().T, start[idx])
        else:
            visits[idx] = spla.spsolve(m.T.tocsc(), start[idx])
    into = start + (matrix[idx].T @ visits[idx] if idx.size else 0.0)
    visits[mc.targets] = into[mc.targets]
    if recurrent.any():
        reachable = _reachable(matrix, mc.initial)
        visits[recurrent & reachable] = np.inf
    return visits


def _reachable(matrix: sp.csr_matrix, start: int) -> np.ndarray:
    seen = np.zeros(matrix.shape[0], dtype=bool)
    seen[start] = True
    todo = [start]
    while todo:
        s = todo.pop()
        for t in _successors(matrix, s):
            if not seen[t]:
                seen[t] = True
                todo.append(int(t))
    return seen


def check_constraint(value: float, constraint: Constraint) -> bool:
    if constraint.direction == ">=":
        return value >= constraint.threshold
    return value <= constraint.threshold


# --- MDPs ------------------------------------------------------------------------


def q_values(mdp: Mdp, values: np.ndarray, kind: str = "R") -> np.ndarray:
    """One-step lookahead values; rewards only count for reward properties."""
    finite = np.where(np.isinf(values), 0.0, values)
    q = mdp.matrix @ finite
    if kind == "R":
        q = q + mdp.rewards
    if np.isinf(values).any():
        hits_inf = np.asarray(mdp.matrix[:, np.isinf(values)].sum(axis=1)).ravel() > 0
        q = np.where(hits_inf, np.inf, q)
    return q


def _reduce(q: np.ndarray, groups: np.ndarray, maximize: bool) -> np.ndarray:
    if maximize:
        return np.maximum.reduceat(q, groups[:-1])
    return np.minimum.reduceat(q, groups[:-1])


def _fixed_values(mdp: Mdp, maximize: bool, kind: str):
    """Values settled by graph analysis, and the mask of states left to iterate."""
    n = mdp.num_states
    if kind == "P":
        zero = prob0_max(mdp) if maximize else prob0_min(mdp)
        one = prob1_max(mdp) if maximize else prob1_min(mdp)
        values = np.zeros(n)
        values[one | mdp.targets] = 1.0
        maybe = ~(zero | one | mdp.targets)
        return values, maybe
    if kind == "R":
        finite = prob1_min(mdp) if maximize else prob1_max(mdp)
        values = np.where(finite, 0.0, np.inf)
        values[mdp.targets] = 0.0
        maybe = finite & ~mdp.targets
        return values, maybe
    raise ValueError(f"unknown value kind {kind}")


def _iterate(mdp: Mdp, maximize: bool, kind: str, max_sweeps: int) -> np.ndarray:
    values, maybe = _fixed_values(mdp, maximize, kind)
    if not maybe.any():
        return values
    # restrict rewards/probabilities of P-problems to the choice level
    rewards = mdp.rewards if kind == "R" else np.zeros(mdp.num_choices)
    for comp in sccs_bottom_up(mdp.matrix, mdp.groups, np.flatnonzero(maybe)):
        starts = mdp.groups[comp]
        stops = mdp.groups[comp + 1]
        rows = np.concatenate([np.arange(a, b) for a, b in zip(starts, stops)])
        local_groups = np.concatenate([[0], np.cumsum(stops - starts)])
        sub = mdp.matrix[rows]
        sub_rewards = rewards[rows]
        sweeps = 0
        while True:
            q = q_values_rows(sub, sub_rewards, values)
            new = _reduce(q, local_groups, maximize)
            finite = np.isfinite(new) & np.isfinite(values[comp])
            residual = np.max(np.abs(new[finite] - values[comp][finite]), initial=0.0)
            values[comp] = new
            sweeps += 1
            if residual < PRECISION:
                break
            if sweeps >= max_sweeps:
                raise ConvergenceError("value iteration hit the sweep cap", residual)
    return values


def _iterate_chain(mdp: Mdp, kind: str, max_sweeps: int = MAX_SWEEPS) -> np.ndarray:
    """Gauss-Seidel sweeps for a chain (one choice per state), SCC by SCC."""
    values, maybe = _fixed_values(mdp, True, kind)
    rewards = mdp.rewards if kind == "R" else np.zeros(mdp.num_choices)
    m = mdp.matrix
    for comp in sccs_bottom_up(m, mdp.groups, np.flatnonzero(maybe)):
        rows = [(int(s), m.indices[m.indptr[s]:m.indptr[s + 1]], m.data[m.indptr[s]:m.indptr[s + 1]])
                for s in comp]
        sweeps = 0
        while True:
            residual = 0.0
            for s, succ, probs in rows:
                new = rewards[s] + float(probs @ values[succ])
                residual = max(residual, abs(new - values[s]))
                values[s] = new
            sweeps += 1
            if residual < PRECISION:
                break
            if sweeps >= max_sweeps:
                raise ConvergenceError("value iteration hit the sweep cap", residual)
    return values


def q_values_rows(sub: sp.csr_matrix, rewards: np.ndarray, values: np.ndarray) -> np.ndarray:
    inf = np.isinf(values)
    if not inf.any():
        return rewards + sub @ values
    q = rewards + sub @ np.where(inf, 0.0, values)
    hits = np.asarray(sub[:, inf].sum(axis=1)).ravel() > 0
    return np.where(hits, np.inf, q)


def _extract(mdp: Mdp, values: np.ndarray, maximize: bool, kind: str, tol: float) -> np.ndarray:
    """Greedy policy with lowest-index tie-breaking.

    For maximal probabilities and minimal rewards, ties are further restricted
    to choices that make progress towards the target, so the policy attains
    the value instead of idling in an end component.
    """
    q = q_values(mdp, values, kind)
    n = mdp.num_states
    best = _reduce(q, mdp.groups, maximize)
    state_of = mdp.choice_state()
    scale = np.maximum(1.0, np.abs(np.where(np.isinf(best), 0.0, best)))
    with np.errstate(invalid="ignore"):
        gap = np.abs(q - best[state_of])
        optimal = (gap <= tol * scale[state_of]) | (q == best[state_of])
    policy = np.zeros(n, dtype=np.int64)
    for s in range(n):
        lo, hi = mdp.groups[s], mdp.groups[s + 1]
        opts = np.flatnonzero(optimal[lo:hi])
        policy[s] = opts[0] if opts.size else 0
    if kind == "R" and maximize and np.isinf(values).any():
        return _avoid(mdp, policy, np.isinf(values))
    progress = (kind == "P" and maximize) or (kind == "R" and not maximize)
    if not progress:
        return policy
    if kind == "P":
        pending = (values > 0) & ~mdp.targets & (values < 1.0 + 1e-12)
    else:
        pending = np.isfinite(values) & ~mdp.targets
    done = ~pending
    matrix = mdp.matrix
    changed = True
    while changed and pending.any():
        changed = False
        for s in np.flatnonzero(pending):
            lo, hi = mdp.groups[s], mdp.groups[s + 1]
            for c in range(hi - lo):
                if not optimal[lo + c]:
                    continue
                if done[_successors(matrix, lo + c)].any():
                    policy[s] = c
                    pending[s] = False
                    done[s] = True
                    changed = True
                    break
    return policy


def _avoid(mdp: Mdp, policy: np.ndarray, infinite: np.ndarray) -> np.ndarray:
    """Make states with infinite maximal reward actually miss the target with positive probability."""
    policy = policy.copy()
    matrix = mdp.matrix
    escape = prob0_min(mdp)
    hits = np.asarray(matrix[:, ~escape].sum(axis=1)).ravel() > 0
    for s in np.flatnonzero(escape & infinite):
        lo, hi = mdp.groups[s], mdp.groups[s + 1]
        policy[s] = int(np.flatnonzero(~hits[lo:hi])[0])
    done = escape.copy()
    pending = infinite & ~done
    while pending.any():
        changed = False
        for s in np.flatnonzero(pending):
            lo, hi = mdp.groups[s], mdp.groups[s + 1]
            for c in range(hi - lo):
                if done[_successors(matrix, lo + c)].any():
                    policy[s] = c
                    pending[s] = False
                    done[s] = True
                    changed = True
                    break
        if not changed:
            raise RuntimeError("infinite reward without an escaping policy")
    return policy


def _evaluate_policy(mdp: Mdp, policy: np.ndarray, kind: str) -> np.ndarray:
    return eval_mc(mdp.induced_mc(policy), kind)


def _make_proper(mdp: Mdp, policy: np.ndarray, finite: np.ndarray, exact: np.ndarray) -> np.ndarray:
    """Reroute states that should reach the target surely but idle under `policy`.

    Zero-reward end components let value iteration settle below the true
    minimum; the greedy policy then loops forever. States whose policy value
    is finite keep their choice, the rest follow an attractor towards them.
    """
    policy = policy.copy()
    done = mdp.targets | np.isfinite(exact)
    pending = finite & ~done
    matrix = mdp.matrix
    stays = np.asarray(matrix[:, ~finite].sum(axis=1)).ravel() == 0
    while pending.any():
        changed = False
        for s in np.flatnonzero(pending):
            lo, hi = mdp.groups[s], mdp.groups[s + 1]
            for c in range(hi - lo):
                if stays[lo + c] and done[_successors(matrix, lo + c)].any():
                    policy[s] = c
                    pending[s] = False
                    done[s] = True
                    changed = True
                    break
        if not changed:
            raise RuntimeError("no proper policy on the almost-sure region")
    return policy


def solve_mdp(mdp: Mdp, maximize: bool, kind: str, polish: bool = True,
              max_sweeps: int = MAX_SWEEPS) -> tuple[np.ndarray, np.ndarray]:
    """Optimal values and a deterministic memoryless optimal policy.

    Value iteration runs over strongly connected components, sinks first,
    until the absolute residual drops below PRECISION. With `polish`, the
    extracted policy is evaluated exactly and improved until stable, so the
    returned values are those of the returned policy.
    """
    values = _iterate(mdp, maximize, kind, max_sweeps)
    policy = _extract(mdp, values, maximize, kind, tol=1e-9)
    if not polish:
        return values, policy
    exact = _evaluate_policy(mdp, policy, kind)
    if kind == "R" and not maximize:
        finite = np.isfinite(values)
        if (finite & np.isinf(exact)).any():
            policy = _make_proper(mdp, policy, finite, exact)
            exact = _evaluate_policy(mdp, policy, kind)
    for _ in range(100):
        q = q_values(mdp, exact, kind)
        current = q[mdp.groups[:-1] + policy]
        best = _reduce(q, mdp.groups, maximize)
        scale = np.maximum(1.0, np.abs(np.where(np.isfinite(current), current, 0.0)))
        with np.errstate(invalid="ignore"):
            if maximize:
                better = best > current + 1e-11 * scale
            else:
                better = (best < current - 1e-11 * scale) | (np.isinf(current) & np.isfinite(best))
        better &= ~mdp.targets
        if not better.any():
            return exact, policy
        candidate = policy.copy()
        for s in np.flatnonzero(better):
            lo, hi = mdp.groups[s], mdp.groups[s + 1]
            local = q[lo:hi]
            tol = 1e-12 * max(1.0, abs(best[s]) if np.isfinite(best[s]) else 1.0)
            candidate[s] = int(np.flatnonzero(np.abs(local - best[s]) <= tol)[0]) if np.isfinite(best[s]) \
                else int(np.flatnonzero(local == best[s])[0])
        new_exact = _evaluate_policy(mdp, candidate, kind)
        worse = new_exact[mdp.initial] < exact[mdp.initial] if maximize else new_exact[mdp.initial] > exact[mdp.initial]
        if worse:
            break
        policy, exact = candidate, new_exact
    logger.debug("policy polishing stopped before a fixed point")
    return exact, policy
