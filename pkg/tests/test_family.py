import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from corpus import random_mu, random_pomdp
from fscsynth import models
from fscsynth.checker import eval_mc
from fscsynth.family import (Fsc, Quotient, extract_fsc, induced_mc, make_full_family,
                             make_reduced_family, policy_consistency)
from fscsynth.inner import Problem
from fscsynth.model import normalize_initial, parse_model, parse_spec

U, D, L, R = range(4)


@pytest.fixture(scope="module")
def maze():
    return parse_model(models.text("maze.pomdp"))


def test_full_family_size(maze):
    fam = make_full_family(maze, 2)
    assert fam.num_params == 12
    assert all(len(d) == 8 for d in fam.domains)
    assert fam.size == 8**12


def test_reduced_family_counts(maze):
    mu = [1] * 6
    base = make_reduced_family(maze, mu)
    assert base.k == 1 and base.num_params == 6
    mu[1] = 2
    one = make_reduced_family(maze, mu)
    assert one.k == 2 and one.num_params == 7
    mu[4] = 2
    two = make_reduced_family(maze, mu)
    assert two.k == 2 and two.num_params == 8
    assert base.size < one.size < two.size
    # node-major order
    assert two.params == ((0, 0), (0, 1), (0, 2), (0, 3), (0, 4), (0, 5), (1, 1), (1, 4))


def test_restrict_rejects_foreign_options(maze):
    fam = make_reduced_family(maze, [1] * 6)
    with pytest.raises(ValueError):
        fam.restrict(0, [(0, 1)])
    with pytest.raises(ValueError):
        fam.restrict(0, [])
    sub = fam.restrict(0, [(R, 0)])
    assert sub.size * 4 == fam.size


def test_update_into_unused_node_falls_back():
    fsc = Fsc(2, {(0, 0): 0, (1, 0): 0, (0, 1): 0}, {(0, 0): 1, (1, 0): 0, (0, 1): 1})
    assert fsc.next_node(1, 0) == 1
    assert fsc.next_node(1, 1) == 0


def _simulate(pomdp, fsc, label, rng, runs, horizon=2000):
    """Run the controller on the POMDP itself; returns (reach frequency, mean reward of reaching runs)."""
    target = pomdp.target(label)
    hits = 0
    total = 0.0
    for _ in range(runs):
        s, n = pomdp.initial[0][0], 0
        acc = 0.0
        for _ in range(horizon):
            if s in target:
                hits += 1
                total += acc
                break
            z = pomdp.obs[s]
            a, m = fsc.action[(n, z)], fsc.update[(n, z)]
            acc += pomdp.reward(s, a)
            succ, probs = zip(*pomdp.transitions[(s, a)])
            s = succ[int(np.searchsorted(np.cumsum(probs), rng.random() * sum(probs)))]
            n = fsc.next_node(m, pomdp.obs[s])
    return hits / runs, (total / hits if hits else math.nan)


def test_induced_chain_matches_simulation(maze):
    p = normalize_initial(maze)
    fsc = Fsc(2,
              {(0, 0): R, (0, 1): R, (0, 2): D, (0, 3): L, (0, 4): U, (0, 5): U, (1, 1): L, (1, 4): D,
               (0, 6): U},
              {(0, 0): 0, (0, 1): 0, (0, 2): 1, (0, 3): 1, (0, 4): 0, (0, 5): 0, (1, 1): 1, (1, 4): 1,
               (0, 6): 0})
    mc = induced_mc(p, fsc, "goal")
    assert eval_mc(mc, "P")[0] == 1.0
    steps = eval_mc(mc, "R")[0]
    assert steps == pytest.approx(43 / 6, abs=1e-10)
    freq, mean = _simulate(p, fsc, "goal", np.random.default_rng(3), 4000)
    assert freq == 1.0
    assert abs(mean - steps) < 0.35  # about 5 standard errors


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_induced_chain_reach_probability_simulated(seed):
    rng = np.random.default_rng(seed)
    p = normalize_initial(random_pomdp(rng, max_states=6))
    fam = make_reduced_family(p, random_mu(rng, p, 500))
    members = list(fam.members())
    fsc = fam.fsc(members[int(rng.integers(0, len(members)))])
    value = eval_mc(induced_mc(p, fsc, "goal"), "P")[0]
    freq, _ = _simulate(p, fsc, "goal", rng, 800, horizon=400)
    # horizon truncation only lowers the frequency; allow 5 standard errors plus a little for it
    assert freq <= value + 5 * math.sqrt(0.25 / 800)
    assert freq >= value - 5 * math.sqrt(0.25 / 800) - 0.02


def test_max_reach_policy_inconsistent_in_z1_and_z4(maze):
    p = normalize_initial(maze)
    fam = make_reduced_family(p, [1] * 7)
    q = Quotient(p, fam)
    sol = q.solve(fam, "P", "goal", True)
    assert sol.value() == 1.0
    inconsistent = {fam.params[i][1] for i, _ in policy_consistency(q, sol)}
    assert inconsistent == {1, 4}


def test_quotient_bound_and_consistent_extraction(maze):
    p = normalize_initial(maze)
    mu = [1] * 7
    mu[1] = mu[4] = 2
    fam = make_reduced_family(p, mu)
    q = Quotient(p, fam)
    # fixing everything to one member makes the quotient collapse onto its chain
    fsc = Fsc(2,
              {(0, 0): R, (0, 1): R, (0, 2): D, (0, 3): L, (0, 4): U, (0, 5): U, (1, 1): L, (1, 4): D,
               (0, 6): U},
              {(0, 0): 0, (0, 1): 0, (0, 2): 1, (0, 3): 1, (0, 4): 0, (0, 5): 0, (1, 1): 1, (1, 4): 1,
               (0, 6): 0})
    single = fam
    for i, param in enumerate(fam.params):
        single = single.restrict(i, [fsc.option(param)])
    sol = q.solve(single, "R", "goal", False)
    assert sol.value() == pytest.approx(43 / 6, abs=1e-10)
    assert not policy_consistency(q, sol)
    again = extract_fsc(single, q.selection(sol))
    assert eval_mc(induced_mc(p, again, "goal"), "R")[0] == pytest.approx(43 / 6, abs=1e-10)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_quotient_brackets_every_member(seed):
    rng = np.random.default_rng(seed)
    raw = random_pomdp(rng, max_states=6)
    problem = Problem(raw, parse_spec("P max reach goal"))
    p = problem.pomdp
    fam = make_reduced_family(p, random_mu(rng, p, 300))
    q = Quotient(p, fam)
    for kind in ("P", "R"):
        hi = q.solve(fam, kind, "goal", True).value()
        lo = q.solve(fam, kind, "goal", False).value()
        for assignment in fam.members():
            v = eval_mc(induced_mc(p, fam.fsc(assignment), "goal"), kind)[0]
            assert lo - 1e-9 <= v or (math.isinf(lo) and math.isinf(v))
            assert v <= hi + 1e-9 or math.isinf(hi)
