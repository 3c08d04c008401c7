import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from corpus import SPECS, close, random_mu, random_pomdp
from fscsynth import models
from fscsynth.enumerate import enumerate_family
from fscsynth.family import Fsc, Quotient, induced_mc, make_reduced_family
from fscsynth.inner import (ALL_SATISFY, PRUNED_OPTIMUM, PRUNED_VIOLATE, ConflictStore, Incumbent,
                            Problem, _significances, analyze_family, compute_ce, generalize_ce,
                            inner_synthesize, partition, split)
from fscsynth.model import Pomdp, parse_model, parse_spec

U, D, L, R = range(4)


def _instance(seed, spec_index=None, cap=400):
    rng = np.random.default_rng(seed)
    raw = random_pomdp(rng, max_states=6)
    spec = parse_spec(SPECS[spec_index if spec_index is not None else int(rng.integers(0, len(SPECS)))])
    problem = Problem(raw, spec)
    fam = make_reduced_family(problem.pomdp, random_mu(rng, problem.pomdp, cap))
    return problem, fam


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["ar", "cegis", "hybrid"]))
def test_complete_search_matches_enumeration(seed, method):
    problem, fam = _instance(seed)
    truth = enumerate_family(problem, fam)
    q = Quotient(problem.pomdp, fam)
    res = inner_synthesize(problem, q, fam, method, complete=True, slice_seconds=0.01)
    assert res.finished
    assert close(res.value, truth.value)
    if res.fsc is not None:
        ev = problem.evaluate(res.fsc)
        assert ev.admissible and close(ev.objective, res.value)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["ar", "cegis"]))
def test_incomplete_search_returns_admissible_members(seed, method):
    problem, fam = _instance(seed)
    truth = enumerate_family(problem, fam)
    q = Quotient(problem.pomdp, fam)
    res = inner_synthesize(problem, q, fam, method, complete=False)
    if res.fsc is None:
        return
    assert fam.contains(res.fsc)
    ev = problem.evaluate(res.fsc)
    assert ev.admissible
    # never better than the true optimum
    assert not problem.objective.improves(ev.objective, truth.value) or close(ev.objective, truth.value)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_learned_conflicts_are_sound(seed):
    problem, fam = _instance(seed)
    q = Quotient(problem.pomdp, fam)
    res = inner_synthesize(problem, q, fam, "cegis", complete=True, keep_conflicts=True)
    members = list(fam.members())
    for family, req, conflict in res.learned:
        for assignment in members:
            fsc = family.fsc(assignment)
            if all(fsc.option(p) == o for p, o in conflict.items()):
                ev = problem.evaluate(fsc)
                value = ev.values[problem.requirements.index(req)] if req in problem.requirements else ev.objective
                assert not req.holds(value)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_split_partitions_the_family(seed):
    problem, fam = _instance(seed, spec_index=0)
    q = Quotient(problem.pomdp, fam)
    sol = q.solve(fam, "P", "goal", True)
    children = split(problem, q, fam, sol, "goal", True)
    if fam.size == 1:
        assert children == []
        return
    assert 2 <= len(children) <= max(2, max(len(d) for d in fam.domains))
    seen = set()
    for child in children:
        for assignment in child.members():
            assert assignment not in seen
            seen.add(assignment)
    assert seen == set(fam.members())


def test_partition_shapes():
    p = parse_model(models.text("maze.pomdp"))
    fam = make_reduced_family(p, [1] * 6)
    kids = partition(fam, 1, [(L, 0), (R, 0)])
    assert [k.domains[1] for k in kids] == [((L, 0),), ((R, 0),), ((U, 0), (D, 0))]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_pruning_verdicts_are_sound(seed):
    problem, fam = _instance(seed, cap=200)
    q = Quotient(problem.pomdp, fam)
    truth = enumerate_family(problem, fam)
    verdict = analyze_family(problem, q, fam, None)
    evals = [problem.evaluate(fam.fsc(a)) for a in fam.members()]
    if verdict.tag == PRUNED_VIOLATE:
        req = problem.requirements[verdict.constraint]
        assert all(not req.holds(ev.values[verdict.constraint]) for ev in evals)
    if verdict.tag == ALL_SATISFY:
        assert all(ev.admissible for ev in evals)
    if truth.value is not None:
        # the best member never lets the family be pruned against its own optimum
        strict = analyze_family(problem, q, fam, truth.value)
        better = [ev for ev in evals if ev.admissible and problem.objective.improves(ev.objective, truth.value)]
        assert not better
        if strict.tag == PRUNED_OPTIMUM:
            req = problem.optimum_requirement(truth.value)
            assert all(not req.holds(ev.objective) for ev in evals if ev.admissible)


def test_conflict_store_enumerates_unblocked_in_order():
    p = parse_model("states 2\nactions a b c\nobservations 2\nobs 0 0\nobs 1 1\n"
                    "trans 0 a 1 1\ntrans 0 b 1 1\ntrans 0 c 1 1\n"
                    "trans 1 a 1 1\ntrans 1 b 1 1\ntrans 1 c 1 1\nlabel goal 1\n")
    fam = make_reduced_family(p, [1, 1])
    store = ConflictStore(fam)
    store.add({(0, 1): (1, 0)})
    store.add({(0, 0): (0, 0), (0, 1): (2, 0)})
    seen = []
    while (cand := store.next_candidate()) is not None:
        seen.append(cand)
    expected = [a for a in itertools.product(*fam.domains)
                if a[1] != (1, 0) and not (a[0] == (0, 0) and a[1] == (2, 0))]
    assert seen == expected
    assert store.next_candidate() is None


def test_empty_conflict_exhausts_store():
    p = parse_model(models.text("maze.pomdp"))
    fam = make_reduced_family(p, [1] * 6)
    store = ConflictStore(fam)
    store.add({})
    assert store.next_candidate() is None


def _example_ce_setup():
    raw = parse_model(models.text("maze.pomdp"))
    p = Pomdp(raw.num_states, raw.actions, raw.num_observations, raw.obs, raw.transitions,
              raw.rewards, raw.labels, ((0, 1.0),))
    problem = Problem(p, parse_spec("P >= 1 reach goal; P max reach goal"))
    fam = make_reduced_family(p, [1] * 6)
    fam = fam.restrict(fam.index[(0, 3)], [(U, 0), (D, 0), (R, 0)])
    fsc = Fsc(1, {(0, 0): R, (0, 1): R, (0, 2): R, (0, 3): D, (0, 4): U, (0, 5): U},
              {(0, z): 0 for z in range(6)})
    return problem, fam, fsc


def test_counterexample_for_blocked_corridor():
    problem, fam, fsc = _example_ce_setup()
    q = Quotient(problem.pomdp, fam)
    req = problem.requirements[0]
    ub = q.solve(fam, "P", "goal", True)
    mc = induced_mc(problem.pomdp, fsc, "goal")
    bound = np.array([ub.values[q.state_index[st]] for st in mc.labels])
    ce = compute_ce(mc, req, bound, 0)
    assert sorted(s for s, _ in ce.states) == [0, 1, 2, 3]
    assert not req.holds(ce.value)
    full = generalize_ce(ce, problem.pomdp, fsc, complete=True)
    assert set(full) == {(0, 0), (0, 1), (0, 2)}
    part = generalize_ce(ce, problem.pomdp, fsc, complete=False,
                         selection=q.selection(ub, reachable_only=False), family=fam)
    assert set(part) == {(0, 1), (0, 2)}


def test_optimum_tightening_directions():
    raw = parse_model(models.text("maze.pomdp"))
    up = Problem(raw, parse_spec("P max reach goal"), eps_rel=0.1, eps_abs=0.01).optimum_requirement(0.5)
    assert up.direction == ">=" and up.threshold == pytest.approx(0.56)
    down = Problem(raw, parse_spec("R min reach goal"), eps_rel=0.1, eps_abs=0.01).optimum_requirement(10.0)
    assert down.direction == "<=" and down.threshold == pytest.approx(8.99)


def test_incumbent_only_accepts_improvements():
    problem = Problem(parse_model(models.text("maze.pomdp")), parse_spec("R min reach goal"))
    inc = Incumbent()
    f = Fsc(1, {}, {})
    assert inc.offer(problem, f, 9.0)
    assert not inc.offer(problem, f, 9.0)
    assert not inc.offer(problem, f, 9.0 - 1e-12)
    assert inc.offer(problem, f, 8.0)
    assert inc.value == 8.0


def _maze_significances():
    problem = Problem(parse_model(models.text("maze.pomdp")), parse_spec("R min reach goal"))
    P = problem.pomdp
    fam = make_reduced_family(P, [1] * P.num_observations)
    q = Quotient(P, fam)
    sol = q.solve(fam, "R", "goal", False)
    return {fam.params[p][1]: s for s, p, _ in _significances(problem, q, fam, sol, "goal", False)}


def test_maze_significance_values():
    sig = _maze_significances()
    assert set(sig) == {1, 4}
    assert sig[1] == pytest.approx(8 / 3, abs=1e-9)
    assert sig[4] == pytest.approx(14 / 3, abs=1e-9)


@pytest.mark.xfail(strict=True, reason="on the reconstructed maze the visit-weighted Q-loss is larger at z4 "
                                       "(14/3 against 8/3), so z1 is not the most significant observation")
def test_maze_z1_most_significant():
    sig = _maze_significances()
    assert sig[1] > sig[4]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_complete_ar_accounts_for_every_member(seed):
    problem, fam = _instance(seed)
    q = Quotient(problem.pomdp, fam)
    stats = inner_synthesize(problem, q, fam, "ar", complete=True).stats
    assert stats.pruned_members + stats.refuted_members == fam.size
