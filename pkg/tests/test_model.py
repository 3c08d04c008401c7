import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from corpus import random_pomdp
from fscsynth import models
from fscsynth.model import (ModelError, Pomdp, dump_model, normalize_initial, parse_model,
                            parse_spec)

TINY = """
states 3
actions go stay
observations 2
initial 0
obs 0 0
obs 1 0
obs 2 1
trans 0 go 1 1/2
trans 0 go 2 1/2
trans 1 go 2 1
trans 1 stay 1 1
trans 2 stay 2 1
reward 0 go 1
label goal 2
"""


def test_parse_tiny():
    p = parse_model(TINY)
    assert p.num_states == 3
    assert p.actions == ("go", "stay")
    assert p.obs == (0, 0, 1)
    assert p.transitions[(0, 0)] == ((1, 0.5), (2, 0.5))
    assert p.enabled(0) == (0,)
    assert p.observation_actions(0) == (0,)
    assert p.reward(0, 0) == 1.0 and p.reward(1, 0) == 0.0
    assert p.target("goal") == frozenset({2})
    assert p.initial_state == 0


def test_bundled_maze_shape():
    p = parse_model(models.text("maze-0.9.pomdp"))
    assert p.num_states == 11
    assert p.actions == ("u", "d", "l", "r")
    assert p.num_observations == 6
    assert [p.obs[s] for s in range(11)] == [0, 1, 2, 1, 3, 4, 4, 4, 5, 5, 5]
    assert p.initial_state is None
    assert math.isclose(sum(q for _, q in p.initial), 1.0)
    assert p.transitions[(0, 3)] == ((0, 0.1), (1, 0.9))
    assert p.transitions[(10, 0)] == ((10, 1.0),)


@pytest.mark.parametrize("text, line, col, fragment", [
    ("states 2\nactions a\nobservations 1\nobs 0 0\nobs 1 0\ntrans 0 a 1 0.5\ntrans 1 a 1 1\n",
     6, None, "sums to 0.5"),
    ("states 2\nactions a\nobservations 1\nobs 0 0\ntrans 0 a 1 1\ntrans 1 a 1 1\n", None, None, "missing obs"),
    ("states 2\nactions a\nobservations 1\nobs 0 0\nobs 1 3\n", 5, 7, "out of range"),
    ("states 2\nactions a\nobservations 1\nobs 0 0\nobs 1 0\ntrans 0 b 1 1\n", 6, 9, "unknown action"),
    ("states 2\nactions a\nobservations 1\nobs 0 0\nobs 1 0\ntrans 0 a 1 1\n", None, None, "no enabled action"),
    ("states 2\nactions a\nobservations 1\nfrobnicate\n", 4, 1, "unknown directive"),
    ("states 1\nactions a\nobservations 1\nobs 0 0\ntrans 0 a 0 x\n", 5, 13, "bad number"),
])
def test_parse_errors(text, line, col, fragment):
    with pytest.raises(ModelError) as info:
        parse_model(text)
    assert fragment in str(info.value)
    assert info.value.line == line
    if col is not None:
        assert info.value.column == col


def test_parse_spec_forms():
    spec = parse_spec("P >= 0.5 reach goal; R min reach goal")
    assert len(spec.constraints) == 1
    assert spec.objective.kind == "R" and not spec.objective.maximizing
    eff = spec.effective_constraints()
    assert eff[0].kind == "P" and eff[0].threshold == 1.0 and eff[0].direction == ">="
    assert len(eff) == 2
    assert parse_spec("P max reach goal").effective_constraints() == ()


@pytest.mark.parametrize("text", [
    "P max reach goal; R min reach goal",
    "R min reach goal\nP >= 0.5 reach goal",
    "P >= 1.5 reach goal; P max reach goal",
    "P >= 0.5 reach goal",
    "Q max reach goal",
])
def test_parse_spec_rejects(text):
    with pytest.raises(ModelError):
        parse_spec(text)


def test_spec_unknown_label():
    with pytest.raises(ModelError, match="unknown label"):
        parse_spec("P max reach nowhere").check_labels(parse_model(TINY))


def test_normalize_initial_adds_fresh_state():
    p = parse_model(models.text("maze.pomdp"))
    q = normalize_initial(p)
    assert q.num_states == 12 and q.num_observations == 7
    assert q.bootstrap == 6 and q.obs[11] == 6
    assert q.initial_state == 11
    assert dict(q.transitions[(11, 0)]) == {s: pytest.approx(0.1) for s in range(10)}
    assert q.reward(11, 0) == 0.0
    assert normalize_initial(q) is q


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_dump_parse_roundtrip(seed):
    p = random_pomdp(np.random.default_rng(seed))
    again = parse_model(dump_model(p))
    assert again.obs == p.obs and again.actions == p.actions
    assert again.labels == p.labels and again.rewards == p.rewards
    assert again.initial == p.initial
    for key, dist in p.transitions.items():
        assert again.transitions[key] == dist


def test_direct_construction_validates():
    with pytest.raises(ModelError):
        Pomdp(1, ("a",), 1, (0,), {(0, 0): ((0, 0.7),)})
    with pytest.raises(ModelError):
        Pomdp(1, ("a",), 1, (0,), {(0, 0): ((0, 1.0),)}, rewards={(0, 0): -1.0})
