"""POMDP, Markov chain and specification types plus their text formats."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Optional

import numpy as np
import scipy.sparse as sp

STOCHASTIC_TOL = 1e-9


class ModelError(ValueError):
    """Malformed model or specification text."""

    def __init__(self, message: str, line: Optional[int] = None, column: Optional[int] = None):
        self.line = line
        self.column = column
        where = ""
        if line is not None:
            where = f"line {line}"
            if column is not None:
                where += f", column {column}"
            where += ": "
        super().__init__(where + message)


@dataclass(frozen=True, eq=True)
class Pomdp:
    num_states: int
    actions: tuple[str, ...]
    num_observations: int
    obs: tuple[int, ...]
    # (state, action index) -> ((successor, probability), ...); missing key = action disabled
    transitions: dict
    rewards: dict = field(default_factory=dict)
    labels: dict = field(default_factory=dict)
    initial: tuple[tuple[int, float], ...] = ((0, 1.0),)
    # observation of the state added by normalize_initial, if any
    bootstrap: Optional[int] = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        if len(self.obs) != self.num_states:
            raise ModelError("observation map is not total")
        for s, z in enumerate(self.obs):
            if not 0 <= z < self.num_observations:
                raise ModelError(f"state {s} has unknown observation {z}")
        for s in range(self.num_states):
            if not self.enabled(s):
                raise ModelError(f"state {s} has no enabled action")
        for (s, a), dist in self.transitions.items():
            total = math.fsum(p for _, p in dist)
            if abs(total - 1.0) > STOCHASTIC_TOL:
                raise ModelError(f"distribution of state {s} action {self.actions[a]} sums to {total}")
        for (s, a), v in self.rewards.items():
            if not math.isfinite(v) or v < 0:
                raise ModelError(f"reward of state {s} action {self.actions[a]} must be finite and >= 0")
            if (s, a) not in self.transitions:
                raise ModelError(f"reward given for disabled action {self.actions[a]} in state {s}")
        total = math.fsum(p for _, p in self.initial)
        if abs(total - 1.0) > STOCHASTIC_TOL:
            raise ModelError(f"initial distribution sums to {total}")

    def enabled(self, state: int) -> tuple[int, ...]:
        return tuple(a for a in range(len(self.actions)) if (state, a) in self.transitions)

    def reward(self, state: int, action: int) -> float:
        return self.rewards.get((state, action), 0.0)

    @property
    def initial_state(self) -> Optional[int]:
        """The initial state if the initial distribution is a point mass."""
        if len(self.initial) == 1:
            return self.initial[0][0]
        return None

    def observation_states(self, z: int) -> list[int]:
        return [s for s in range(self.num_states) if self.obs[s] == z]

    def is_trivial(self, z: int) -> bool:
        return sum(1 for o in self.obs if o == z) == 1

    def observation_actions(self, z: int) -> tuple[int, ...]:
        """Actions enabled in every state carrying observation z."""
        common = None
        for s in self.observation_states(z):
            en = set(self.enabled(s))
            common = en if common is None else common & en
        return tuple(sorted(common or ()))

    def target(self, label: str) -> frozenset:
        if label not in self.labels:
            raise ModelError(f"unknown label '{label}'")
        return self.labels[label]

    def action_index(self, name: str) -> int:
        try:
            return self.actions.index(name)
        except ValueError:
            raise ModelError(f"unknown action '{name}'") from None


@dataclass(frozen=True, eq=False)
class Mc:
    """Explicit Markov chain; `matrix` is a row-stochastic CSR matrix."""

    matrix: sp.csr_matrix
    initial: int
    rewards: np.ndarray
    targets: np.ndarray
    # optional names of the states, e.g. (state, node) pairs of a product
    labels: Optional[list] = None

    @property
    def num_states(self) -> int:
        return self.matrix.shape[0]

    def check(self):
        sums = np.asarray(self.matrix.sum(axis=1)).ravel()
        bad = np.flatnonzero(np.abs(sums - 1.0) > STOCHASTIC_TOL)
        if bad.size:
            raise ModelError(f"row {bad[0]} of chain sums to {sums[bad[0]]}")


# --- specifications ------------------------------------------------------


@dataclass(frozen=True)
class Constraint:
    kind: str  # "P" or "R"
    direction: str  # ">=" or "<="
    threshold: float
    label: str

    def __post_init__(self):
        if self.kind not in ("P", "R"):
            raise ModelError(f"unknown property kind '{self.kind}'")
        if self.direction not in (">=", "<="):
            raise ModelError(f"unknown comparison '{self.direction}'")
        if self.kind == "P" and not 0.0 <= self.threshold <= 1.0:
            raise ModelError(f"probability threshold {self.threshold} outside [0,1]")
        if self.kind == "R" and not self.threshold >= 0.0:
            raise ModelError(f"reward threshold {self.threshold} must be >= 0")

    @property
    def maximizing(self) -> bool:
        """Direction in which the property value is favourable."""
        return self.direction == ">="

    def __str__(self):
        return f"{self.kind} {self.direction} {self.threshold:g} reach {self.label}"


@dataclass(frozen=True)
class Objective:
    kind: str
    direction: str  # "max" or "min"
    label: str

    def __post_init__(self):
        if self.kind not in ("P", "R"):
            raise ModelError(f"unknown property kind '{self.kind}'")
        if self.direction not in ("max", "min"):
            raise ModelError(f"unknown optimisation direction '{self.direction}'")

    @property
    def maximizing(self) -> bool:
        return self.direction == "max"

    def improves(self, value: float, reference: float) -> bool:
        return value > reference if self.maximizing else value < reference

    def __str__(self):
        return f"{self.kind} {self.direction} reach {self.label}"


@dataclass(frozen=True)
class Specification:
    constraints: tuple[Constraint, ...]
    objective: Objective

    def check_labels(self, pomdp: Pomdp):
        for prop in (*self.constraints, self.objective):
            if not pomdp.target(prop.label):
                raise ModelError(f"label '{prop.label}' denotes an empty state set")

    def effective_constraints(self) -> tuple[Constraint, ...]:
        """Constraints including the implicit almost-sure reachability of reward objectives."""
        if self.objective.kind != "R":
            return self.constraints
        implicit = Constraint("P", ">=", 1.0, self.objective.label)
        if implicit in self.constraints:
            return self.constraints
        return (implicit, *self.constraints)

    def __str__(self):
        return "; ".join(str(p) for p in (*self.constraints, self.objective))


# --- parsing --------------------------------------------------------------


def _parse_prob(token: str, line: int, col: int) -> float:
    try:
        value = Fraction(token)
    except (ValueError, ZeroDivisionError):
        raise ModelError(f"bad number '{token}'", line, col) from None
    return float(value)


def _tokens(text: str):
    """Yield (line number, [(column, token), ...]) for every non-empty line."""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        content = raw.split("#", 1)[0]
        toks = []
        col = 0
        for part in content.split():
            col = content.index(part, col)
            toks.append((col + 1, part))
            col += len(part)
        if toks:
            yield lineno, toks


def _int(tok, lineno, what, bound=None):
    col, text = tok
    try:
        value = int(text)
    except ValueError:
        raise ModelError(f"expected {what} index, got '{text}'", lineno, col) from None
    if value < 0 or (bound is not None and value >= bound):
        raise ModelError(f"{what} {value} out of range", lineno, col)
    return value


def parse_model(text: str) -> Pomdp:
    num_states = None
    actions = None
    num_obs = None
    initial = None
    obs = {}
    rows: dict = {}
    rewards = {}
    labels = {}
    row_lines = {}

    def need(value, what, lineno):
        if value is None:
            raise ModelError(f"'{what}' must be declared first", lineno, 1)
        return value

    for lineno, toks in _tokens(text):
        key = toks[0][1]
        args = toks[1:]
        if key == "states":
            if len(args) != 1:
                raise ModelError("usage: states N", lineno, 1)
            num_states = _int(args[0], lineno, "state count")
            if num_states == 0:
                raise ModelError("model needs at least one state", lineno, args[0][0])
        elif key == "actions":
            if not args:
                raise ModelError("usage: actions name ...", lineno, 1)
            names = [t for _, t in args]
            if len(set(names)) != len(names):
                raise ModelError("duplicate action name", lineno, 1)
            actions = tuple(names)
        elif key == "observations":
            if len(args) != 1:
                raise ModelError("usage: observations M", lineno, 1)
            num_obs = _int(args[0], lineno, "observation count")
        elif key == "initial":
            n = need(num_states, "states", lineno)
            if len(args) != 1:
                raise ModelError("usage: initial s", lineno, 1)
            initial = ((_int(args[0], lineno, "state", n), 1.0),)
        elif key == "initial-dist":
            n = need(num_states, "states", lineno)
            dist = []
            for col, item in args:
                if item.count(":") != 1:
                    raise ModelError(f"expected state:prob, got '{item}'", lineno, col)
                s, p = item.split(":")
                dist.append((_int((col, s), lineno, "state", n), _parse_prob(p, lineno, col)))
            if not dist:
                raise ModelError("empty initial distribution", lineno, 1)
            if abs(math.fsum(p for _, p in dist) - 1.0) > STOCHASTIC_TOL:
                raise ModelError("initial distribution does not sum to 1", lineno, 1)
            initial = tuple(dist)
        elif key == "obs":
            n = need(num_states, "states", lineno)
            m = need(num_obs, "observations", lineno)
            if len(args) != 2:
                raise ModelError("usage: obs s z", lineno, 1)
            s = _int(args[0], lineno, "state", n)
            if s in obs:
                raise ModelError(f"observation of state {s} declared twice", lineno, args[0][0])
            obs[s] = _int(args[1], lineno, "observation", m)
        elif key in ("trans", "reward"):
            n = need(num_states, "states", lineno)
            acts = need(actions, "actions", lineno)
            if len(args) != (4 if key == "trans" else 3):
                usage = "trans s action s' p" if key == "trans" else "reward s action v"
                raise ModelError(f"usage: {usage}", lineno, 1)
            s = _int(args[0], lineno, "state", n)
            col, aname = args[1]
            if aname not in acts:
                raise ModelError(f"unknown action '{aname}'", lineno, col)
            a = acts.index(aname)
            if key == "trans":
                t = _int(args[2], lineno, "state", n)
                p = _parse_prob(args[3][1], lineno, args[3][0])
                if not 0.0 < p <= 1.0:
                    raise ModelError(f"probability {p} outside (0,1]", lineno, args[3][0])
                row = rows.setdefault((s, a), {})
                row[t] = row.get(t, 0.0) + p
                row_lines.setdefault((s, a), lineno)
            else:
                v = _parse_prob(args[2][1], lineno, args[2][0])
                if not math.isfinite(v) or v < 0:
                    raise ModelError(f"reward {v} must be finite and >= 0", lineno, args[2][0])
                rewards[(s, a)] = v
        elif key == "label":
            n = need(num_states, "states", lineno)
            if not args:
                raise ModelError("usage: label name s ...", lineno, 1)
            name = args[0][1]
            labels[name] = frozenset(_int(t, lineno, "state", n) for t in args[1:])
        else:
            raise ModelError(f"unknown directive '{key}'", lineno, 1)

    if num_states is None or actions is None or num_obs is None:
        raise ModelError("model must declare states, actions and observations")
    missing = [s for s in range(num_states) if s not in obs]
    if missing:
        raise ModelError(f"missing obs declaration for state {missing[0]}")
    for (s, a), row in rows.items():
        total = math.fsum(row.values())
        if abs(total - 1.0) > STOCHASTIC_TOL:
            raise ModelError(
                f"distribution of state {s} action {actions[a]} sums to {total:.12g}", row_lines[(s, a)])
    for (s, a) in rewards:
        if (s, a) not in rows:
            raise ModelError(f"reward for disabled action {actions[a]} in state {s}")
    for s in range(num_states):
        if not any((s, a) in rows for a in range(len(actions))):
            raise ModelError(f"state {s} has no enabled action")
    transitions = {key: tuple(sorted(row.items())) for key, row in sorted(rows.items())}
    return Pomdp(
        num_states=num_states,
        actions=actions,
        num_observations=num_obs,
        obs=tuple(obs[s] for s in range(num_states)),
        transitions=transitions,
        rewards=dict(sorted(rewards.items())),
        labels=labels,
        initial=initial if initial is not None else ((0, 1.0),),
    )


def dump_model(pomdp: Pomdp) -> str:
    out = [
        f"states {pomdp.num_states}",
        "actions " + " ".join(pomdp.actions),
        f"observations {pomdp.num_observations}",
    ]
    if pomdp.initial_state is not None:
        out.append(f"initial {pomdp.initial_state}")
    else:
        out.append("initial-dist " + " ".join(f"{s}:{p!r}" for s, p in pomdp.initial))
    out.extend(f"obs {s} {z}" for s, z in enumerate(pomdp.obs))
    for (s, a), dist in pomdp.transitions.items():
        out.extend(f"trans {s} {pomdp.actions[a]} {t} {p!r}" for t, p in dist)
    for (s, a), v in pomdp.rewards.items():
        out.append(f"reward {s} {pomdp.actions[a]} {v!r}")
    for name, states in pomdp.labels.items():
        out.append(" ".join(["label", name, *map(str, sorted(states))]))
    return "\n".join(out) + "\n"


def parse_spec(text: str) -> Specification:
    constraints = []
    objective = None
    items = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        for part in raw.split("#", 1)[0].split(";"):
            if part.strip():
                items.append((lineno, part.split()))
    for lineno, toks in items:
        if objective is not None:
            if toks[1] in ("max", "min"):
                raise ModelError("more than one objective", lineno)
            raise ModelError("objective must be the last property", lineno)
        if len(toks) not in (4, 5) or toks[0] not in ("P", "R") or toks[-2] != "reach":
            raise ModelError(f"malformed property '{' '.join(toks)}'", lineno)
        kind = toks[0]
        if len(toks) == 4:
            if toks[1] not in ("max", "min"):
                raise ModelError(f"expected max or min, got '{toks[1]}'", lineno)
            objective = Objective(kind, toks[1], toks[3])
            continue
        if toks[1] not in (">=", "<="):
            raise ModelError(f"expected >= or <=, got '{toks[1]}'", lineno)
        try:
            threshold = float(Fraction(toks[2]))
        except (ValueError, ZeroDivisionError):
            raise ModelError(f"bad threshold '{toks[2]}'", lineno) from None
        try:
            constraints.append(Constraint(kind, toks[1], threshold, toks[4]))
        except ModelError as err:
            raise ModelError(str(err), lineno) from None
    if objective is None:
        raise ModelError("specification has no objective")
    return Specification(tuple(constraints), objective)


def normalize_initial(pomdp: Pomdp) -> Pomdp:
    """Replace an initial distribution by a fresh state that branches into it.

    The fresh state gets its own observation and a single zero-reward action,
    so it adds one step that is invisible to reachability and reward values.
    """
    if pomdp.initial_state is not None:
        return pomdp
    fresh = pomdp.num_states
    transitions = dict(pomdp.transitions)
    dist = {}
    for s, p in pomdp.initial:
        dist[s] = dist.get(s, 0.0) + p
    transitions[(fresh, 0)] = tuple(sorted(dist.items()))
    return Pomdp(
        num_states=pomdp.num_states + 1,
        actions=pomdp.actions,
        num_observations=pomdp.num_observations + 1,
        obs=(*pomdp.obs, pomdp.num_observations),
        transitions=transitions,
        rewards=dict(pomdp.rewards),
        labels=dict(pomdp.labels),
        initial=((fresh, 1.0),),
        bootstrap=pomdp.num_observations,
    )


def mc_from_rows(rows: Iterable, initial: int, rewards, targets, labels=None) -> Mc:
    """Build an Mc from per-state lists of (successor, probability)."""
    indptr = [0]
    cols = []
    vals = []
    for row in rows:
        for t, p in row:
            cols.append(t)
            vals.append(p)
        indptr.append(len(cols))
    n = len(indptr) - 1
    matrix = sp.csr_matrix((np.array(vals, dtype=float), np.array(cols, dtype=np.int64), np.array(indptr)), shape=(n, n))
    matrix.sum_duplicates()
    mask = np.zeros(n, dtype=bool)
    mask[list(targets)] = True
    return Mc(matrix, initial, np.asarray(rewards, dtype=float), mask, labels)
