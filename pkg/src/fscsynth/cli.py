"""Command-line front end: synthesize, evaluate and enumerate."""

from __future__ import annotations

import argparse
import sys
import threading
from pathlib import Path

from .enumerate import DEFAULT_CAP, CapExceeded, enumerate_family
from .events import EventLog
from .family import Fsc, make_reduced_family
from .inner import Problem
from .model import ModelError, Pomdp, parse_model, parse_spec
from .outer import Options, synthesize

EXIT_FOUND, EXIT_ERROR, EXIT_NONE = 0, 1, 2
INIT_OBS = "init"


def obs_name(pomdp: Pomdp, z: int) -> str:
    return INIT_OBS if z == pomdp.bootstrap else f"z{z}"


def parse_obs(pomdp: Pomdp, token: str) -> int:
    if token == INIT_OBS and pomdp.bootstrap is not None:
        return pomdp.bootstrap
    name = token[1:] if token.startswith("z") else token
    try:
        z = int(name)
    except ValueError:
        raise ModelError(f"unknown observation '{token}'") from None
    limit = pomdp.num_observations - (pomdp.bootstrap is not None)
    if not 0 <= z < limit:
        raise ModelError(f"observation '{token}' out of range (model has {limit})")
    return z


def format_fsc(pomdp: Pomdp, fsc: Fsc) -> str:
    lines = [f"nodes {fsc.k}"]
    if fsc.value is not None:
        lines.append(f"# value {fsc.value!r}")
    lines.append("# node obs action next-node")
    for n, z in sorted(fsc.action, key=lambda p: (p[1] == pomdp.bootstrap, p)):
        a = fsc.action[(n, z)]
        lines.append(f"{n} {obs_name(pomdp, z)} {pomdp.actions[a]} {fsc.update[(n, z)]}")
    return "\n".join(lines) + "\n"


def parse_fsc(pomdp: Pomdp, text: str) -> Fsc:
    """Read an FSC table; `pomdp` should already carry its fresh initial state if it needs one."""
    k = None
    action, update = {}, {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        toks = raw.split("#", 1)[0].split()
        if not toks:
            continue
        try:
            if toks[0] == "nodes":
                if len(toks) != 2 or k is not None:
                    raise ModelError("expected a single 'nodes k' header")
                k = int(toks[1])
                if k < 1:
                    raise ModelError("node count must be positive")
                continue
            if k is None:
                raise ModelError("'nodes k' must come first")
            if len(toks) != 4:
                raise ModelError("expected: node obs action next-node")
            n, m = int(toks[0]), int(toks[3])
            if not (0 <= n < k and 0 <= m < k):
                raise ModelError(f"node out of range 0..{k - 1}")
            z = parse_obs(pomdp, toks[1])
            a = pomdp.action_index(toks[2])
            if (n, z) in action:
                raise ModelError(f"duplicate entry for node {n} observation {toks[1]}")
            for s in pomdp.observation_states(z):
                if (s, a) not in pomdp.transitions:
                    raise ModelError(f"action {toks[2]} is not enabled in state {s} of {toks[1]}")
            action[(n, z)], update[(n, z)] = a, m
        except ValueError as err:
            if isinstance(err, ModelError) and err.line is not None:
                raise
            msg = str(err) if isinstance(err, ModelError) else f"bad number in '{raw.strip()}'"
            raise ModelError(msg, lineno) from None
    if k is None:
        raise ModelError("empty controller file")
    for z in range(pomdp.num_observations):
        if z != pomdp.bootstrap and pomdp.observation_states(z) and (0, z) not in action:
            raise ModelError(f"no entry for node 0 and observation {obs_name(pomdp, z)}")
    return Fsc(k, action, update)


def parse_mu(pomdp: Pomdp, text: str) -> list:
    mu = [1] * pomdp.num_observations
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        if item.count("=") != 1:
            raise ModelError(f"expected obs=count, got '{item}'")
        name, count = item.split("=")
        try:
            mu[parse_obs(pomdp, name.strip())] = int(count)
        except ValueError as err:
            if isinstance(err, ModelError):
                raise
            raise ModelError(f"bad node count in '{item}'") from None
    if min(mu) < 1:
        raise ModelError("node counts must be positive")
    return mu


def _load(args):
    try:
        model_text = Path(args.model).read_text()
    except OSError as err:
        raise InputError(f"{args.model}: {err.strerror}") from None
    try:
        spec_text = Path(args.spec).read_text()
    except OSError as err:
        raise InputError(f"{args.spec}: {err.strerror}") from None
    try:
        pomdp = parse_model(model_text)
    except ModelError as err:
        raise InputError(f"{args.model}: {err}") from None
    try:
        spec = parse_spec(spec_text)
        spec.check_labels(pomdp)
    except ModelError as err:
        raise InputError(f"{args.spec}: {err}") from None
    return pomdp, spec


class InputError(Exception):
    pass


def _fmt(v) -> str:
    return "none" if v is None else repr(float(v))


def stats_record(summary, pomdp: Pomdp) -> str:
    sym = " ".join(f"z{r.obs}:n{r.first}-{pomdp.actions[r.removed_first]},n{r.new}-{pomdp.actions[r.removed_new]}"
                   for r in summary.symmetry)
    rows = [
        ("found", "yes" if summary.found else "no"),
        ("value", _fmt(summary.value)),
        ("nodes", summary.nodes),
        ("stop", summary.stop),
        ("global_bound", _fmt(summary.global_bound)),
        ("history", " ".join(f"z{z}" for z in summary.history) or "-"),
        ("symmetry", sym or "-"),
        ("rounds", summary.rounds),
        ("families", summary.families),
        ("conflicts", summary.conflicts),
        ("incumbents", len(summary.trace)),
    ]
    for req, v in summary.bounds.items():
        rows.append((f"bound[{req}]", _fmt(v)))
    rows.append(("wall_time", f"{summary.wall_time:.3f}"))
    return "".join(f"{k} {v}\n" for k, v in rows)


def cmd_synthesize(args) -> int:
    pomdp, spec = _load(args)
    if args.timeout <= 0:
        raise InputError("--timeout must be positive")
    if args.memory_limit < 1:
        raise InputError("--memory-limit must be at least 1")
    options = Options(method=args.method, complete=args.complete, symmetry=not args.no_symmetry,
                      memory_limit=args.memory_limit, timeout=None, eps_rel=args.eps_rel,
                      eps_abs=args.eps_abs)
    stop = threading.Event()
    watchdog = threading.Timer(args.timeout, stop.set)
    watchdog.daemon = True
    events_file = open(args.events_out, "w") if args.events_out else None
    out = sys.stdout

    def announce(fsc, value, elapsed):
        out.write(f"incumbent value={value!r} elapsed={elapsed:.3f}\n")
        out.flush()

    watchdog.start()
    try:
        summary = synthesize(pomdp, spec, options, on_incumbent=announce, events=EventLog(events_file),
                             cancel=stop.is_set)
    finally:
        watchdog.cancel()
        if events_file is not None:
            events_file.close()
    normalized = Problem(pomdp, spec).pomdp
    record = stats_record(summary, pomdp)
    if summary.found:
        table = format_fsc(normalized, summary.fsc)
        out.write(table)
        if args.fsc_out:
            Path(args.fsc_out).write_text(table)
    else:
        out.write("no admissible FSC found\n")
    out.write(record)
    if args.stats_out:
        Path(args.stats_out).write_text(record)
    return EXIT_FOUND if summary.found else EXIT_NONE


def cmd_evaluate(args) -> int:
    pomdp, spec = _load(args)
    problem = Problem(pomdp, spec)
    try:
        fsc = parse_fsc(problem.pomdp, Path(args.fsc).read_text())
    except OSError as err:
        raise InputError(f"{args.fsc}: {err.strerror}") from None
    except ModelError as err:
        raise InputError(f"{args.fsc}: {err}") from None
    try:
        ev = problem.evaluate(fsc)
    except ModelError as err:
        raise InputError(f"{args.fsc}: {err}") from None
    for req, v in zip(problem.requirements, ev.values):
        print(f"constraint {req}: value={v!r} {'satisfied' if req.holds(v) else 'violated'}")
    print(f"objective {spec.objective}: value={ev.objective!r}")
    print(f"admissible {'yes' if ev.admissible else 'no'}")
    return EXIT_FOUND if ev.admissible else EXIT_NONE


def cmd_enumerate(args) -> int:
    pomdp, spec = _load(args)
    problem = Problem(pomdp, spec)
    P = problem.pomdp
    try:
        if args.mu:
            mu = parse_mu(P, args.mu)
        else:
            k = args.full_k or 1
            if k < 1:
                raise ModelError("--full-k must be positive")
            mu = [k] * P.num_observations
            if P.bootstrap is not None:
                mu[P.bootstrap] = 1
    except ModelError as err:
        raise InputError(str(err)) from None
    family = make_reduced_family(P, mu)
    try:
        result = enumerate_family(problem, family, args.cap)
    except CapExceeded as err:
        raise InputError(str(err)) from None
    print(f"members {result.members}")
    print(f"admissible {result.admissible}")
    print(f"optimum {_fmt(result.value)}")
    if result.fsc is not None:
        sys.stdout.write(format_fsc(P, result.fsc))
        return EXIT_FOUND
    print("no admissible FSC found")
    return EXIT_NONE


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fscsynth", description="Finite-state controller synthesis for POMDPs")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--model", required=True)
        p.add_argument("--spec", required=True)

    p = sub.add_parser("synthesize", help="search for the best admissible FSC")
    common(p)
    p.add_argument("--method", choices=("ar", "cegis", "hybrid"), default="ar")
    p.add_argument("--complete", action="store_true", help="use the complete refinement and generalisation")
    p.add_argument("--no-symmetry", action="store_true")
    p.add_argument("--memory-limit", type=int, default=Options.memory_limit)
    p.add_argument("--timeout", type=float, default=Options.timeout)
    p.add_argument("--eps-rel", type=float, default=Options.eps_rel)
    p.add_argument("--eps-abs", type=float, default=Options.eps_abs)
    p.add_argument("--fsc-out")
    p.add_argument("--stats-out")
    p.add_argument("--events-out", help="JSON-lines diagnostics stream")
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("evaluate", help="evaluate a given FSC")
    common(p)
    p.add_argument("--fsc", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("enumerate", help="brute-force optimum of a reduced family")
    common(p)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--full-k", type=int)
    g.add_argument("--mu", help="node counts, e.g. z1=2,z4=2")
    p.add_argument("--cap", type=int, default=DEFAULT_CAP)
    p.set_defaults(func=cmd_enumerate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InputError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
