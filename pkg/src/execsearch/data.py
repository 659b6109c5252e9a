"""Dataset files and a template-based synthetic generator.

A dataset line is ``id TAB world0 TAB utt1 TAB world1 ... TAB uttM TAB worldM``
with worlds in the serialization of :mod:`execsearch.scone`.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .mdp import SconeProblem
from .scone import DOMAINS, Example, ExecResult, ExecutionError, ParseError, World, get_domain, serialize_world

log = logging.getLogger(__name__)

# utterance counts kept when turning full examples into training examples
TRUNCATIONS = {"scene": (4, 5), "alchemy": (1, 5), "tangrams": (4, 5)}


class DataError(ValueError):
    pass


@dataclass
class DatasetFile:
    path: str
    domain: str
    examples: list

    def by_id(self, ex_id: str) -> Example:
        for ex in self.examples:
            if ex.id == ex_id:
                return ex
        raise KeyError(ex_id)


def parse_line(line: str, domain: str, lineno: int = 1) -> Example:
    d = get_domain(domain)
    fields = line.rstrip("\n").split("\t")
    if len(fields) < 4 or len(fields) % 2:
        raise DataError(f"line {lineno}: expected id, world0 and utterance/world pairs, got {len(fields)} fields")
    col = len(fields[0]) + 2
    worlds = []
    for i in range(1, len(fields), 2):
        try:
            worlds.append(d.parse_world(fields[i]))
        except ParseError as err:
            raise DataError(f"line {lineno}, column {col + err.column - 1}: {err}") from None
        col += len(fields[i]) + 1
        if i + 1 < len(fields):
            col += len(fields[i + 1]) + 1
    utts = tuple(tuple(fields[i].lower().split()) for i in range(2, len(fields), 2))
    for i, u in enumerate(utts, start=1):
        if not u:
            raise DataError(f"line {lineno}: utterance {i} is empty")
    return Example(fields[0], worlds[0], utts, worlds[-1], tuple(worlds[1:]))


def format_line(ex: Example) -> str:
    parts = [ex.id, serialize_world(ex.world0)]
    worlds = list(ex.intermediate) or [ex.target]
    for u, w in zip(ex.utterances, worlds):
        parts += [" ".join(u), serialize_world(w)]
    return "\t".join(parts)


def load_dataset(path: str, domain: str) -> DatasetFile:
    get_domain(domain)
    examples = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip() or line.startswith("#"):
                continue
            ex = parse_line(line, domain, lineno)
            if ex.id in seen:
                raise DataError(f"line {lineno}: duplicate id {ex.id!r}")
            seen.add(ex.id)
            examples.append(ex)
    if not examples:
        raise DataError(f"{path}: no examples")
    return DatasetFile(path, domain, examples)


def save_dataset(examples, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(format_line(ex) + "\n")


def training_examples(examples, domain: str, truncations=None) -> list[Example]:
    """Truncated copies of each example, following the per-domain cut policy.

    Cuts longer than an example are skipped; duplicates (a cut equal to the
    full length listed twice) are not produced.
    """
    cuts = truncations or TRUNCATIONS[domain]
    out = []
    for ex in examples:
        for n in sorted(set(cuts)):
            if n <= ex.m:
                out.append(ex.truncate(n))
    return out


def reachable_in_one_command(w0: World, w1: World, max_tokens: int = 8) -> bool:
    """Whether some single command maps ``w0`` to ``w1`` (exhaustive, bounded)."""
    ex = Example("check", w0, (("x",),), w1)
    problem = SconeProblem(ex)
    frontier = [problem.root]
    seen = {problem.root.key}
    for _ in range(max_tokens):
        nxt = []
        for s in frontier:
            for _, s2 in problem.successors(s):
                if s2.done:
                    if s2.world == w1:
                        return True
                    continue
                if s2.key not in seen:
                    seen.add(s2.key)
                    nxt.append(s2)
        frontier = nxt
    return False


def validate_dataset(ds: DatasetFile, limit: int | None = None) -> int:
    """Warn about recorded worlds not reachable from their predecessor; returns the warning count."""
    bad = 0
    for ex in ds.examples[:limit]:
        prev = ex.world0
        for i, w in enumerate(ex.intermediate, start=1):
            if not reachable_in_one_command(prev, w):
                log.warning("example %s: world after utterance %d is not reachable in one command", ex.id, i)
                bad += 1
            prev = w
    return bad


# -- synthetic data -------------------------------------------------------------

ORDINALS = ["first", "second", "third", "fourth", "fifth", "sixth", "seventh", "eighth", "ninth", "tenth"]
NUMBERS = ["one", "two", "three", "four"]


def _random_world(domain: str, rng) -> World:
    d = DOMAINS[domain]
    if domain == "alchemy":
        cols = list(d.color_names)
        cells = []
        for _ in range(d.n_positions):
            n = int(rng.integers(0, 5))
            # beakers mostly hold a single chemical
            c = cols[rng.integers(len(cols) - 1)]
            cells.append(c * n if rng.random() < 0.85 or n < 2 else
                         "".join(rng.choice(cols[:-1], size=n)))
        return World(domain, tuple(cells))
    if domain == "scene":
        cols = list(d.color_names)
        cells = ["__"] * d.n_positions
        for p in rng.choice(d.n_positions, size=int(rng.integers(2, 6)), replace=False):
            cells[p] = cols[rng.integers(len(cols))] + (cols[rng.integers(len(cols))] if rng.random() < 0.6 else "_")
        return World(domain, tuple(cells))
    n = int(rng.integers(3, 6))
    return World(domain, tuple(int(s) for s in rng.permutation(5)[:n]))


def _pick(options, rng):
    if not options:
        return None
    # uniform over action types first, so frequent argument patterns do not dominate
    kinds = sorted({o[0] for o in options})
    kind = kinds[rng.integers(len(kinds))]
    pool = [o for o in options if o[0] == kind]
    return pool[rng.integers(len(pool))]


def _alchemy_ref(world: World, p: int, rng) -> str:
    tops = [b[-1] if b else None for b in world.cells]
    top = tops[p - 1]
    if top is not None and tops.count(top) == 1 and rng.random() < 0.5:
        return f"the {DOMAINS['alchemy'].color_names[top]} beaker"
    if p == 7 and rng.random() < 0.3:
        return "the last beaker"
    return f"the {ORDINALS[p - 1]} beaker"


def _alchemy_command(world: World, rng):
    d = DOMAINS["alchemy"]
    cells = world.cells
    options = []
    for a in range(1, 8):
        n = len(cells[a - 1])
        for b in range(1, 8):
            for k in range(1, n + 1):
                if a != b and len(cells[b - 1]) + k <= d.capacity:
                    options.append(("pour", a, b, k))
        if n and set(cells[a - 1]) != {"b"}:
            options.append(("mix", a))
        for k in range(1, n + 1):
            options.append(("drain", a, k))
    op = _pick(options, rng)
    if op is None:
        return None
    if op[0] == "pour":
        _, a, b, k = op
        amount = "all of" if k == len(cells[a - 1]) else f"{NUMBERS[k - 1]} unit{'s' if k > 1 else ''} of"
        text = f"pour {amount} {_alchemy_ref(world, a, rng)} into {_alchemy_ref(world, b, rng)}"
        prog = f"{a} {b} x{k} pour"
    elif op[0] == "mix":
        verb = "mix" if rng.random() < 0.6 else "stir"
        text = f"{verb} {_alchemy_ref(world, op[1], rng)}"
        prog = f"{op[1]} mix"
    else:
        _, a, k = op
        amount = "all of" if k == len(cells[a - 1]) else f"{NUMBERS[k - 1]} unit{'s' if k > 1 else ''} from"
        verb = "drain" if rng.random() < 0.6 else "throw out"
        text = f"{verb} {amount} {_alchemy_ref(world, a, rng)}"
        prog = f"{a} x{k} drain"
    return text, prog


def _scene_ref(world: World, p: int, rng) -> str:
    d = DOMAINS["scene"]
    shirt, hat = world.cells[p - 1]
    shirts = [c[0] for c in world.cells]
    hats = [c[1] for c in world.cells]
    if hat != "_" and hats.count(hat) == 1 and rng.random() < 0.5:
        return f"the person with the {d.color_names[hat]} hat"
    if shirts.count(shirt) == 1 and rng.random() < 0.7:
        return f"the person in the {d.color_names[shirt]} shirt"
    return f"the person at the {ORDINALS[p - 1]} position"


def _scene_command(world: World, rng):
    d = DOMAINS["scene"]
    cells = world.cells
    people = [i + 1 for i, c in enumerate(cells) if c != "__"]
    empty = [i + 1 for i, c in enumerate(cells) if c == "__"]
    options = [("move", a, b) for a in people for b in empty]
    options += [("leave", a) for a in people]
    options += [("enter", c, b) for c in d.color_names for b in empty]
    options += [("swapHats", a, b) for a in people for b in people if a < b and cells[a - 1][1] != cells[b - 1][1]]
    op = _pick(options, rng)
    if op is None:
        return None
    if op[0] == "move":
        text = f"{_scene_ref(world, op[1], rng)} moves to the {ORDINALS[op[2] - 1]} position"
        prog = f"{op[1]} {op[2]} move"
    elif op[0] == "leave":
        text = f"{_scene_ref(world, op[1], rng)} leaves"
        prog = f"{op[1]} leave"
    elif op[0] == "enter":
        text = f"a person in a {d.color_names[op[1]]} shirt appears at the {ORDINALS[op[2] - 1]} position"
        prog = f"{d.color_names[op[1]]} {op[2]} enter"
    else:
        text = f"{_scene_ref(world, op[1], rng)} and {_scene_ref(world, op[2], rng)} swap hats"
        prog = f"{op[1]} {op[2]} swapHats"
    return text, prog


def _tangrams_command(world: World, history: list, rng):
    figs = world.cells
    n = len(figs)
    options = [("remove", a) for a in range(1, n + 1)]
    options += [("swap", a, b) for a in range(1, n + 1) for b in range(a + 1, n + 1)]
    for i, (action, shape) in enumerate(history, start=1):
        if action == "remove" and shape not in figs and n < 5:
            options += [("insert", a, i) for a in range(1, n + 2)]
    op = _pick(options, rng)
    if op is None:
        return None
    if op[0] == "remove":
        return f"remove the {ORDINALS[op[1] - 1]} figure", f"{op[1]} remove", ("remove", figs[op[1] - 1])
    if op[0] == "swap":
        return (f"swap the {ORDINALS[op[1] - 1]} and {ORDINALS[op[2] - 1]} figures",
                f"{op[1]} {op[2]} swap", ("swap", None))
    return (f"put back the figure removed in step {NUMBERS[op[2] - 1] if op[2] <= 4 else 'five'} "
            f"at the {ORDINALS[op[1] - 1]} position", f"{op[1]} i{op[2]} shapeRemovedIn insert", ("insert", None))


def generate_examples(domain: str, n: int, m: int, seed: int, prefix: str = "syn") -> list[tuple[Example, list[str]]]:
    """``n`` random ``m``-utterance examples with their gold programs (one per command).

    Every generated command is checked against the executor, so the
    recorded worlds are always reachable.
    """
    d = get_domain(domain)
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        w0 = _random_world(domain, rng)
        world, utts, worlds, progs, hist = w0, [], [], [], []
        ex_res = ExecResult(w0)
        ok = True
        for _ in range(m):
            if domain == "alchemy":
                cmd = _alchemy_command(world, rng)
            elif domain == "scene":
                cmd = _scene_command(world, rng)
            else:
                cmd = _tangrams_command(world, hist, rng)
            if cmd is None:
                ok = False
                break
            text, prog = cmd[0], cmd[1]
            if domain == "tangrams":
                hist.append(cmd[2])
            try:
                for name in prog.split():
                    ex_res = d.step(ex_res, d.by_name[name])
            except ExecutionError:
                ok = False
                break
            world = ex_res.world
            utts.append(tuple(text.split()))
            worlds.append(world)
            progs.append(prog)
        if not ok or world == w0 and domain != "tangrams":
            continue
        ex = Example(f"{prefix}{len(out)}", w0, tuple(utts), worlds[-1], tuple(worlds))
        out.append((ex, progs))
    return out


def dataset_words(examples) -> list[str]:
    return sorted({w for ex in examples for u in ex.utterances for w in u})

