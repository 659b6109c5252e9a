"""SCONE worlds, the postfix token language and its executor.

Three domains are supported: ``scene`` (people on a bench of 10 positions),
``alchemy`` (7 beakers of stacked colored units) and ``tangrams`` (a row of
up to 5 distinct figures).  Everything here is an immutable value, so the
executor is a pure function of ``(ExecResult, Token)``.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import NamedTuple

POS, COLOR, AMOUNT, SHAPE, INDEX = "pos", "color", "amount", "shape", "index"
CONSTANT, FUNCTION, ACTION = "constant", "function", "action"

MAX_HISTORY_INDEX = 5


class ParseError(ValueError):
    def __init__(self, message: str, token: str, column: int):
        super().__init__(f"{message}: {token!r} at column {column}")
        self.token = token
        self.column = column


class ExecutionError(Exception):
    pass


class StackUnderflow(ExecutionError):
    pass


class TypeMismatch(ExecutionError):
    pass


class Value(NamedTuple):
    kind: str
    val: int | str

    def __str__(self) -> str:
        return f"{self.kind[0]}{self.val}"


@dataclass(frozen=True, slots=True)
class World:
    domain: str
    cells: tuple

    def __str__(self) -> str:
        return serialize_world(self)


@dataclass(frozen=True)
class Token:
    name: str
    kind: str
    arg_kinds: tuple = ()
    result_kind: str | None = None
    value: Value | None = None
    index: int = -1

    @property
    def arity(self) -> int:
        return len(self.arg_kinds)

    def __str__(self) -> str:
        return self.name


class HistoryEntry(NamedTuple):
    action: str
    args: tuple
    # shape removed by a tangrams ``remove``; read back by shapeRemovedIn
    effect: Value | None = None

    def __str__(self) -> str:
        return f"{self.action}({','.join(map(str, self.args))})"


@dataclass(frozen=True, slots=True)
class ExecResult:
    world: World
    stack: tuple = ()
    history: tuple = ()
    terminated: bool = field(default=False, compare=False)


@dataclass(frozen=True)
class Example:
    id: str
    world0: World
    utterances: tuple
    target: World
    intermediate: tuple = ()

    def __post_init__(self):
        if len(self.utterances) < 1:
            raise ValueError(f"example {self.id}: needs at least one utterance")
        if self.world0.domain != self.target.domain:
            raise ValueError(f"example {self.id}: worlds from different domains")

    @property
    def domain(self) -> str:
        return self.world0.domain

    @property
    def m(self) -> int:
        return len(self.utterances)

    def truncate(self, n: int) -> "Example":
        """First ``n`` utterances, targeting the recorded world at the cut."""
        if not 1 <= n <= self.m:
            raise ValueError(f"cannot truncate {self.m}-utterance example {self.id} to {n}")
        if n == self.m:
            target = self.target
        else:
            if len(self.intermediate) < n:
                raise ValueError(f"example {self.id} has no recorded world after utterance {n}")
            target = self.intermediate[n - 1]
        return Example(
            id=f"{self.id}:{n}", world0=self.world0, utterances=self.utterances[:n],
            target=target, intermediate=self.intermediate[:n],
        )


class Domain:
    name = ""
    n_positions = 0
    color_names: dict = {}
    n_amounts = 0
    functions: tuple = ()
    actions: tuple = ()

    def __init__(self):
        self.color_chars = {name: ch for ch, name in self.color_names.items()}
        toks = []
        for ch, name in self.color_names.items():
            toks.append(Token(name, CONSTANT, (), COLOR, Value(COLOR, ch)))
        for p in range(1, self.n_positions + 1):
            toks.append(Token(str(p), CONSTANT, (), POS, Value(POS, p)))
        for a in range(1, self.n_amounts + 1):
            toks.append(Token(f"x{a}", CONSTANT, (), AMOUNT, Value(AMOUNT, a)))
        for i in range(1, MAX_HISTORY_INDEX + 1):
            toks.append(Token(f"i{i}", CONSTANT, (), INDEX, Value(INDEX, i)))
        for name, args, res in self.functions:
            toks.append(Token(name, FUNCTION, args, res))
        for name, args in self.actions:
            toks.append(Token(name, ACTION, args, None))
        self.vocab = tuple(
            Token(t.name, t.kind, t.arg_kinds, t.result_kind, t.value, i) for i, t in enumerate(toks)
        )
        self.by_name = {t.name: t for t in self.vocab}
        self.max_depth = max(len(a) for _, a in self.actions) + max(
            (len(a) for _, a, _ in self.functions), default=1) - 1
        self.viable = self._viable_kind_sequences()

    def stack_values(self) -> list[Value]:
        """Every value that can sit on the program stack in this domain."""
        vals = [t.value for t in self.vocab if t.kind == CONSTANT]
        vals += [Value(SHAPE, s) for s in range(5)] if self.name == "tangrams" else []
        return vals

    def _viable_kind_sequences(self) -> frozenset:
        # kind sequences from which some token sequence can still complete an action
        kinds = sorted({t.result_kind for t in self.vocab if t.kind != ACTION}
                       | {k for t in self.vocab for k in t.arg_kinds})
        const_kinds = sorted({t.result_kind for t in self.vocab if t.kind == CONSTANT})
        seqs = [s for n in range(self.max_depth + 1) for s in itertools.product(kinds, repeat=n)]
        viable = {tuple(a) for _, a in self.actions}
        changed = True
        while changed:
            changed = False
            for s in seqs:
                if s in viable:
                    continue
                ok = any(s + (k,) in viable for k in const_kinds)
                if not ok:
                    for _, args, res in self.functions:
                        n = len(args)
                        if len(s) >= n and s[len(s) - n:] == tuple(args) and s[:len(s) - n] + (res,) in viable:
                            ok = True
                            break
                if ok:
                    viable.add(s)
                    changed = True
        return frozenset(viable)

    # -- serialization -------------------------------------------------------

    def parse_world(self, text: str) -> World:
        cells = []
        col = 0
        fields = []
        for part in text.split(" "):
            if part:
                fields.append((part, col + 1))
            col += len(part) + 1
        if self.name != "tangrams" and len(fields) != self.n_positions:
            tok, c = fields[-1] if fields else ("", 1)
            raise ParseError(f"{self.name} world needs {self.n_positions} fields, got {len(fields)}", tok, c)
        for expected, (part, c) in enumerate(fields, start=1):
            pos, sep, payload = part.partition(":")
            if not sep or not pos.isdigit():
                raise ParseError("malformed field", part, c)
            if int(pos) != expected or int(pos) > self.n_positions:
                raise ParseError("out-of-range or misordered position", part, c)
            cells.append(self._parse_payload(payload, part, c))
        world = World(self.name, tuple(cells))
        self._check_world(world, text)
        return world

    def _check_world(self, world: World, text: str) -> None:
        pass

    def serialize_world(self, world: World) -> str:
        return " ".join(f"{i}:{self._payload(c)}" for i, c in enumerate(world.cells, start=1))

    def describe_value(self, v: Value) -> str:
        if v.kind == COLOR:
            return self.color_names[v.val]
        return str(v.val)

    # -- execution -----------------------------------------------------------

    def step(self, ex: ExecResult, tok: Token) -> ExecResult:
        stack = ex.stack
        if tok.kind == CONSTANT:
            if tok.value.kind == INDEX and not ex.history:
                raise ExecutionError("history reference with empty history")
            stack = stack + (tok.value,)
            self._check_viable(stack)
            return ExecResult(ex.world, stack, ex.history)
        n = len(tok.arg_kinds)
        if len(stack) < n:
            raise StackUnderflow(f"{tok.name} needs {n} arguments, stack has {len(stack)}")
        args = stack[len(stack) - n:]
        for v, k in zip(args, tok.arg_kinds):
            if v.kind != k:
                raise TypeMismatch(f"{tok.name} expects {tok.arg_kinds}, got {tuple(a.kind for a in args)}")
        if tok.kind == FUNCTION:
            res = self.call(tok.name, args, ex)
            stack = stack[:len(stack) - n] + (res,)
            self._check_viable(stack)
            return ExecResult(ex.world, stack, ex.history)
        if len(stack) != n:
            raise ExecutionError(f"{tok.name} would leave {len(stack) - n} values on the stack")
        world, effect = self.act(tok.name, args, ex.world)
        entry = HistoryEntry(tok.name, args, effect)
        return ExecResult(world, (), ex.history + (entry,), terminated=True)

    def _check_viable(self, stack: tuple) -> None:
        if tuple(v.kind for v in stack) not in self.viable:
            raise TypeMismatch("stack cannot be completed into any command")

    def call(self, name: str, args: tuple, ex: ExecResult) -> Value:
        if name == "argOf":
            entry = self._history_entry(ex, args[0])
            k = args[1].val
            if k > len(entry.args) or entry.args[k - 1].kind != POS:
                raise ExecutionError(f"command {args[0].val} has no position argument {k}")
            return entry.args[k - 1]
        raise ExecutionError(f"unknown function {name}")

    def _history_entry(self, ex: ExecResult, idx: Value) -> HistoryEntry:
        if idx.val > len(ex.history):
            raise ExecutionError(f"history has no command {idx.val}")
        return ex.history[idx.val - 1]

    def act(self, name: str, args: tuple, world: World):
        raise ExecutionError(f"unknown action {name}")

    def _unique(self, matches: list, what: str) -> Value:
        if len(matches) != 1:
            raise ExecutionError(f"{what}: {len(matches)} matches")
        return Value(POS, matches[0] + 1)


class SceneDomain(Domain):
    name = "scene"
    n_positions = 10
    color_names = {"r": "red", "o": "orange", "y": "yellow", "g": "green", "b": "blue", "p": "purple"}
    functions = (
        ("hasShirt", (COLOR,), POS),
        ("hasHat", (COLOR,), POS),
        ("leftOf", (POS,), POS),
        ("rightOf", (POS,), POS),
        ("argOf", (INDEX, INDEX), POS),
    )
    actions = (
        ("move", (POS, POS)),
        ("swapHats", (POS, POS)),
        ("leave", (POS,)),
        ("enter", (COLOR, POS)),
    )
    EMPTY = "__"

    def _parse_payload(self, payload, part, c):
        if len(payload) != 2:
            raise ParseError("scene payload must be two characters", part, c)
        shirt, hat = payload
        if shirt == "_" and hat != "_":
            raise ParseError("hat without a person", part, c)
        for ch in payload:
            if ch != "_" and ch not in self.color_names:
                raise ParseError("unknown color", part, c)
        return payload

    def _payload(self, cell):
        return cell

    def call(self, name, args, ex):
        cells = ex.world.cells
        if name == "hasShirt":
            return self._unique([i for i, c in enumerate(cells) if c[0] == args[0].val], "hasShirt")
        if name == "hasHat":
            return self._unique([i for i, c in enumerate(cells) if c[1] == args[0].val], "hasHat")
        if name == "leftOf":
            if args[0].val <= 1:
                raise ExecutionError("nothing left of position 1")
            return Value(POS, args[0].val - 1)
        if name == "rightOf":
            if args[0].val >= self.n_positions:
                raise ExecutionError("nothing right of the last position")
            return Value(POS, args[0].val + 1)
        return super().call(name, args, ex)

    def act(self, name, args, world):
        cells = list(world.cells)
        if name == "move":
            a, b = args[0].val - 1, args[1].val - 1
            if cells[a] == self.EMPTY or cells[b] != self.EMPTY:
                raise ExecutionError("move needs a person at the source and an empty target")
            cells[a], cells[b] = cells[b], cells[a]
        elif name == "swapHats":
            a, b = args[0].val - 1, args[1].val - 1
            if a == b or cells[a] == self.EMPTY or cells[b] == self.EMPTY or cells[a][1] == cells[b][1]:
                raise ExecutionError("swapHats needs two people with different hats")
            cells[a], cells[b] = cells[a][0] + cells[b][1], cells[b][0] + cells[a][1]
        elif name == "leave":
            a = args[0].val - 1
            if cells[a] == self.EMPTY:
                raise ExecutionError("nobody to leave")
            cells[a] = self.EMPTY
        elif name == "enter":
            a = args[1].val - 1
            if cells[a] != self.EMPTY:
                raise ExecutionError("position occupied")
            cells[a] = args[0].val + "_"
        else:
            return super().act(name, args, world)
        return World(self.name, tuple(cells)), None


class AlchemyDomain(Domain):
    name = "alchemy"
    n_positions = 7
    n_amounts = 4
    capacity = 4
    color_names = {"g": "green", "o": "orange", "p": "purple", "r": "red", "y": "yellow", "b": "brown"}
    functions = (
        ("hasColor", (COLOR,), POS),
        ("argOf", (INDEX, INDEX), POS),
    )
    actions = (
        ("pour", (POS, POS, AMOUNT)),
        ("mix", (POS,)),
        ("drain", (POS, AMOUNT)),
    )

    def _parse_payload(self, payload, part, c):
        if payload == "_":
            return ""
        if not payload or len(payload) > self.capacity:
            raise ParseError(f"beaker holds 1..{self.capacity} units", part, c)
        for ch in payload:
            if ch not in self.color_names:
                raise ParseError("unknown color", part, c)
        return payload

    def _payload(self, cell):
        return cell or "_"

    def call(self, name, args, ex):
        if name == "hasColor":
            col = args[0].val
            return self._unique([i for i, b in enumerate(ex.world.cells) if b and b[-1] == col], "hasColor")
        return super().call(name, args, ex)

    def act(self, name, args, world):
        cells = list(world.cells)
        if name == "pour":
            a, b, n = args[0].val - 1, args[1].val - 1, args[2].val
            if a == b or len(cells[a]) < n or len(cells[b]) + n > self.capacity:
                raise ExecutionError("pour exceeds contents or capacity")
            cells[b] = cells[b] + cells[a][len(cells[a]) - n:]
            cells[a] = cells[a][:len(cells[a]) - n]
        elif name == "mix":
            a = args[0].val - 1
            if not cells[a] or set(cells[a]) == {"b"}:
                raise ExecutionError("nothing to mix")
            cells[a] = "b" * len(cells[a])
        elif name == "drain":
            a, n = args[0].val - 1, args[1].val
            if len(cells[a]) < n:
                raise ExecutionError("drain exceeds contents")
            cells[a] = cells[a][:len(cells[a]) - n]
        else:
            return super().act(name, args, world)
        return World(self.name, tuple(cells)), None


class TangramsDomain(Domain):
    name = "tangrams"
    n_positions = 5
    n_shapes = 5
    functions = (
        ("shapeRemovedIn", (INDEX,), SHAPE),
        ("argOf", (INDEX, INDEX), POS),
    )
    actions = (
        ("remove", (POS,)),
        ("insert", (POS, SHAPE)),
        ("swap", (POS, POS)),
    )

    def _parse_payload(self, payload, part, c):
        if len(payload) != 1 or not payload.isdigit() or int(payload) >= self.n_shapes:
            raise ParseError("unknown shape", part, c)
        return int(payload)

    def _check_world(self, world, text):
        seen = set()
        for i, s in enumerate(world.cells, start=1):
            if s in seen:
                tok = f"{i}:{s}"
                raise ParseError("duplicate shape", tok, text.find(tok) + 1)
            seen.add(s)

    def _payload(self, cell):
        return str(cell)

    def call(self, name, args, ex):
        if name == "shapeRemovedIn":
            entry = self._history_entry(ex, args[0])
            if entry.action != "remove":
                raise ExecutionError(f"command {args[0].val} removed nothing")
            return entry.effect
        return super().call(name, args, ex)

    def act(self, name, args, world):
        figs = list(world.cells)
        if name == "remove":
            a = args[0].val - 1
            if a >= len(figs):
                raise ExecutionError("no figure at that position")
            shape = figs.pop(a)
            return World(self.name, tuple(figs)), Value(SHAPE, shape)
        if name == "insert":
            a, shape = args[0].val - 1, args[1].val
            if len(figs) >= self.n_positions or a > len(figs) or shape in figs:
                raise ExecutionError("cannot insert there")
            figs.insert(a, shape)
        elif name == "swap":
            a, b = args[0].val - 1, args[1].val - 1
            if a == b or a >= len(figs) or b >= len(figs):
                raise ExecutionError("swap needs two distinct figures")
            figs[a], figs[b] = figs[b], figs[a]
        else:
            return super().act(name, args, world)
        return World(self.name, tuple(figs)), None


DOMAINS = {d.name: d for d in (SceneDomain(), AlchemyDomain(), TangramsDomain())}


def get_domain(name: str) -> Domain:
    try:
        return DOMAINS[name]
    except KeyError:
        raise ValueError(f"unknown domain {name!r}; expected one of {sorted(DOMAINS)}") from None


def parse_world(text: str, domain: str) -> World:
    return get_domain(domain).parse_world(text)


def serialize_world(world: World) -> str:
    return DOMAINS[world.domain].serialize_world(world)


def empty_world(domain: str) -> World:
    d = get_domain(domain)
    if domain == "scene":
        return World(domain, (SceneDomain.EMPTY,) * d.n_positions)
    if domain == "alchemy":
        return World(domain, ("",) * d.n_positions)
    return World(domain, ())


def vocabulary(domain: str) -> tuple:
    return get_domain(domain).vocab


def token(domain: str, name: str) -> Token:
    return get_domain(domain).by_name[name]


def parse_tokens(domain: str, text: str) -> list[Token]:
    d = get_domain(domain)
    out = []
    for name in text.split():
        if name not in d.by_name:
            raise ValueError(f"unknown {domain} token {name!r}")
        out.append(d.by_name[name])
    return out


def step_token(ex: ExecResult, tok: Token) -> ExecResult:
    return DOMAINS[ex.world.domain].step(ex, tok)


def valid_tokens(ex: ExecResult) -> list[Token]:
    d = DOMAINS[ex.world.domain]
    out = []
    for tok in d.vocab:
        try:
            d.step(ex, tok)
        except ExecutionError:
            continue
        out.append(tok)
    return out


def execute_program(w0: World, m: int, tokens) -> World:
    if not tokens:
        raise ExecutionError("empty program")
    d = DOMAINS[w0.domain]
    ex = ExecResult(w0)
    commands = 0
    for tok in tokens:
        if commands == m:
            raise ExecutionError(f"tokens left after {m} commands")
        ex = d.step(ex, tok)
        if ex.terminated:
            commands += 1
    if commands != m:
        raise ExecutionError(f"program has {commands} commands, expected {m}")
    return ex.world
