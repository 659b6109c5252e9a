"""The executor viewed as a deterministic MDP over (utterance, execution result)."""
from __future__ import annotations

from dataclasses import dataclass, field

from .scone import ACTION, DOMAINS, Example, ExecResult, ExecutionError, Token, World, serialize_world


@dataclass(frozen=True, slots=True)
class MdpState:
    index: int
    exec: ExecResult
    m: int = field(compare=False)
    key: bytes = field(default=b"", compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "key", _encode(self.index, self.exec))

    @property
    def done(self) -> bool:
        return self.index == self.m + 1

    @property
    def world(self) -> World:
        return self.exec.world

    @property
    def stack(self) -> tuple:
        return self.exec.stack


def _encode(index: int, ex: ExecResult) -> bytes:
    return "|".join((
        str(index),
        serialize_world(ex.world),
        ",".join(map(str, ex.stack)),
        ";".join(map(str, ex.history)),
    )).encode()


def state_key(s: MdpState) -> bytes:
    return s.key


def initial_state(ex: Example) -> MdpState:
    return MdpState(1, ExecResult(ex.world0), ex.m)


def transition(s: MdpState, a: Token) -> MdpState:
    if s.done:
        raise ExecutionError("transition from a finished state")
    nxt = DOMAINS[s.exec.world.domain].step(s.exec, a)
    return MdpState(s.index + (a.kind == ACTION), nxt, s.m)


def reward(s: MdpState, a: Token, y: World) -> int:
    if a.kind != ACTION:
        return 0
    s2 = transition(s, a)
    return int(s2.done and s2.exec.world == y)


def is_terminal(s: MdpState) -> bool:
    return s.done


class SconeProblem:
    """Search interface over one example; successor lists are memoized by state key.

    Transitions do not depend on model parameters, so one instance can be
    reused across training steps.
    """

    def __init__(self, example: Example):
        self.example = example
        self.domain = DOMAINS[example.domain]
        self.root = initial_state(example)
        self.target = example.target
        self._succ: dict[bytes, list] = {}

    def successors(self, s: MdpState) -> list[tuple[Token, MdpState]]:
        got = self._succ.get(s.key)
        if got is not None:
            return got
        out = []
        if not s.done:
            step = self.domain.step
            for tok in self.domain.vocab:
                try:
                    nxt = step(s.exec, tok)
                except ExecutionError:
                    continue
                out.append((tok, MdpState(s.index + (tok.kind == ACTION), nxt, s.m)))
        self._succ[s.key] = out
        return out

    def key(self, s: MdpState) -> bytes:
        return s.key

    def is_done(self, s: MdpState) -> bool:
        return s.done

    def is_correct(self, s: MdpState) -> bool:
        return s.done and s.exec.world == self.target

    def utterance_index(self, s: MdpState) -> int:
        return s.index

    def replay(self, tokens) -> list[MdpState]:
        """States visited by a token sequence, starting with the root."""
        states = [self.root]
        for tok in tokens:
            states.append(transition(states[-1], tok))
        return states
