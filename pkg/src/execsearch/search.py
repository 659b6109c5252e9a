"""Beam search in program space and value-guided beam search in execution space.

Search routines are written against a small problem interface so they run
unchanged on SCONE examples (:class:`execsearch.mdp.SconeProblem`) and on
hand-built toy MDPs in the tests:

* ``problem.root`` -- initial state
* ``problem.successors(s)`` -- list of ``(token, next_state)``, deterministic order
* ``problem.key(s)`` -- sortable, hashable state identity (bytes)
* ``problem.is_done(s)`` / ``problem.is_correct(s)``
* ``problem.utterance_index(s)``

Actors expose ``distributions(problem, states)`` returning, per state, the
probabilities of its successors in order; critics expose
``values(problem, states)``.
"""
from __future__ import annotations

import heapq
import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np


class BudgetExceeded(RuntimeError):
    pass


def _name(tok) -> str:
    return tok if isinstance(tok, str) else tok.name


@dataclass(frozen=True)
class Program:
    tokens: tuple
    token_logps: tuple
    reward: int = 0

    @property
    def logp(self) -> float:
        return float(sum(self.token_logps))

    @property
    def text(self) -> str:
        return " ".join(_name(t) for t in self.tokens)

    def __len__(self):
        return len(self.tokens)


def _select(ranked: list, K: int, epsilon: float, rng) -> list:
    """Top-K of an already ranked list; with prob. epsilon per slot, the lowest
    kept slots are swapped for uniformly drawn lower-ranked entries."""
    kept = ranked[:K]
    rest = ranked[K:]
    if epsilon <= 0 or not rest or rng is None:
        return kept
    n = int((rng.random(len(kept)) < epsilon).sum())
    n = min(n, len(rest))
    if n == 0:
        return kept
    picks = rng.choice(len(rest), size=n, replace=False)
    return kept[:len(kept) - n] + [rest[i] for i in sorted(picks)]


# -- program space ---------------------------------------------------------------


def beam_search(problem, actor, K: int, L: int, epsilon: float = 0.0, rng=None) -> list[Program]:
    """Breadth-first beam search over token prefixes ranked by log-probability.

    Complete programs compete for beam slots with unfinished prefixes; every
    complete program that wins a slot is returned and not expanded further.
    """
    if K < 1 or L < 1 or not 0 <= epsilon <= 1:
        raise ValueError("need K >= 1, L >= 1 and 0 <= epsilon <= 1")
    beam = [(0.0, (), (), problem.root)]
    results = []
    for _ in range(L):
        dists = actor.distributions(problem, [b[3] for b in beam])
        cands = []
        for (lp, toks, lps, s), dist in zip(beam, dists):
            for (tok, s2), p in zip(problem.successors(s), dist):
                if p <= 0:
                    continue
                lt = math.log(p)
                cands.append((lp + lt, toks + (tok,), lps + (lt,), s2))
        if not cands:
            break
        cands.sort(key=lambda c: (-c[0], tuple(_name(t) for t in c[1])))
        beam = []
        for c in _select(cands, K, epsilon, rng):
            if problem.is_done(c[3]):
                results.append(Program(c[1], c[2], int(problem.is_correct(c[3]))))
            else:
                beam.append(c)
        if not beam:
            break
    return results


# -- execution space ---------------------------------------------------------------


@dataclass
class ExecutionGraph:
    root: bytes
    vertices: dict = field(default_factory=dict)
    edges: dict = field(default_factory=lambda: defaultdict(dict))  # src -> {token name: (token, dst)}
    terminals: set = field(default_factory=set)
    incorrect: set = field(default_factory=set)
    charts: list = field(default_factory=list)  # charts[t]: key -> P_t, over all candidates of step t
    beams: list = field(default_factory=list)  # beams[t]: keys kept after step t
    score_evals: int = 0
    value_evals: int = 0

    @property
    def iterations(self) -> int:
        return len(self.charts) - 1

    def edge_list(self):
        for src in sorted(self.edges):
            for name in sorted(self.edges[src]):
                yield src, name, self.edges[src][name][1]

    def coreachable(self, targets=None) -> set:
        """Vertices from which some vertex in ``targets`` (default: correct terminals) is reachable."""
        targets = self.terminals if targets is None else targets
        rev = defaultdict(set)
        for src, _, dst in self.edge_list():
            rev[dst].add(src)
        good = set(targets)
        todo = list(good)
        while todo:
            k = todo.pop()
            for src in rev[k]:
                if src not in good:
                    good.add(src)
                    todo.append(src)
        return good

    def dumps(self) -> str:
        lines = []
        for t, chart in enumerate(self.charts):
            for k in sorted(chart):
                lines.append(f"vertex {k.hex()} {t} {float(chart[k])!r}")
        for t, beam in enumerate(self.beams):
            for k in beam:
                lines.append(f"beam {t} {k.hex()}")
        for src, name, dst in self.edge_list():
            lines.append(f"edge {src.hex()} {name} {dst.hex()}")
        for k in sorted(self.terminals):
            lines.append(f"terminal {k.hex()}")
        return "\n".join(lines) + "\n"


def loads_graph(text: str) -> ExecutionGraph:
    """Inverse of :meth:`ExecutionGraph.dumps`; vertices hold keys instead of states."""
    charts: dict = defaultdict(dict)
    beams: dict = defaultdict(list)
    g = None
    edges = []
    terminals = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        kind = parts[0]
        try:
            if kind == "vertex":
                k, t, p = bytes.fromhex(parts[1]), int(parts[2]), float(parts[3])
                charts[t][k] = p
                if t == 0:
                    g = ExecutionGraph(root=k)
            elif kind == "beam":
                beams[int(parts[1])].append(bytes.fromhex(parts[2]))
            elif kind == "edge":
                edges.append((bytes.fromhex(parts[1]), parts[2], bytes.fromhex(parts[3])))
            elif kind == "terminal":
                terminals.add(bytes.fromhex(parts[1]))
            else:
                raise ValueError(f"unknown record {kind!r}")
        except (IndexError, ValueError) as err:
            raise ValueError(f"graph line {lineno}: {err}") from None
    if g is None:
        raise ValueError("graph has no root vertex")
    g.charts = [charts[t] for t in range(max(charts) + 1)]
    g.beams = [beams[t] for t in range(len(g.charts))]
    for src, name, dst in edges:
        g.edges[src][name] = (name, dst)
        g.vertices.setdefault(src, src)
        g.vertices.setdefault(dst, dst)
    g.vertices.setdefault(g.root, g.root)
    g.terminals = terminals
    charted = {k for c in g.charts for k in c}
    g.incorrect = {dst for _, _, dst in edges if dst not in charted and dst not in terminals}
    return g


def ac_score(actor_mass: float, value: float) -> float:
    return actor_mass + value


def update_dp_chart(problem, actor, beam: list, prev_chart: dict, graph: ExecutionGraph | None = None):
    """Expand every beam state by every valid token.

    Returns ``(chart, candidates)``: accumulated prefix mass per reached
    non-terminal state key, and the states themselves.  Terminal states are
    recorded on ``graph`` (correct ones in ``terminals``) instead of the chart.
    """
    chart: dict = {}
    cand: dict = {}
    if not beam:
        return chart, cand
    dists = actor.distributions(problem, beam)
    for s, dist in zip(beam, dists):
        mass = prev_chart[problem.key(s)]
        src = problem.key(s)
        for (tok, s2), p in zip(problem.successors(s), dist):
            k2 = problem.key(s2)
            if graph is not None:
                graph.score_evals += 1
                graph.edges[src][_name(tok)] = (tok, k2)
                graph.vertices.setdefault(k2, s2)
            if problem.is_done(s2):
                if graph is not None:
                    (graph.terminals if problem.is_correct(s2) else graph.incorrect).add(k2)
                continue
            chart[k2] = chart.get(k2, 0.0) + mass * p
            cand[k2] = s2
    return chart, cand


def vbsix(problem, actor, K: int, K0: int, L: int, critic=None, value_enabled=None,
          epsilon: float = 0.0, rng=None) -> ExecutionGraph:
    """Value-based beam search in execution space.

    Each iteration expands the beam through :func:`update_dp_chart`, then
    keeps the top ``K0`` candidates by actor mass and re-ranks those by
    actor mass plus critic value, keeping ``K``.  The critic term only applies
    to states whose utterance index satisfies ``value_enabled``; without a
    critic (or with no enabled candidate) ranking is plain top-``K`` by mass.
    Ties break on ascending state key.
    """
    if K > K0:
        raise ValueError("need K <= K0")
    root = problem.root
    rk = problem.key(root)
    g = ExecutionGraph(root=rk)
    g.vertices[rk] = root
    g.charts.append({rk: 1.0})
    g.beams.append([rk])
    beam = [root]
    prev = {rk: 1.0}
    for _ in range(L):
        chart, cand = update_dp_chart(problem, actor, beam, prev, g)
        g.charts.append(chart)
        ranked = sorted(chart, key=lambda k: (-chart[k], k))
        enabled = []
        if critic is not None:
            enabled = [k for k in ranked[:K0]
                       if value_enabled is None or value_enabled(problem.utterance_index(cand[k]))]
        if enabled:
            pre = ranked[:K0]
            vals = dict(zip(enabled, critic.values(problem, [cand[k] for k in enabled])))
            g.value_evals += len(enabled)
            score = {k: ac_score(chart[k], float(vals.get(k, 0.0))) for k in pre}
            ranked = sorted(pre, key=lambda k: (-score[k], k))
        kept = _select(ranked, K, epsilon, rng)
        g.beams.append(kept)
        beam = [cand[k] for k in kept]
        prev = {k: chart[k] for k in kept}
        if not beam:
            break
    return g


def extract_programs(graph: ExecutionGraph, problem, actor, program_beam: int, L: int | None = None) -> list[Program]:
    """Most probable root-to-terminal paths of ``graph`` by beam search.

    The search only follows edges into vertices that can still reach a
    correct terminal.  Returns at most ``program_beam`` programs, best first.
    """
    if not graph.terminals:
        return []
    good = graph.coreachable()
    if graph.root not in good:
        return []
    L = L if L is not None else graph.iterations
    beam = [(0.0, (), (), graph.vertices[graph.root])]
    results = []
    for _ in range(L):
        dists = actor.distributions(problem, [b[3] for b in beam])
        cands = []
        for (lp, toks, lps, s), dist in zip(beam, dists):
            out = graph.edges.get(problem.key(s), {})
            for (tok, s2), p in zip(problem.successors(s), dist):
                hit = out.get(_name(tok))
                if hit is None or hit[1] not in good or p <= 0:
                    continue
                lt = math.log(p)
                cands.append((lp + lt, toks + (tok,), lps + (lt,), s2))
        if not cands:
            break
        cands.sort(key=lambda c: (-c[0], tuple(_name(t) for t in c[1])))
        beam = []
        for c in cands[:program_beam]:
            if problem.key(c[3]) in graph.terminals:
                results.append(Program(c[1], c[2], 1))
            elif not problem.is_done(c[3]):
                beam.append(c)
        if not beam:
            break
    results.sort(key=lambda p: (-p.logp, p.text))
    return results[:program_beam]


def best_paths(graph: ExecutionGraph, problem, actor, targets) -> dict:
    """Highest-probability path in ``graph`` from the root to each target key.

    Dijkstra on ``-log p`` with ties broken by state key.
    """
    targets = set(targets)
    if not targets:
        return {}
    expanded = [graph.vertices[k] for k in sorted(graph.edges)]
    dists = dict(zip((problem.key(s) for s in expanded), actor.distributions(problem, expanded)))
    cost = {graph.root: 0.0}
    back = {}
    heap = [(0.0, graph.root)]
    done = set()
    while heap:
        c, k = heapq.heappop(heap)
        if k in done:
            continue
        done.add(k)
        if targets <= done:
            break
        if k not in graph.edges:
            continue
        s = graph.vertices[k]
        out = graph.edges[k]
        for (tok, s2), p in zip(problem.successors(s), dists[k]):
            hit = out.get(_name(tok))
            if hit is None or p <= 0:
                continue
            k2 = hit[1]
            c2 = c - math.log(p)
            if c2 < cost.get(k2, math.inf):
                cost[k2] = c2
                back[k2] = (k, tok, math.log(p))
                heapq.heappush(heap, (c2, k2))
    paths = {}
    for t in targets:
        if t not in back:
            continue
        toks, lps = [], []
        k = t
        while k != graph.root:
            k, tok, lp = back[k]
            toks.append(tok)
            lps.append(lp)
        paths[t] = Program(tuple(reversed(toks)), tuple(reversed(lps)), int(t in graph.terminals))
    return paths


# -- brute-force oracles ---------------------------------------------------------------


def enumerate_all_programs(problem, actor, L: int, budget: int = 100_000) -> list[Program]:
    """Every complete program of at most ``L`` tokens, with exact log-probabilities."""
    out = []
    visited = 0
    todo = [((), (), problem.root)]
    while todo:
        toks, lps, s = todo.pop()
        visited += 1
        if visited > budget:
            raise BudgetExceeded(f"more than {budget} prefixes")
        if problem.is_done(s):
            out.append(Program(toks, lps, int(problem.is_correct(s))))
            continue
        if len(toks) == L:
            continue
        succ = problem.successors(s)
        if not succ:
            continue
        dist = actor.distributions(problem, [s])[0]
        for (tok, s2), p in zip(succ, dist):
            todo.append((toks + (tok,), lps + (math.log(p),), s2))
    out.sort(key=lambda p: (-p.logp, p.text))
    return out


def exact_prefix_mass(problem, actor, L: int, budget: int = 100_000) -> list[dict]:
    """``mass[t][key]``: total probability of all length-``t`` prefixes reaching a non-terminal state."""
    mass = [{problem.key(problem.root): 1.0}]
    frontier = [(problem.root, 1.0)]
    visited = 0
    for _ in range(L):
        nxt = []
        layer: dict = {}
        for s, p in frontier:
            succ = problem.successors(s)
            if not succ:
                continue
            dist = actor.distributions(problem, [s])[0]
            for (tok, s2), q in zip(succ, dist):
                visited += 1
                if visited > budget:
                    raise BudgetExceeded(f"more than {budget} prefixes")
                if problem.is_done(s2):
                    continue
                k = problem.key(s2)
                layer[k] = layer.get(k, 0.0) + p * q
                nxt.append((s2, p * q))
        mass.append(layer)
        frontier = nxt
    return mass


class ExactCritic:
    """Critic returning exact expected reward by exhaustive look-ahead (toy problems only)."""

    def __init__(self, horizon: int, actor, budget: int = 100_000):
        self.horizon = horizon
        self.actor = actor
        self.budget = budget
        self._memo: dict = {}

    def _value(self, problem, s, left):
        k = (problem.key(s), left)
        if k in self._memo:
            return self._memo[k]
        if problem.is_done(s):
            v = float(problem.is_correct(s))
        elif left == 0:
            v = 0.0
        else:
            succ = problem.successors(s)
            v = 0.0
            if succ:
                dist = self.actor.distributions(problem, [s])[0]
                v = float(sum(q * self._value(problem, s2, left - 1) for (_, s2), q in zip(succ, dist)))
        self._memo[k] = v
        return v

    def values(self, problem, states) -> np.ndarray:
        return np.array([self._value(problem, s, self.horizon) for s in states])
