"""Small hand-built problems and actors shared by the tests."""
from __future__ import annotations

import zlib

import numpy as np

from execsearch.mdp import SconeProblem
from execsearch.scone import Example, execute_program, parse_tokens, parse_world


class UniformActor:
    def distributions(self, problem, states):
        out = []
        for s in states:
            n = len(problem.successors(s))
            out.append(np.full(n, 1.0 / n) if n else np.zeros(0))
        return out


class TableActor:
    """Policy proportional to ``weight(state, token_name)`` over the valid successors."""

    def __init__(self, weight):
        self.weight = weight

    def distributions(self, problem, states):
        out = []
        for s in states:
            w = np.array([self.weight(s, t if isinstance(t, str) else t.name) for t, _ in problem.successors(s)],
                         dtype=float)
            out.append(w / w.sum() if len(w) else w)
        return out


class RandomActor:
    """Fixed random positive distribution per state key (seeded), independent of call order."""

    def __init__(self, seed=0):
        self.seed = seed

    def distributions(self, problem, states):
        out = []
        for s in states:
            n = len(problem.successors(s))
            rng = np.random.default_rng([self.seed, zlib.crc32(problem.key(s))])
            w = rng.uniform(0.05, 1.0, size=n)
            out.append(w / w.sum())
        return out


def example(domain, w0, targets_or_progs, m=None, utterances=None, ex_id="toy"):
    """Example whose target is given as a world string or as the program that reaches it."""
    m = m or 1
    world0 = parse_world(w0, domain)
    if isinstance(targets_or_progs, str) and ":" in targets_or_progs.split()[0]:
        target = parse_world(targets_or_progs, domain)
    else:
        target = execute_program(world0, m, parse_tokens(domain, targets_or_progs))
    return Example(ex_id, world0, tuple(utterances or ["u"] * m), target)


class ChainProblem:
    """Tiny explicit graph: ``edges[s] = [(token, t), ...]``; ``done`` and ``good`` terminal sets."""

    def __init__(self, edges, done, good, root="r"):
        self.edges, self.done, self.good, self.root = edges, set(done), set(good), root

    def successors(self, s):
        return self.edges.get(s, [])

    def key(self, s):
        return s.encode()

    def is_done(self, s):
        return s in self.done

    def is_correct(self, s):
        return s in self.good

    def utterance_index(self, s):
        return 1

    def replay(self, tokens):
        states = [self.root]
        for tok in tokens:
            states.append(dict(self.edges[states[-1]])[tok])
        return states


class DictActor:
    def __init__(self, probs):
        self.probs = probs

    def distributions(self, problem, states):
        return [np.array([self.probs[(s, t)] for t, _ in problem.successors(s)]) for s in states]


# -- layered merging construction -------------------------------------------------------


class LayeredProblem:
    """Root fans out to ``widths[0]`` states; every state of layer t links to every
    state of layer t+1.  States after the last layer are terminal (index 0 correct)."""

    def __init__(self, widths):
        self.widths = list(widths)
        self.root = (0, 0)

    def successors(self, s):
        t, _ = s
        if t > len(self.widths):
            return []
        n = self.widths[t] if t < len(self.widths) else 2
        return [(f"a{j}", (t + 1, j)) for j in range(n)]

    def key(self, s):
        return b"%03d:%03d" % s

    def is_done(self, s):
        return s[0] == len(self.widths) + 1

    def is_correct(self, s):
        return self.is_done(s) and s[1] == 0

    def utterance_index(self, s):
        return 1


class LayeredActor:
    def __init__(self, problem, seed=0):
        rng = np.random.default_rng(seed)
        self.table = {}
        sizes = [1] + problem.widths
        for t, n in enumerate(sizes):
            m = problem.widths[t] if t < len(problem.widths) else 2
            for i in range(n):
                w = rng.uniform(0.1, 1.0, size=m)
                self.table[(t, i)] = w / w.sum()

    def distributions(self, problem, states):
        return [self.table[s] for s in states]

    def exact_layer_mass(self, problem):
        """Exact prefix mass per layer by repeated vector-matrix products."""
        p = np.array([1.0])
        out = [p]
        sizes = [1] + problem.widths
        for t in range(len(problem.widths)):
            T = np.stack([self.table[(t, i)] for i in range(sizes[t])])
            p = p @ T
            out.append(p)
        return out


# -- the rescue construction (Scene) --------------------------------------------------

RESCUE_WORLD = "1:__ 2:__ 3:ry 4:__ 5:bg 6:__ 7:__ 8:go 9:__ 10:__"
RESCUE_GOLD = "3 1 move"
RESCUE_L = 4
RESCUE_K = 4


def rescue_case(seed):
    """Scene example where the correct first token is ranked K+1 by the actor.

    At the empty stack four far-away decoy positions get high weight and the
    gold token ``3`` the next highest; from then on the actor is confident
    about the gold continuation.  Within ``RESCUE_L`` tokens no decoy prefix
    can reach the target, so plain beam search with ``K`` slots has no hit.
    The person at 3 wears a red shirt and a yellow hat, so ``yellow hasHat``
    and ``red hasShirt`` both reach the same state as ``3``.
    """
    rng = np.random.default_rng(seed)
    decoys = [str(p) for p in sorted(rng.choice([6, 7, 9, 10, 8], size=RESCUE_K, replace=False))]
    decoy_w = rng.uniform(15, 25, size=RESCUE_K)
    gold_w = float(rng.uniform(2, 4))
    sure = float(rng.uniform(30, 60))
    ex = example("scene", RESCUE_WORLD, RESCUE_GOLD, m=1, ex_id=f"rescue{seed}")
    root_w = dict(zip(decoys, decoy_w))
    root_w["3"] = gold_w

    def weight(s, name):
        stack = tuple(v.val for v in s.exec.stack)
        if stack == ():
            return root_w.get(name, 1.0)
        if stack == (3,) and name == "1":
            return sure
        if stack == (3, 1) and name == "move":
            return sure
        if len(stack) == 1 and str(stack[0]) in decoys and name == "leave":
            return sure
        return 1.0

    return ex, SconeProblem(ex), TableActor(weight), decoys


# -- tangrams toys ------------------------------------------------------------------------

TANGRAMS_3 = "1:0 2:1 3:2"


def tangrams_one_utterance():
    """Three figures, one command; target = figures 1 and 2 swapped (9 complete programs)."""
    return example("tangrams", TANGRAMS_3, "1 2 swap", m=1, ex_id="tg3")


def tangrams_two_utterances():
    """Two figures, two commands; target = the initial world (33 complete programs)."""
    return example("tangrams", "1:0 2:1", "1 2 swap 1 2 swap", m=2, ex_id="tg2x2")
