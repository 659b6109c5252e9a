"""Accuracy, hit accuracy, execution-space statistics and value-deviation reports."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .mdp import SconeProblem
from .model import ModelActor, ModelCritic
from .scone import ExecutionError, execute_program
from .search import beam_search
from .training import (HIGH_REWARD, VALUE_DEV_HEADER, TrainConfig, build_value_examples, collect_negatives,
                       run_beam, run_vbsix)

# full-scale reference values, reported in headers for context only
REFERENCE_PATHS_IN_BEAM = {"scene": 143903, "alchemy": 5892, "tangrams": 678}
REFERENCE_CORRECT_DISCARDED = {"scene": 18.5, "alchemy": 11.2, "tangrams": 3.8}
REFERENCE_VALUE_DEV = "0.15-0.2 overall, ~0.3 on states with expected reward > 0.7"
DEFAULT_PATH_BUDGET = 10 ** 12


@dataclass
class EvalReport:
    cutoff: int
    accuracy: float
    correct: int
    count: int
    seed: int = 0
    config: dict = field(default_factory=dict)


def top_program(params, ex, K: int, L: int, problem=None):
    problem = problem or SconeProblem(ex)
    progs = beam_search(problem, ModelActor(params, ex), K, L)
    if not progs:
        return None
    return min(progs, key=lambda p: (-p.logp, p.text))


def denotation_accuracy(params, examples, cutoff: int, K_test: int = 32, max_tokens_per_command: int = 8,
                        seed: int = 0, config: dict | None = None) -> EvalReport:
    """Fraction of examples whose top beam program, run on the first ``cutoff`` utterances, hits the recorded world."""
    correct = count = 0
    for ex in examples:
        if ex.m < cutoff:
            continue
        cut = ex.truncate(cutoff)
        count += 1
        best = top_program(params, cut, K_test, cut.m * max_tokens_per_command)
        if best is None:
            continue
        try:
            ok = execute_program(cut.world0, cut.m, best.tokens) == cut.target
        except ExecutionError:
            ok = False
        correct += ok
    if count == 0:
        raise ValueError(f"no example has {cutoff} utterances")
    return EvalReport(cutoff, correct / count, correct, count, seed, dict(config or {}))


def hit_accuracy(search_fn, params, examples) -> float:
    """``search_fn(params, ex)`` returns programs (or an object with ``positives``)."""
    hits = 0
    n = 0
    for ex in examples:
        out = search_fn(params, ex)
        progs = getattr(out, "positives", out)
        hits += any(p.reward for p in progs)
        n += 1
    return hits / n if n else 0.0


def vbsix_search_fn(config: TrainConfig, use_value: bool = True, graphs: list | None = None):
    """Search function for :func:`hit_accuracy`; ``graphs`` (if given) collects the execution graphs."""
    def fn(params, ex):
        out, _ = run_vbsix(config, params, ex, SconeProblem(ex), use_value, 0.0, None)
        if graphs is not None:
            graphs.append(out.graph)
        return out
    return fn


def beam_search_fn(config: TrainConfig):
    def fn(params, ex):
        return run_beam(config, params, ex, SconeProblem(ex), 0.0, None)[0]
    return fn


@dataclass
class SpaceStats:
    paths_in_beam: float
    correct_discarded: float
    graphs: int
    capped: bool = False


def count_beam_paths(graph, budget: int = DEFAULT_PATH_BUDGET) -> tuple[int, bool]:
    """Distinct root-to-beam-state prefixes, summed over every iteration's beam.

    Counts run over edges from beam ``t-1`` into beam ``t``, so a state kept
    at ``t`` counts each way it was reached through kept states.
    """
    counts = {graph.root: 1}
    total = 0
    capped = False
    for t in range(1, len(graph.beams)):
        nxt = {k: 0 for k in graph.beams[t]}
        for src, n in counts.items():
            for _, dst in graph.edges.get(src, {}).values():
                if dst in nxt:
                    nxt[dst] += n
        for k in nxt:
            if nxt[k] > budget:
                nxt[k] = budget
                capped = True
        counts = nxt
        total += sum(nxt.values())
        if total > budget:
            return budget, True
    return total, capped


def correct_discarded(graph) -> int:
    """States that can reach a correct terminal but were pruned from the beam at some iteration."""
    if not graph.terminals:
        return 0
    good = graph.coreachable()
    dropped = set()
    for t in range(1, len(graph.charts)):
        kept = set(graph.beams[t]) if t < len(graph.beams) else set()
        dropped |= {k for k in graph.charts[t] if k not in kept and k in good}
    return len(dropped)


def exec_space_stats(graphs, budget: int = DEFAULT_PATH_BUDGET) -> SpaceStats:
    if not graphs:
        return SpaceStats(0.0, 0.0, 0)
    paths, capped, disc = [], False, []
    for g in graphs:
        n, c = count_beam_paths(g, budget)
        paths.append(n)
        capped = capped or c
        disc.append(correct_discarded(g))
    return SpaceStats(float(np.mean(paths)), float(np.mean(disc)), len(graphs), capped)


def deviation_row(step: int, pairs) -> list:
    """``pairs`` of (critic value, estimated expected reward) -> one value-deviation CSV row."""
    devs = [abs(v - e) for v, e in pairs]
    high = [abs(v - e) for v, e in pairs if e > HIGH_REWARD]
    return [step, len(devs), float(np.mean(devs)) if devs else None, len(high),
            float(np.mean(high)) if high else None]


def value_deviation_report(checkpoints, examples, config: TrainConfig, sample_budget: int = 50) -> list:
    """Per checkpoint ``(step, params)``: mean |V - E| on states labeled from the discovered paths."""
    rows = []
    for step, params in checkpoints:
        pairs = []
        for ex in examples[:sample_budget]:
            problem = SconeProblem(ex)
            out, actor = run_vbsix(config, params, ex, problem, True, 0.0, None)
            dv = build_value_examples(problem, out.positives + collect_negatives(out.graph, problem, actor))
            if not dv:
                continue
            vals = ModelCritic(params, ex).values(problem, [s for s, _ in dv])
            pairs += [(float(v), lab) for (_, lab), v in zip(dv, vals)]
        rows.append(deviation_row(step, pairs))
    return rows


# -- CSV output ------------------------------------------------------------------


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, float):
        return f"{x:.10g}"
    return str(x)


def write_csv(path: str, header, rows, comments=()) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        for c in comments:
            fh.write(f"# {c}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(x) for x in r])


def read_csv(path: str) -> tuple[list[str], list[list[str]], list[str]]:
    """(header, rows, comment lines) of a file written by :func:`write_csv`."""
    comments, lines = [], []
    with open(path, newline="") as fh:
        for line in fh:
            if line.startswith("#"):
                comments.append(line[1:].strip())
            else:
                lines.append(line)
    rows = list(csv.reader(lines))
    return rows[0], rows[1:], comments


def write_space_stats(path: str, domain: str, stats: SpaceStats) -> None:
    write_csv(path, ["domain", "graphs", "paths_in_beam", "correct_discarded", "paths_capped"],
              [[domain, stats.graphs, stats.paths_in_beam, stats.correct_discarded, int(stats.capped)]],
              [f"reference full-scale paths_in_beam: scene {REFERENCE_PATHS_IN_BEAM['scene']}, "
               f"alchemy {REFERENCE_PATHS_IN_BEAM['alchemy']}, tangrams {REFERENCE_PATHS_IN_BEAM['tangrams']}",
               f"reference full-scale correct_discarded: scene {REFERENCE_CORRECT_DISCARDED['scene']}, "
               f"alchemy {REFERENCE_CORRECT_DISCARDED['alchemy']}, tangrams {REFERENCE_CORRECT_DISCARDED['tangrams']}",
               "paths_in_beam counts prefixes in the beam of every iteration (accumulated), averaged over graphs",
               "reference values are context from 5-utterance full-scale runs, not targets"])


def write_value_dev(path: str, rows) -> None:
    write_csv(path, VALUE_DEV_HEADER, rows,
              [f"reference full-scale converged deviation: {REFERENCE_VALUE_DEV}",
               f"high states: estimated expected reward > {HIGH_REWARD}",
               "reference values are context, not targets"])


def write_eval(path: str, reports) -> None:
    write_csv(path, ["cutoff", "accuracy", "correct", "count", "seed"],
              [[r.cutoff, r.accuracy, r.correct, r.count, r.seed] for r in reports])
