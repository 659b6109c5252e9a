import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from execsearch.data import dataset_words, generate_examples
from execsearch.evaluation import (EvalReport, SpaceStats, correct_discarded, count_beam_paths, denotation_accuracy,
                                   deviation_row, exec_space_stats, hit_accuracy, read_csv, top_program,
                                   value_deviation_report, vbsix_search_fn, write_eval, write_space_stats,
                                   write_value_dev)
from execsearch.model import ModelConfig, init_params
from execsearch.scone import ExecutionError, execute_program
from execsearch.search import ExactCritic, ExecutionGraph, Program, beam_search, extract_programs, vbsix
from execsearch.training import default_config, train

from toys import RESCUE_K, RESCUE_L, rescue_case, tangrams_one_utterance, tangrams_two_utterances

SMALL = ModelConfig(embedding=8, hidden=16, world_embedding=4, ff=16, value_hidden=16)


def graph(edges, beams, charts=None, terminals=()):
    g = ExecutionGraph(b"r")
    for src, out in edges.items():
        for name, dst in out.items():
            g.edges[src.encode()][name] = (name, dst.encode())
    g.beams = [[b.encode() for b in beam] for beam in beams]
    g.charts = [{k.encode(): 1.0 for k in c} for c in (charts or beams)]
    g.terminals = {t.encode() for t in terminals}
    return g


# -- execution-space statistics


def test_paths_in_a_tree_equal_the_beam_states():
    g = graph({"r": {"x": "a", "y": "b"}, "a": {"z": "c"}}, [["r"], ["a", "b"], ["c"]])
    assert count_beam_paths(g) == (3, False)


def test_paths_through_a_merge_are_counted_per_prefix():
    g = graph({"r": {"x": "A", "y": "A"}, "A": {"z": "C"}}, [["r"], ["A"], ["C"]])
    # A is reached by two prefixes, and C inherits both
    assert count_beam_paths(g) == (4, False)


def test_paths_only_run_through_kept_states():
    g = graph({"r": {"x": "A", "y": "B"}, "A": {"z": "C"}, "B": {"z": "C"}}, [["r"], ["A"], ["C"]])
    assert count_beam_paths(g) == (2, False)


def test_path_count_is_capped():
    edges = {f"s{i}": {"x": f"s{i + 1}", "y": f"s{i + 1}"} for i in range(30)}
    edges["r"] = {"x": "s0", "y": "s0"}
    beams = [["r"]] + [[f"s{i}"] for i in range(31)]
    total, capped = count_beam_paths(graph(edges, beams), budget=1000)
    assert capped and total == 1000
    assert count_beam_paths(graph(edges, beams)) == (sum(2 ** (i + 1) for i in range(31)), False)


def test_correct_discarded_counts_pruned_coreachable_states():
    edges = {"r": {"x": "A", "y": "B", "q": "D"}, "A": {"z": "B"}, "B": {"w": "T"}}
    charts = [["r"], ["A", "B", "D"], ["B"], ["T"]]
    beams = [["r"], ["A"], ["B"], ["T"]]
    assert correct_discarded(graph(edges, beams, charts, terminals=["T"])) == 1
    assert correct_discarded(graph(edges, beams, charts)) == 0


def test_space_stats_on_real_graphs():
    ex = tangrams_two_utterances()
    params = init_params(SMALL, "tangrams", dataset_words([ex]), seed=0)
    cfg = default_config("tangrams", K=8, K0=32)
    graphs = []
    hit_accuracy(vbsix_search_fn(cfg, use_value=False, graphs=graphs), params, [ex])
    stats = exec_space_stats(graphs)
    g = graphs[0]
    assert stats.graphs == 1
    assert stats.paths_in_beam >= sum(len(b) for b in g.beams[1:])
    assert 0 <= stats.correct_discarded <= sum(len(c) for c in g.charts)
    assert exec_space_stats([]).graphs == 0


# -- value deviation


def test_deviation_row_hand_values():
    row = deviation_row(7, [(0.5, 0.9), (0.5, 0.1), (0.5, 1.0)])
    assert row[:2] == [7, 3] and row[3] == 2
    assert row[2] == pytest.approx((0.4 + 0.4 + 0.5) / 3) and row[4] == pytest.approx(0.45)
    assert deviation_row(1, [(0.3, 0.3), (1.0, 1.0)])[2] == 0.0
    assert deviation_row(1, []) == [1, 0, None, 0, None]


def test_value_deviation_report_rows():
    exs = [e for e, _ in generate_examples("tangrams", 3, 1, 0)]
    params = init_params(SMALL, "tangrams", dataset_words(exs), seed=0, value_head=True)
    cfg = default_config("tangrams", K=4, K0=16)
    rows = value_deviation_report([(0, params), (5, params)], exs, cfg, sample_budget=2)
    assert [r[0] for r in rows] == [0, 5]
    assert rows[0][1:] == rows[1][1:]
    assert rows[0][1] > 0 and 0 <= rows[0][2] <= 1


# -- hit accuracy


def test_hit_accuracy_from_search_functions():
    good = [Program(("a",), (0.0,), 1)]
    bad = [Program(("a",), (0.0,), 0)]
    assert hit_accuracy(lambda p, ex: good, None, [1, 2]) == 1.0
    assert hit_accuracy(lambda p, ex: bad, None, [1, 2]) == 0.0
    assert hit_accuracy(lambda p, ex: good if ex == 1 else [], None, [1, 2, 3, 4]) == 0.25
    assert hit_accuracy(lambda p, ex: good, None, []) == 0.0


def test_rescue_hit_vbsix_but_not_beam():
    cases = [rescue_case(seed) for seed in range(3)]

    def vb(_, i):
        ex, prob, actor, _ = cases[i]
        g = vbsix(prob, actor, RESCUE_K, 4 * RESCUE_K, RESCUE_L, ExactCritic(RESCUE_L, actor))
        return extract_programs(g, prob, actor, 8)

    def bm(_, i):
        ex, prob, actor, _ = cases[i]
        return beam_search(prob, actor, RESCUE_K, RESCUE_L)

    assert hit_accuracy(vb, None, range(3)) == 1.0
    assert hit_accuracy(bm, None, range(3)) == 0.0


@settings(max_examples=25, deadline=None)
@given(st.lists(st.lists(st.integers(0, 1), max_size=4), min_size=1, max_size=6))
def test_hit_accuracy_is_the_mean_of_per_example_hits(rewards):
    progs = [[Program((str(j),), (0.0,), r) for j, r in enumerate(rs)] for rs in rewards]
    acc = hit_accuracy(lambda p, i: progs[i], None, range(len(progs)))
    assert 0.0 <= acc <= 1.0
    assert acc == pytest.approx(np.mean([any(rs) for rs in rewards]))


# -- denotation accuracy


def test_denotation_accuracy_agrees_with_the_top_program():
    exs = [e for e, _ in generate_examples("tangrams", 6, 3, 1)]
    params = init_params(SMALL, "tangrams", dataset_words(exs), seed=0)
    rep = denotation_accuracy(params, exs, 2, K_test=4)
    manual = 0
    for ex in exs:
        cut = ex.truncate(2)
        best = top_program(params, cut, 4, 16)
        if best is None:
            continue
        try:
            manual += execute_program(cut.world0, 2, best.tokens) == cut.target
        except ExecutionError:
            pass
    assert (rep.correct, rep.count) == (manual, 6)
    assert rep.accuracy == manual / 6
    assert rep == denotation_accuracy(params, exs, 2, K_test=4)


def test_denotation_accuracy_after_overfitting_one_example():
    ex = tangrams_one_utterance()
    fresh = init_params(SMALL, "tangrams", dataset_words([ex]), seed=0)
    assert denotation_accuracy(fresh, [ex], 1, K_test=8).accuracy == 0.0
    cfg = default_config("tangrams", "mml", training_steps=60, batch_size=1, K=8, K0=8, learning_rate=0.01)
    params = train(cfg, [ex], model_config=SMALL).params
    assert denotation_accuracy(params, [ex], 1, K_test=8).accuracy == 1.0


def test_denotation_accuracy_skips_short_examples():
    exs = [e for e, _ in generate_examples("tangrams", 3, 2, 0)]
    params = init_params(SMALL, "tangrams", dataset_words(exs), seed=0)
    with pytest.raises(ValueError):
        denotation_accuracy(params, exs, 3, K_test=2)
    assert denotation_accuracy(params, exs, 1, K_test=2).count == 3


# -- CSV output


def test_csv_headers_carry_reference_values(tmp_path):
    p = tmp_path / "space_stats.csv"
    write_space_stats(str(p), "alchemy", SpaceStats(12.5, 1.0, 4))
    header, rows, comments = read_csv(str(p))
    assert header == ["domain", "graphs", "paths_in_beam", "correct_discarded", "paths_capped"]
    assert rows == [["alchemy", "4", "12.5", "1", "0"]]
    text = " ".join(comments)
    for ref in ("143903", "5892", "678", "18.5", "11.2", "3.8"):
        assert ref in text
    q = tmp_path / "value_dev.csv"
    write_value_dev(str(q), [deviation_row(3, [(0.5, 0.9)])])
    header, rows, comments = read_csv(str(q))
    assert header[:3] == ["step", "states", "mean_abs_dev"]
    assert "0.15-0.2" in " ".join(comments) and rows[0][0] == "3"
    e = tmp_path / "eval.csv"
    write_eval(str(e), [EvalReport(3, 0.5, 1, 2, 0)])
    assert read_csv(str(e))[1] == [["3", "0.5", "1", "2", "0"]]
