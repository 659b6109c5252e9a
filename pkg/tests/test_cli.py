import os

import pytest

from execsearch.cli import main
from execsearch.evaluation import read_csv
from execsearch.search import loads_graph

FAST = ["--set", "hidden=16", "--set", "embedding=8", "--set", "ff=16", "--set", "value_hidden=16",
        "--beam", "4", "--k0", "8", "--batch-size", "2"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["generate", "--domain", "alchemy", "--n", "6", "--utterances", "3", "--seed", "1",
                 "--out", str(d / "data.tsv"), "--programs", str(d / "gold.tsv")]) == 0
    return d


@pytest.fixture(scope="module")
def trained(workdir):
    out = workdir / "run"
    rc = main(["train", "--domain", "alchemy", "--data", str(workdir / "data.tsv"), "--steps", "6",
               "--truncations", "1,3", "--value-start", "3", "--out", str(out)] + FAST)
    assert rc == 0
    return out


def test_generate_writes_data_and_programs(workdir):
    lines = (workdir / "data.tsv").read_text().splitlines()
    assert len(lines) == 6 and all(len(l.split("\t")) == 8 for l in lines)
    gold = (workdir / "gold.tsv").read_text().splitlines()
    assert [g.split("\t")[0] for g in gold] == [l.split("\t")[0] for l in lines]


def test_train_outputs(trained):
    assert {"config.txt", "metrics.csv", "value_dev.csv", "final.ckpt"} <= set(os.listdir(trained))
    header, rows, _ = read_csv(str(trained / "metrics.csv"))
    assert header[:3] == ["step", "example_hit", "hit_accuracy_ema"] and len(rows) == 6
    cfg = (trained / "config.txt").read_text()
    assert "K = 4" in cfg and "training_steps = 6" in cfg


def test_eval_prints_accuracy_per_cutoff(trained, workdir, capsys):
    rc = main(["eval", "--domain", "alchemy", "--data", str(workdir / "data.tsv"), "--checkpoint",
               str(trained / "final.ckpt"), "--cutoff", "1", "--cutoff", "3", "--k-test", "4",
               "--out", str(workdir / "ev")])
    assert rc == 0
    out = capsys.readouterr().out
    assert "cutoff=1 accuracy=" in out and "cutoff=3 accuracy=" in out and "/6)" in out
    header, rows, _ = read_csv(str(workdir / "ev" / "eval.csv"))
    assert header[0] == "cutoff" and [r[0] for r in rows] == ["1", "3"]


def test_search_dumps_a_loadable_graph(trained, workdir, capsys):
    dump = workdir / "g.txt"
    rc = main(["search", "--domain", "alchemy", "--data", str(workdir / "data.tsv"), "--checkpoint",
               str(trained / "final.ckpt"), "--example-id", "syn0", "--cutoff", "1", "--dump-graph", str(dump)]
              + FAST[8:12])
    assert rc == 0
    g = loads_graph(dump.read_text())
    assert g.root in g.vertices or g.charts
    assert main(["search", "--domain", "alchemy", "--data", str(workdir / "data.tsv"), "--checkpoint",
                 str(trained / "final.ckpt"), "--example-id", "syn0", "--method", "beam", "--cutoff", "1"]) == 0
    assert "\t" in capsys.readouterr().out


def test_analyze_writes_reports(trained, workdir):
    out = workdir / "an"
    rc = main(["analyze", "--domain", "alchemy", "--data", str(workdir / "data.tsv"), "--checkpoint",
               str(trained / "final.ckpt"), "--sample-budget", "3", "--out", str(out), "--truncations", "1"]
              + FAST[8:12])
    assert rc == 0
    header, rows, comments = read_csv(str(out / "space_stats.csv"))
    assert "paths_in_beam" in header and rows
    assert any("5892" in c for c in comments)
    header, rows, _ = read_csv(str(out / "value_dev.csv"))
    assert header[0] == "step" and rows


def test_precedence_default_file_flag(workdir, capsys):
    cfg = workdir / "c.txt"
    cfg.write_text("# comment\nK = 4\nK0 = 16\nlearning_rate = 0.01\n")
    rc = main(["train", "--domain", "alchemy", "--data", str(workdir / "data.tsv"), "--config", str(cfg),
               "--k0", "8", "--steps", "1", "--truncations", "1", "--out", str(workdir / "p")] + FAST[:8])
    assert rc == 0
    err = capsys.readouterr().err
    assert "config K = 4 [file]" in err
    assert "config K0 = 8 [flag]" in err
    assert "config learning_rate = 0.01 [file]" in err
    assert "config program_beam = 8 [default]" in err


def test_defaults_echo(workdir, capsys):
    # one step is enough to see the resolved defaults
    rc = main(["train", "--domain", "alchemy", "--data", str(workdir / "data.tsv"), "--steps", "1",
               "--batch-size", "1", "--truncations", "1", "--out", str(workdir / "d")])
    assert rc == 0
    err = capsys.readouterr().err
    for line in ("config K = 32 [default]", "config K0 = 128 [default]", "config epsilon = 0.15 [default]",
                 "config value_ranking_start_step = 5000 [default]", "config learning_rate = 0.001 [default]"):
        assert line in err


def test_same_seed_same_metrics(workdir):
    runs = []
    for name in ("s1", "s2"):
        assert main(["train", "--domain", "alchemy", "--data", str(workdir / "data.tsv"), "--steps", "4",
                     "--truncations", "1", "--seed", "3", "--out", str(workdir / name)] + FAST) == 0
        runs.append((workdir / name / "metrics.csv").read_bytes())
    assert runs[0] == runs[1]


@pytest.mark.parametrize("argv,code,kind", [
    ([], 1, "usage"),
    (["frobnicate"], 1, "usage"),
    (["train", "--domain", "alchemy", "--data", "/nonexistent/x.tsv", "--out", "o"], 2, "data"),
    (["train", "--domain", "alchemy", "--algo", "ppo"], 1, "usage"),
])
def test_exit_codes(argv, code, kind, capsys):
    assert main(argv) == code
    err = capsys.readouterr().err.strip().splitlines()
    assert err[-1].startswith(f"error: {kind}:")


def test_data_errors_exit_two(workdir, capsys):
    bad = workdir / "bad.tsv"
    bad.write_text("x\t1:gg 2:_ 3:rrq 4:_ 5:_ 6:_ 7:o\tdrain\t1:g 2:_ 3:_ 4:_ 5:_ 6:_ 7:_\n")
    assert main(["train", "--domain", "alchemy", "--data", str(bad), "--steps", "1", "--out",
                 str(workdir / "b")]) == 2
    assert "line 1, column" in capsys.readouterr().err
    rc = main(["search", "--domain", "alchemy", "--data", str(workdir / "data.tsv"), "--checkpoint",
               str(workdir / "run" / "final.ckpt"), "--example-id", "missing"])
    assert rc == 2


def test_unknown_setting_is_a_usage_error(workdir, capsys):
    rc = main(["train", "--domain", "alchemy", "--data", str(workdir / "data.tsv"), "--set", "nope=3",
               "--out", str(workdir / "n")])
    assert rc == 1 and "nope" in capsys.readouterr().err
