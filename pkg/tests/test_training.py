import math

import numpy as np
import pytest

from execsearch import training
from execsearch.data import dataset_words, generate_examples, training_examples
from execsearch.mdp import SconeProblem
from execsearch.model import ModelActor, ModelConfig, init_params, policy_loss_grad
from execsearch.scone import parse_tokens
from execsearch.search import ExactCritic, Program, enumerate_all_programs, vbsix
from execsearch.training import (Adam, TrainConfig, TrainingError, build_value_examples, collect_negatives,
                                 default_config, mml_weights, train)

from toys import ChainProblem, example, tangrams_one_utterance, tangrams_two_utterances

SMALL = ModelConfig(embedding=8, hidden=16, world_embedding=4, ff=16, value_hidden=16)


def prog(tokens, logps, r):
    return Program(tuple(tokens), tuple(math.log(p) for p in logps), r)


def toy_examples(n=16, seed=0):
    exs = [e for e, _ in generate_examples("alchemy", n, 1, seed)]
    return training_examples(exs, "alchemy", (1,))


# -- MML weights


def test_mml_single_program_gets_weight_one():
    (p, w), = mml_weights([prog("ab", [0.5, 0.2], 1)])
    assert w == 1.0


def test_mml_equal_logprobs_split_evenly():
    ws = [w for _, w in mml_weights([prog("ab", [0.5, 0.2], 1), prog("cd", [0.2, 0.5], 1)])]
    assert ws == pytest.approx([0.5, 0.5], abs=1e-12)


def test_mml_weights_are_the_posterior():
    ws = [w for _, w in mml_weights([prog("a", [0.3], 1), prog("b", [0.1], 1), prog("c", [0.6], 0)])]
    assert ws == pytest.approx([0.75, 0.25], abs=1e-12)


def test_mml_without_correct_program_is_empty():
    assert mml_weights([prog("a", [0.3], 0)]) == []
    assert mml_weights([]) == []


def test_mml_deduplicates_and_survives_tiny_logprobs():
    p = Program(("a",), (-900.0,), 1)
    q = Program(("b",), (-901.0,), 1)
    ws = dict((x.tokens, w) for x, w in mml_weights([p, p, q]))
    assert ws[("a",)] == pytest.approx(1 / (1 + math.exp(-1)), rel=1e-12)


# -- value labels


CHAIN = {"r": [("a", "x"), ("d", "dead")], "x": [("b", "y"), ("e", "dead2")], "y": [("c", "end")]}


def chain():
    return ChainProblem(CHAIN, {"end", "dead", "dead2"}, {"end"})


def test_value_labels_on_a_chain():
    labels = {s: v for s, v in build_value_examples(chain(), [prog("abc", [0.5, 0.4, 1.0], 1)])}
    assert labels == pytest.approx({"x": 0.4, "y": 1.0}, abs=1e-12)


def test_value_labels_of_incorrect_programs_are_zero():
    labels = dict(build_value_examples(chain(), [prog("ae", [0.5, 0.6], 0)]))
    assert labels == {"x": 0.0}


def test_value_labels_accumulate_over_distinct_suffixes_and_clamp():
    edges = {"r": [("a", "s"), ("b", "s")], "s": [("c", "g1"), ("d", "g2")]}
    p = ChainProblem(edges, {"g1", "g2"}, {"g1", "g2"})
    progs = [prog("ac", [0.5, 0.7], 1), prog("bc", [0.5, 0.7], 1), prog("ad", [0.5, 0.3], 1)]
    assert dict(build_value_examples(p, progs)) == pytest.approx({"s": 1.0}, abs=1e-12)
    heavy = [Program(("a", "c"), (0.0, math.log(0.9)), 1), Program(("a", "d"), (0.0, math.log(0.9)), 1)]
    assert dict(build_value_examples(p, heavy)) == {"s": 1.0}


def test_value_labels_equal_expected_reward_when_all_correct_programs_are_given():
    ex = tangrams_two_utterances()
    problem = SconeProblem(ex)
    params = init_params(SMALL, "tangrams", dataset_words([ex]), seed=3)
    actor = ModelActor(params, ex)
    progs = enumerate_all_programs(problem, actor, 16)
    good = [p for p in progs if p.reward]
    assert good
    critic = ExactCritic(16, actor)
    labeled = build_value_examples(problem, good)
    assert len(labeled) > 3
    exact = critic.values(problem, [s for s, _ in labeled])
    for (s, lab), v in zip(labeled, exact):
        assert lab == pytest.approx(v, abs=1e-9)


def test_collect_negatives_reach_the_incorrect_terminals():
    ex = tangrams_one_utterance()
    problem = SconeProblem(ex)
    params = init_params(SMALL, "tangrams", dataset_words([ex]), seed=1)
    actor = ModelActor(params, ex)
    g = vbsix(problem, actor, 16, 64, 8)
    neg = collect_negatives(g, problem, actor)
    assert len(neg) == len(g.incorrect) > 0
    ends = set()
    for z in neg:
        s = problem.replay(z.tokens)[-1]
        assert problem.is_done(s) and not problem.is_correct(s) and z.reward == 0
        ends.add(problem.key(s))
        assert z.logp == pytest.approx(sum(math.log(actor.distributions(problem, [a])[0][
            [t.name for t, _ in problem.successors(a)].index(tok.name)])
            for a, tok in zip(problem.replay(z.tokens), z.tokens)), abs=1e-9)
    assert ends == set(g.incorrect)


# -- optimizer


def test_adam_first_step_matches_hand_formula():
    params = init_params(SMALL, "tangrams", ["a"], seed=0)
    before = params.copy()
    g = params.zeros_like()
    name = next(k for k in g if k not in params.frozen)
    g[name] = np.linspace(-1, 1, g[name].size).reshape(g[name].shape)
    Adam(params, 0.01).step(g)
    expect = before.tensors[name] - 0.01 * g[name] / (np.abs(g[name]) + 1e-8)
    assert np.allclose(params.tensors[name], expect, atol=1e-12)
    for k in g:
        if k != name:
            assert np.array_equal(params.tensors[k], before.tensors[k])


def test_adam_zero_gradients_leave_params_unchanged():
    params = init_params(SMALL, "tangrams", ["a"], seed=0)
    before = params.copy()
    opt = Adam(params, 0.01)
    for _ in range(3):
        opt.step(params.zeros_like())
    for k in params.tensors:
        assert np.array_equal(params.tensors[k], before.tensors[k])


# -- configuration


def test_default_config_values():
    c = default_config("alchemy")
    assert (c.K, c.K0, c.program_beam, c.epsilon, c.learning_rate, c.batch_size) == (32, 128, 8, 0.15, 0.001, 8)
    assert (c.training_steps, c.value_ranking_start_step) == (31500, 5000)
    assert default_config("scene").training_steps == 22500
    assert default_config("tangrams").value_ranking_start_step == 10000
    assert default_config("tangrams", "reinforce").epsilon == 0.2
    assert default_config("scene", "reinforce").baseline == 1e-5


@pytest.mark.parametrize("bad", [dict(K=200), dict(epsilon=1.5), dict(algorithm="ppo"), dict(batch_size=0),
                                 dict(learning_rate=0.0), dict(baseline=-1.0)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


def tiny(algo, steps=10, **kw):
    base = dict(training_steps=steps, batch_size=2, K=8, K0=16, program_beam=4, value_ranking_start_step=steps // 2,
                sample_size=4, seed=0)
    base.update(kw)
    return default_config("alchemy", algo, **base)


# -- training loops


def test_vbsix_training_smoke():
    res = train(tiny("vbsix", 50), toy_examples(), model_config=SMALL)
    assert len(res.metrics) == 50
    assert all(math.isfinite(r[3]) and math.isfinite(r[4]) for r in res.metrics)
    ema = [r[2] for r in res.metrics]
    assert any(ema[i + 10] >= ema[i] for i in range(40))
    assert len(res.value_dev) == 50


def test_training_is_deterministic_for_a_seed(tmp_path):
    paths = []
    for run in "ab":
        path = tmp_path / f"{run}.csv"
        train(tiny("vbsix", 8), toy_examples(), model_config=SMALL, metrics_path=str(path))
        paths.append(path.read_bytes())
    assert paths[0] == paths[1]
    other = tmp_path / "c.csv"
    train(tiny("vbsix", 8, seed=1), toy_examples(), model_config=SMALL, metrics_path=str(other))
    assert other.read_bytes() != paths[0]


def unreachable():
    return [example("tangrams", "1:0 2:1 3:2", "1:3 2:4", ex_id="far")]


@pytest.mark.parametrize("algo", ["mml", "vbsix", "reinforce"])
def test_examples_without_reward_leave_the_policy_unchanged(algo):
    cfg = replace_domain(tiny(algo, 4, baseline=0.0))
    t = training.Trainer(cfg, unreachable(), model_config=SMALL)
    before = t.params.copy()
    res = t.run()
    assert all(r[1] == 0 for r in res.metrics)
    # under vbsix the critic still fits its zero labels through the shared input layer
    owned = ("pol_",) if algo == "vbsix" else ("",)
    keys = [k for k in before.tensors if k.startswith(owned) and not k.startswith("val_")]
    assert keys
    for k in keys:
        assert np.array_equal(before.tensors[k], res.params.tensors[k]), k


def replace_domain(cfg):
    from dataclasses import replace
    return replace(cfg, domain="tangrams")


def test_reinforce_gradient_is_the_reward_minus_baseline_weighted_sum():
    ex = tangrams_two_utterances()
    problem = SconeProblem(ex)
    params = init_params(SMALL, "tangrams", dataset_words([ex]), seed=2)
    samples = [(parse_tokens("tangrams", t), r) for t, r in
               [("1 2 swap 1 2 swap", 1), ("1 remove 1 remove", 0), ("2 1 swap 2 1 swap", 1)]]
    b = 0.01
    _, combined = policy_loss_grad(params, ex, [(t, r - b) for t, r in samples], problem)
    total = params.zeros_like()
    for t, r in samples:
        _, g = policy_loss_grad(params, ex, [(t, 1.0)], problem)
        for k in total:
            total[k] += (r - b) * g[k]
    for k in total:
        assert np.allclose(total[k], combined[k], atol=1e-12)


def test_reinforce_training_smoke():
    res = train(tiny("reinforce", 6), toy_examples(8), model_config=SMALL)
    assert len(res.metrics) == 6


def test_expert_mml_runs_both_phases(tmp_path):
    res = train(tiny("expert_mml", 5), toy_examples(8), model_config=SMALL, out_dir=str(tmp_path))
    assert len(res.metrics) == 10
    assert res.expert is not None and res.expert.tensors["pol_q_W"].shape[0] > res.params.tensors["pol_q_W"].shape[0]
    assert (tmp_path / "expert.ckpt").exists() and (tmp_path / "final.ckpt").exists()


def test_non_finite_loss_raises(monkeypatch):
    real = training.policy_loss_grad

    def broken(*a, **kw):
        loss, g = real(*a, **kw)
        return float("nan"), g

    monkeypatch.setattr(training, "policy_loss_grad", broken)
    with pytest.raises(TrainingError, match="non-finite"):
        train(tiny("mml", 20), toy_examples(8), model_config=SMALL)


def test_empty_training_set_is_rejected():
    with pytest.raises(ValueError):
        training.Trainer(tiny("mml"), [])
