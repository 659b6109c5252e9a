"""Actor-critic training with VBSiX, and the MML, REINFORCE and expert-MML baselines."""
from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .data import dataset_words
from .mdp import SconeProblem
from .model import (ModelActor, ModelConfig, ModelCritic, ParameterSet, init_params, policy_loss_grad,
                    save_params, value_loss_grad)
from .search import Program, beam_search, best_paths, extract_programs, vbsix

log = logging.getLogger(__name__)

ALGORITHMS = ("vbsix", "mml", "reinforce", "expert_mml")
METRICS_HEADER = ["step", "example_hit", "hit_accuracy_ema", "policy_loss", "value_loss", "beam_correct_count"]
VALUE_DEV_HEADER = ["step", "states", "mean_abs_dev", "high_states", "mean_abs_dev_high"]
HIGH_REWARD = 0.7
EMA_DECAY = 0.99

DOMAIN_STEPS = {"scene": 22500, "alchemy": 31500, "tangrams": 40000}
VALUE_START = {"scene": 5000, "alchemy": 5000, "tangrams": 10000}
REINFORCE_BASELINE = {"scene": 1e-5, "alchemy": 1e-2, "tangrams": 1e-3}


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    domain: str = "alchemy"
    algorithm: str = "vbsix"
    training_steps: int = 31500
    learning_rate: float = 0.001
    batch_size: int = 8
    K: int = 32
    K0: int = 128
    program_beam: int = 8
    max_tokens_per_command: int = 8
    epsilon: float = 0.15
    value_ranking_start_step: int = 5000
    value_warmup_steps: int = 0  # step from which the critic is trained
    value_window: int = 2  # critic only ranks states of the last this-many utterances
    sample_size: int = 32
    baseline: float = 1e-2
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}; expected one of {ALGORITHMS}")
        for name in ("training_steps", "batch_size", "K", "K0", "program_beam", "max_tokens_per_command",
                     "sample_size", "value_window"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.epsilon <= 1:
            raise ValueError("epsilon must be in [0, 1]")
        if self.baseline < 0:
            raise ValueError("baseline must be non-negative")
        if self.K > self.K0:
            raise ValueError("K must not exceed K0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


def default_config(domain: str, algorithm: str = "vbsix", **overrides) -> TrainConfig:
    """Hyper-parameter defaults for one domain and algorithm, plus overrides."""
    cfg = dict(domain=domain, algorithm=algorithm, training_steps=DOMAIN_STEPS[domain],
               value_ranking_start_step=VALUE_START[domain], baseline=REINFORCE_BASELINE[domain],
               epsilon=0.2 if algorithm == "reinforce" else 0.15)
    cfg.update(overrides)
    return TrainConfig(**cfg)


def config_fields() -> dict:
    return {f.name: f.type for f in fields(TrainConfig)}


# -- objective pieces -------------------------------------------------------------


def mml_weights(programs) -> list[tuple[Program, float]]:
    """Normalized posterior weights q(z) over the distinct reward-1 programs."""
    seen = {}
    for p in programs:
        if p.reward and p.tokens not in seen:
            seen[p.tokens] = p
    good = list(seen.values())
    if not good:
        return []
    lps = np.array([p.logp for p in good])
    top = lps.max()
    log_z = top + math.log(np.exp(lps - top).sum())
    return [(p, float(math.exp(lp - log_z))) for p, lp in zip(good, lps)]


def build_value_examples(problem, programs) -> list[tuple]:
    """Soft labels for the states along ``programs``.

    The state after the first ``t`` tokens of ``z`` accumulates the
    probability of the remaining tokens times ``R(z)``.  A (state, suffix)
    pair is counted once even when several programs share it, so a state
    reached by two prefixes is not credited twice for the same completion.
    Finished states are skipped and labels are clamped to 1.
    """
    labels: dict = {}
    states: dict = {}
    seen = set()
    for z in programs:
        path = problem.replay(z.tokens)
        names = [t if isinstance(t, str) else t.name for t in z.tokens]
        for t in range(1, len(z.tokens)):
            s = path[t]
            if problem.is_done(s):
                continue
            k = problem.key(s)
            states.setdefault(k, s)
            labels.setdefault(k, 0.0)
            if not z.reward:
                continue
            pair = (k, tuple(names[t:]))
            if pair in seen:
                continue
            seen.add(pair)
            labels[k] += math.exp(math.fsum(z.token_logps[t:]))
    return [(states[k], min(1.0, labels[k])) for k in labels]


def collect_negatives(graph, problem, actor) -> list[Program]:
    """One highest-probability program per incorrect terminal of ``graph``."""
    paths = best_paths(graph, problem, actor, graph.incorrect)
    return [paths[k] for k in sorted(paths)]


def rescore(problem, actor, tokens) -> Program:
    """``tokens`` with per-token log-probabilities under ``actor``."""
    states = problem.replay(tokens)
    dists = actor.distributions(problem, states[:-1])
    lps = []
    for s, tok, dist in zip(states, tokens, dists):
        names = [t.name for t, _ in problem.successors(s)]
        lps.append(math.log(dist[names.index(tok.name)]))
    return Program(tuple(tokens), tuple(lps), int(problem.is_correct(states[-1])))


def sample_programs(problem, actor, n: int, L: int, epsilon: float, rng) -> list[Program]:
    """Ancestral samples; with probability ``epsilon`` a token is drawn uniformly instead."""
    out = []
    for _ in range(n):
        s = problem.root
        toks, lps = [], []
        while len(toks) < L and not problem.is_done(s):
            succ = problem.successors(s)
            if not succ:
                break
            dist = actor.distributions(problem, [s])[0]
            if rng.random() < epsilon:
                i = int(rng.integers(len(succ)))
            else:
                i = int(rng.choice(len(succ), p=dist / dist.sum()))
            toks.append(succ[i][0])
            lps.append(math.log(dist[i]))
            s = succ[i][1]
        out.append(Program(tuple(toks), tuple(lps), int(problem.is_correct(s))))
    return out


class Adam:
    def __init__(self, params: ParameterSet, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = params.zeros_like()
        self.v = params.zeros_like()

    def step(self, grads: dict) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, g in grads.items():
            if k in self.params.frozen:
                continue
            p = self.params.tensors[k]
            g = g.astype(p.dtype, copy=False)
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            p -= (self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)).astype(p.dtype)


# -- search per algorithm ----------------------------------------------------------


@dataclass
class SearchOutcome:
    positives: list  # reward-1 programs found
    samples: list = field(default_factory=list)  # reinforce samples
    graph: object = None
    value_examples: list = field(default_factory=list)

    @property
    def hit(self) -> int:
        return int(bool(self.positives))


def program_length(config: TrainConfig, ex) -> int:
    return ex.m * config.max_tokens_per_command


def value_window(config: TrainConfig, ex):
    first = ex.m - config.value_window + 1
    return lambda i: i >= first


def run_vbsix(config: TrainConfig, params, ex, problem, use_value: bool, epsilon: float, rng, actor=None):
    actor = actor or ModelActor(params, ex)
    critic = ModelCritic(params, ex) if use_value else None
    g = vbsix(problem, actor, config.K, config.K0, program_length(config, ex), critic,
              value_window(config, ex), epsilon, rng)
    pos = extract_programs(g, problem, actor, config.program_beam)
    return SearchOutcome(pos, graph=g), actor


def run_beam(config: TrainConfig, params, ex, problem, epsilon: float, rng, actor=None):
    actor = actor or ModelActor(params, ex)
    progs = beam_search(problem, actor, config.K, program_length(config, ex), epsilon, rng)
    seen = {}
    for p in progs:
        if p.reward:
            seen.setdefault(p.tokens, p)
    return SearchOutcome(list(seen.values())), actor


# -- training loop ------------------------------------------------------------------


@dataclass
class TrainResult:
    params: ParameterSet
    metrics: list
    value_dev: list
    expert: ParameterSet | None = None


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.10g}"


class Trainer:
    """Runs one algorithm over a list of training examples.

    ``metrics_path`` / ``value_dev_path`` (optional) receive CSV rows as
    training proceeds; ``out_dir`` receives checkpoints.
    """

    def __init__(self, config: TrainConfig, examples, model_config: ModelConfig | None = None,
                 params: ParameterSet | None = None, pretrained: str | None = None, out_dir: str | None = None,
                 metrics_path: str | None = None, value_dev_path: str | None = None):
        if not examples:
            raise ValueError("no training examples")
        self.config = config
        self.examples = list(examples)
        self.model_config = model_config or ModelConfig()
        self.words = dataset_words(self.examples)
        self.pretrained = pretrained
        self.params = params or init_params(self.model_config, config.domain, self.words, config.seed, pretrained,
                                            value_head=config.algorithm == "vbsix")
        self.rng = np.random.default_rng(config.seed + 7919)
        self.problems = {ex.id: SconeProblem(ex) for ex in self.examples}
        self.out_dir = out_dir
        self.metrics_path = metrics_path
        self.value_dev_path = value_dev_path
        self.metrics: list = []
        self.value_dev: list = []
        self._ema = 0.0
        self._step = 0

    # -- output

    def _open_logs(self):
        for path, header in ((self.metrics_path, METRICS_HEADER), (self.value_dev_path, VALUE_DEV_HEADER)):
            if path:
                os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
                with open(path, "w", newline="") as fh:
                    csv.writer(fh, lineterminator="\n").writerow(header)

    def _append(self, path, row):
        if path:
            with open(path, "a", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow([_fmt(x) for x in row])

    def _record(self, hits, n, policy_loss, value_loss, correct):
        self._step += 1
        self._ema = EMA_DECAY * self._ema + (1 - EMA_DECAY) * (hits / n)
        row = [self._step, hits, self._ema, policy_loss, value_loss, correct]
        self.metrics.append(row)
        self._append(self.metrics_path, row)
        if not all(math.isfinite(x) for x in (policy_loss, value_loss or 0.0)):
            raise TrainingError(f"non-finite loss at step {self._step}: policy={policy_loss} value={value_loss}")

    def _checkpoint(self, params, name):
        if self.out_dir:
            os.makedirs(self.out_dir, exist_ok=True)
            save_params(params, os.path.join(self.out_dir, name))

    def _batch(self):
        idx = self.rng.integers(len(self.examples), size=self.config.batch_size)
        return [self.examples[i] for i in idx]

    # -- algorithms

    def run(self) -> TrainResult:
        self._open_logs()
        algo = self.config.algorithm
        if algo == "expert_mml":
            return self._run_expert()
        opt = Adam(self.params, self.config.learning_rate)
        for step in range(1, self.config.training_steps + 1):
            grads = self.params.zeros_like()
            hits = correct = 0
            p_loss = 0.0
            v_loss = 0.0 if algo == "vbsix" else None
            dev_states = []
            for ex in self._batch():
                problem = self.problems[ex.id]
                if algo == "vbsix":
                    use_value = step > self.config.value_ranking_start_step
                    out, actor = run_vbsix(self.config, self.params, ex, problem, use_value,
                                           self.config.epsilon, self.rng)
                    neg = collect_negatives(out.graph, problem, actor)
                    dv = build_value_examples(problem, out.positives + neg)
                    dev_states.append((ex, dv))
                    if step > self.config.value_warmup_steps and dv:
                        # averaged per labeled state so the critic does not swamp the shared layers
                        loss, g = value_loss_grad(self.params, ex, dv)
                        v_loss += loss / len(dv)
                        _accumulate(grads, g, 1.0 / len(dv))
                    weighted = [(p.tokens, w) for p, w in mml_weights(out.positives)]
                elif algo == "mml":
                    out, _ = run_beam(self.config, self.params, ex, problem, self.config.epsilon, self.rng)
                    weighted = [(p.tokens, w) for p, w in mml_weights(out.positives)]
                else:
                    actor = ModelActor(self.params, ex)
                    samples = sample_programs(problem, actor, self.config.sample_size, program_length(self.config, ex),
                                              self.config.epsilon, self.rng)
                    out = SearchOutcome([s for s in samples if s.reward], samples)
                    weighted = [(s.tokens, s.reward - self.config.baseline) for s in samples]
                hits += out.hit
                correct += len(out.positives)
                if weighted:
                    loss, g = policy_loss_grad(self.params, ex, weighted, problem)
                    p_loss += loss
                    _accumulate(grads, g)
            if dev_states:
                self._value_dev(step, dev_states)
            opt.step(grads)
            self.params.step = step
            self._record(hits, self.config.batch_size, p_loss, v_loss, correct)
            if self.config.checkpoint_every and step % self.config.checkpoint_every == 0:
                self._checkpoint(self.params, f"step{step}.ckpt")
        self._checkpoint(self.params, "final.ckpt")
        return TrainResult(self.params, self.metrics, self.value_dev)

    def _value_dev(self, step, dev_states):
        # critic predictions taken before this step's update
        devs, high = [], []
        for ex, dv in dev_states:
            if not dv:
                continue
            vals = ModelCritic(self.params, ex).values(None, [s for s, _ in dv])
            for (_, lab), v in zip(dv, vals):
                devs.append(abs(v - lab))
                if lab > HIGH_REWARD:
                    high.append(abs(v - lab))
        row = [step, len(devs), float(np.mean(devs)) if devs else None, len(high),
               float(np.mean(high)) if high else None]
        self.value_dev.append(row)
        self._append(self.value_dev_path, row)

    def _run_expert(self) -> TrainResult:
        cfg = self.config
        expert_cfg = replace(self.model_config, policy_sees_target=True)
        expert = init_params(expert_cfg, cfg.domain, self.words, cfg.seed + 1, self.pretrained, value_head=False)
        opt = Adam(expert, cfg.learning_rate)
        for step in range(1, cfg.training_steps + 1):
            grads = expert.zeros_like()
            hits = correct = 0
            p_loss = 0.0
            for ex in self._batch():
                problem = self.problems[ex.id]
                out, _ = run_beam(cfg, expert, ex, problem, cfg.epsilon, self.rng)
                hits += out.hit
                correct += len(out.positives)
                weighted = [(p.tokens, w) for p, w in mml_weights(out.positives)]
                if weighted:
                    loss, g = policy_loss_grad(expert, ex, weighted, problem)
                    p_loss += loss
                    _accumulate(grads, g)
            opt.step(grads)
            expert.step = step
            self._record(hits, cfg.batch_size, p_loss, None, correct)
        self._checkpoint(expert, "expert.ckpt")
        # phase 2: the plain policy learns from the expert's correct programs
        opt = Adam(self.params, cfg.learning_rate)
        for step in range(1, cfg.training_steps + 1):
            grads = self.params.zeros_like()
            hits = correct = 0
            p_loss = 0.0
            for ex in self._batch():
                problem = self.problems[ex.id]
                out, _ = run_beam(cfg, expert, ex, problem, cfg.epsilon, self.rng)
                hits += out.hit
                correct += len(out.positives)
                actor = ModelActor(self.params, ex)
                mine = [rescore(problem, actor, p.tokens) for p in out.positives]
                weighted = [(p.tokens, w) for p, w in mml_weights(mine)]
                if weighted:
                    loss, g = policy_loss_grad(self.params, ex, weighted, problem)
                    p_loss += loss
                    _accumulate(grads, g)
            opt.step(grads)
            self.params.step = step
            self._record(hits, cfg.batch_size, p_loss, None, correct)
        self._checkpoint(self.params, "final.ckpt")
        return TrainResult(self.params, self.metrics, self.value_dev, expert)


def _accumulate(total: dict, g: dict, scale: float = 1.0) -> None:
    for k, v in g.items():
        total[k] += v if scale == 1.0 else scale * v


def train(config: TrainConfig, examples, **kw) -> TrainResult:
    return Trainer(config, examples, **kw).run()


def reinforce_train(config: TrainConfig, examples, **kw) -> TrainResult:
    return Trainer(replace(config, algorithm="reinforce"), examples, **kw).run()


def expert_mml_train(config: TrainConfig, examples, **kw) -> TrainResult:
    return Trainer(replace(config, algorithm="expert_mml"), examples, **kw).run()


def config_echo(config: TrainConfig) -> dict:
    return asdict(config)
