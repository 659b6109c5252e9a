"""Policy and value networks on top of :mod:`execsearch.autograd`.

The policy reads the current utterance (bidirectional GRU) and the top of
the program stack, attends over the utterance and predicts the next token
with a softmax restricted to the currently valid tokens.  The value network
reuses the word embeddings, the current-utterance encoder and the stack
embeddings, and adds an encoder for the next utterance plus embeddings of
the current and target worlds, ending in a sigmoid.
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .mdp import MdpState, SconeProblem
from .scone import DOMAINS, Example, World, get_domain

log = logging.getLogger(__name__)

PAD, UNK = "<pad>", "<unk>"
CHECKPOINT_MAGIC = b"EXSRCKPT"
CHECKPOINT_VERSION = 1

SHARED = ("word_emb", "stack_emb", "enc_f_W", "enc_f_U", "enc_f_b", "enc_b_W", "enc_b_U", "enc_b_b")


@dataclass
class ModelConfig:
    embedding: int = 32
    hidden: int = 64  # width of the concatenated bidirectional encoder state
    stack_depth: int = 4
    world_embedding: int = 8
    ff: int = 64
    value_hidden: int = 64
    value_layers: int = 2
    value_world_diff: bool = True  # per-position "current != target" indicators as extra critic inputs
    value_stack_refs: bool = True  # mismatch bit of the position each stack slot refers to
    cell: str = "gru"
    dtype: str = "float64"
    init_scale: float = 0.1
    policy_sees_target: bool = False
    fixed_embeddings: bool = False

    @property
    def half(self) -> int:
        return self.hidden // 2


@dataclass
class ParameterSet:
    config: ModelConfig
    domain: str
    words: list
    tensors: dict
    seed: int = 0
    step: int = 0
    frozen: set = field(default_factory=set)

    def __post_init__(self):
        self.word_index = {w: i for i, w in enumerate(self.words)}
        dom = get_domain(self.domain)
        self.stack_index = {v: i + 1 for i, v in enumerate(dom.stack_values())}
        self.position_of_stack_id = np.zeros(len(self.stack_index) + 1, dtype=np.int64)
        for v, i in self.stack_index.items():
            if v.kind == "pos":
                self.position_of_stack_id[i] = v.val

    def __getitem__(self, name):
        return self.tensors[name]

    def copy(self) -> "ParameterSet":
        return ParameterSet(self.config, self.domain, list(self.words),
                            {k: v.copy() for k, v in self.tensors.items()}, self.seed, self.step,
                            set(self.frozen))

    def zeros_like(self) -> dict:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}

    @property
    def has_value_head(self) -> bool:
        return "val_W1" in self.tensors


def world_feature_size(domain: str) -> tuple[int, int]:
    """(number of embedded slots per world, embedding table size)."""
    if domain == "alchemy":
        return 7 * 4, 7
    if domain == "scene":
        return 10 * 2, 14
    return 5, 6


def slots_per_position(domain: str) -> int:
    return {"alchemy": 4, "scene": 2}.get(domain, 1)


def world_ids(world: World) -> list[int]:
    d = DOMAINS[world.domain]
    if world.domain == "alchemy":
        cols = {c: i + 1 for i, c in enumerate(d.color_names)}
        out = []
        for b in world.cells:
            out += [cols[c] for c in b] + [0] * (4 - len(b))
        return out
    if world.domain == "scene":
        cols = {c: i + 1 for i, c in enumerate(d.color_names)}
        out = []
        for shirt, hat in world.cells:
            out += [cols.get(shirt, 0), 7 + cols.get(hat, 0)]
        return out
    return [s + 1 for s in world.cells] + [0] * (5 - len(world.cells))


def _uniform(rng, shape, scale, dtype):
    return rng.uniform(-scale, scale, size=shape).astype(dtype)


def init_params(config: ModelConfig, domain: str, words, seed: int, pretrained: str | None = None,
                value_head: bool = True) -> ParameterSet:
    rng = np.random.default_rng(seed)
    dt = np.dtype(config.dtype)
    s = config.init_scale
    dom = get_domain(domain)
    vocab = [PAD, UNK] + sorted(set(words) - {PAD, UNK})
    e, h, H, ff = config.embedding, config.half, config.hidden, config.ff
    n_stack = len(dom.stack_values()) + 1
    n_world, world_table = world_feature_size(domain)
    q_in = config.stack_depth * e + H
    if config.policy_sees_target:
        q_in += 2 * n_world * config.world_embedding
    t = {
        "word_emb": _uniform(rng, (len(vocab), e), s, dt),
        "stack_emb": _uniform(rng, (n_stack, e), s, dt),
    }
    for d in "fb":
        t[f"enc_{d}_W"] = _uniform(rng, (e, 3 * h), s, dt)
        t[f"enc_{d}_U"] = _uniform(rng, (h, 3 * h), s, dt)
        t[f"enc_{d}_b"] = _uniform(rng, (3 * h,), s, dt)
    t["pol_q_W"] = _uniform(rng, (q_in, ff), s, dt)
    t["pol_q_b"] = _uniform(rng, (ff,), s, dt)
    t["pol_att_W"] = _uniform(rng, (ff, H), s, dt)
    t["pol_out_W"] = _uniform(rng, (ff + H, ff), s, dt)
    t["pol_out_b"] = _uniform(rng, (ff,), s, dt)
    t["pol_soft_W"] = _uniform(rng, (ff, len(dom.vocab)), s, dt)
    t["pol_soft_b"] = _uniform(rng, (len(dom.vocab),), s, dt)
    if config.policy_sees_target:
        t["pol_world_emb"] = _uniform(rng, (world_table, config.world_embedding), s, dt)
    if value_head:
        for d in "fb":
            t[f"val_enc_{d}_W"] = _uniform(rng, (e, 3 * h), s, dt)
            t[f"val_enc_{d}_U"] = _uniform(rng, (h, 3 * h), s, dt)
            t[f"val_enc_{d}_b"] = _uniform(rng, (3 * h,), s, dt)
        t["val_world_emb"] = _uniform(rng, (world_table, config.world_embedding), s, dt)
        v_in = 2 * H + config.stack_depth * e + 2 * n_world * config.world_embedding
        if config.value_world_diff:
            v_in += n_world // slots_per_position(domain)
        if config.value_stack_refs:
            v_in += config.stack_depth
        vh = config.value_hidden
        for i in range(1, config.value_layers + 1):
            t[f"val_W{i}"] = _uniform(rng, (v_in if i == 1 else vh, vh), s, dt)
            t[f"val_b{i}"] = _uniform(rng, (vh,), s, dt)
        t["val_out_w"] = _uniform(rng, (vh, 1), s, dt)
        t["val_out_b"] = _uniform(rng, (1,), s, dt)
    frozen = set()
    if pretrained:
        vectors = load_embeddings(pretrained)
        missing = []
        for i, w in enumerate(vocab[2:], start=2):
            vec = vectors.get(w)
            if vec is None:
                missing.append(w)
                continue
            if len(vec) != e:
                raise ValueError(f"pretrained vector for {w!r} has {len(vec)} dims, model expects {e}")
            t["word_emb"][i] = vec
        if missing:
            log.warning("%d words absent from %s, rows randomly initialized: %s",
                        len(missing), pretrained, " ".join(missing[:20]))
        if config.fixed_embeddings:
            frozen.add("word_emb")
    return ParameterSet(config, domain, vocab, t, seed, 0, frozen)


def load_embeddings(path: str) -> dict:
    out = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            parts = line.split()
            if not parts:
                continue
            try:
                out[parts[0]] = np.array([float(x) for x in parts[1:]])
            except ValueError as err:
                raise ValueError(f"{path}:{lineno}: {err}") from None
    return out


def save_params(params: ParameterSet, path: str) -> None:
    meta = {
        "config": asdict(params.config), "domain": params.domain, "words": params.words,
        "seed": params.seed, "step": params.step, "frozen": sorted(params.frozen),
    }
    blob = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(params.tensors)))
        for name in sorted(params.tensors):
            arr = params.tensors[name]
            nb = name.encode()
            f.write(struct.pack("<H", len(nb)) + nb)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_params(path: str) -> ParameterSet:
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, n = struct.unpack_from("<II", data, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unknown checkpoint version {version}")
    off = 16
    meta = json.loads(data[off:off + n])
    off += n
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    config = ModelConfig(**meta["config"])
    tensors = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", data, off)
        name = data[off + 2:off + 2 + ln].decode()
        off += 2 + ln
        (ndim,) = struct.unpack_from("<B", data, off)
        shape = struct.unpack_from(f"<{ndim}I", data, off + 1)
        off += 1 + 4 * ndim
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(shape)
        off += 4 * size
        tensors[name] = arr.astype(config.dtype)
    params = ParameterSet(config, meta["domain"], meta["words"], tensors, meta["seed"], meta["step"],
                          set(meta["frozen"]))
    fresh = init_params(config, params.domain, [], 0, value_head=params.has_value_head)
    for name, arr in fresh.tensors.items():
        if name == "word_emb":
            continue
        if name not in tensors or tensors[name].shape != arr.shape:
            raise ValueError(f"{path}: tensor {name} missing or has the wrong shape")
    return params


# -- featurization -------------------------------------------------------------


class Featurizer:
    """Integer inputs for one example: utterance word ids, stack ids, world ids."""

    def __init__(self, params: ParameterSet, example: Example):
        self.params = params
        self.example = example
        unk = params.word_index[UNK]
        utts = [[params.word_index.get(w, unk) for w in u] for u in example.utterances]
        self.lengths = np.array([len(u) for u in utts])
        T = max(1, self.lengths.max())
        self.ids = np.zeros((len(utts), T), dtype=np.int64)
        for i, u in enumerate(utts):
            self.ids[i, :len(u)] = u
        self.target_ids = world_ids(example.target)

    def stack_ids(self, stack: tuple) -> list[int]:
        depth = self.params.config.stack_depth
        top = [self.params.stack_index[v] for v in reversed(stack[-depth:])]
        return top + [0] * (depth - len(top))


def _leaves(params: ParameterSet, grad: bool) -> dict:
    return {k: ag.Tensor(v, requires_grad=grad and k not in params.frozen) for k, v in params.tensors.items()}


def _gru(L, prefix, x, mask):
    """Run one GRU direction over ``x`` (M,T,e); returns per-step states (M,T,h) and final state."""
    h_dim = L[f"{prefix}_U"].data.shape[0]
    M, T = mask.shape
    xw = ag.matmul(x, L[f"{prefix}_W"]) + L[f"{prefix}_b"]
    U = L[f"{prefix}_U"]
    U_zr, U_n = U[:, :2 * h_dim], U[:, 2 * h_dim:]
    h = ag.Tensor(np.zeros((M, h_dim), dtype=x.data.dtype))
    outs = []
    for t in range(T):
        xt = xw[:, t, :]
        hu = ag.matmul(h, U_zr)
        z = ag.sigmoid(xt[:, :h_dim] + hu[:, :h_dim])
        r = ag.sigmoid(xt[:, h_dim:2 * h_dim] + hu[:, h_dim:])
        n = ag.tanh(xt[:, 2 * h_dim:] + ag.matmul(r * h, U_n))
        h_new = n + z * (h - n)
        m = mask[:, t:t + 1].astype(x.data.dtype)
        h = h + m * (h_new - h)
        outs.append(h)
    return ag.stack(outs, axis=1), h


def encode(L, prefix: str, ids: np.ndarray, lengths: np.ndarray):
    """Bidirectional encoding of right-padded id rows.

    Returns (states (M,T,H), summary (M,H), mask (M,T)).
    """
    M, T = ids.shape
    mask = np.arange(T)[None, :] < lengths[:, None]
    rev = np.zeros_like(ids)
    src = np.clip(lengths[:, None] - 1 - np.arange(T)[None, :], 0, None)
    rows = np.arange(M)[:, None]
    rev[mask] = ids[rows, src][mask]
    emb = L["word_emb"]
    xf = ag.index(emb, ids)
    xb = ag.index(emb, rev)
    hf, last_f = _gru(L, f"{prefix}_f", xf, mask)
    hb_rev, last_b = _gru(L, f"{prefix}_b", xb, mask)
    hb = ag.index(hb_rev, (np.broadcast_to(rows, (M, T)), src))
    return ag.concat([hf, hb], axis=-1), ag.concat([last_f, last_b], axis=-1), mask


class _Encoded:
    def __init__(self, L, feats: Featurizer, value: bool):
        self.states, self.summary, self.mask = encode(L, "enc", feats.ids, feats.lengths)
        if value:
            _, nxt, _ = encode(L, "val_enc", feats.ids, feats.lengths)
            zero = ag.Tensor(np.zeros((1, nxt.data.shape[1]), dtype=nxt.data.dtype))
            # row M is the empty "next utterance" after the last one
            self.next_summary = ag.concat([nxt, zero], axis=0)


def _stack_vectors(L, params, stack_ids):
    x = ag.index(L["stack_emb"], np.asarray(stack_ids))
    B = x.data.shape[0]
    return ag.reshape(x, (B, -1))


def _world_vectors(table, ids):
    x = ag.index(table, np.asarray(ids))
    return ag.reshape(x, (x.data.shape[0], -1))


def policy_logits(L, params: ParameterSet, enc: _Encoded, utt_idx, stack_ids, world_rows=None, target_rows=None):
    """Unnormalized token scores for a batch of states of one example; ``utt_idx`` is 0-based."""
    utt_idx = np.asarray(utt_idx)
    parts = [_stack_vectors(L, params, stack_ids), ag.index(enc.summary, utt_idx)]
    if params.config.policy_sees_target:
        parts += [_world_vectors(L["pol_world_emb"], world_rows), _world_vectors(L["pol_world_emb"], target_rows)]
    q = ag.tanh(ag.matmul(ag.concat(parts), L["pol_q_W"]) + L["pol_q_b"])
    hs = ag.index(enc.states, utt_idx)
    scores = ag.bmv(hs, ag.matmul(q, L["pol_att_W"]))
    alpha = ag.masked_softmax(scores, enc.mask[utt_idx])
    ctx = ag.weighted_sum(alpha, hs)
    h = ag.tanh(ag.matmul(ag.concat([q, ctx]), L["pol_out_W"]) + L["pol_out_b"])
    return ag.matmul(h, L["pol_soft_W"]) + L["pol_soft_b"]


def value_logits(L, params: ParameterSet, enc: _Encoded, utt_idx, stack_ids, world_rows, target_rows):
    utt_idx = np.asarray(utt_idx)
    table = L["val_world_emb"]
    parts = [
        ag.index(enc.summary, utt_idx),
        _stack_vectors(L, params, stack_ids),
        ag.index(enc.next_summary, utt_idx + 1),
        _world_vectors(table, world_rows),
        _world_vectors(table, target_rows),
    ]
    if params.config.value_world_diff:
        cur, tgt = np.asarray(world_rows), np.asarray(target_rows)
        k = slots_per_position(params.domain)
        diff = (cur != tgt).reshape(cur.shape[0], -1, k).any(axis=2)
        parts.append(ag.Tensor(diff.astype(table.data.dtype)))
    if params.config.value_stack_refs:
        parts.append(ag.Tensor(_stack_ref_bits(params, stack_ids, world_rows, target_rows).astype(table.data.dtype)))
    z = ag.concat(parts)
    for i in range(1, params.config.value_layers + 1):
        z = ag.tanh(ag.matmul(z, L[f"val_W{i}"]) + L[f"val_b{i}"])
    return ag.reshape(ag.matmul(z, L["val_out_w"]) + L["val_out_b"], (-1,))


def _stack_ref_bits(params, stack_ids, world_rows, target_rows) -> np.ndarray:
    """(B, stack_depth): 1 where a stack slot holds a position whose cell differs from the target."""
    cur, tgt = np.asarray(world_rows), np.asarray(target_rows)
    k = slots_per_position(params.domain)
    diff = (cur != tgt).reshape(cur.shape[0], -1, k).any(axis=2)
    pos_of = params.position_of_stack_id
    ids = np.asarray(stack_ids)
    p = pos_of[ids]  # 0 for non-positions, else 1-based position
    rows = np.arange(ids.shape[0])[:, None]
    padded = np.concatenate([np.zeros((diff.shape[0], 1), dtype=bool), diff], axis=1)
    return padded[rows, p]


def _state_inputs(feats: Featurizer, states):
    utt = [min(s.index, s.m) - 1 for s in states]
    stacks = [feats.stack_ids(s.stack) for s in states]
    worlds = [world_ids(s.world) for s in states]
    return utt, stacks, worlds


# -- search-facing scorers -----------------------------------------------------


class ModelActor:
    """Policy distributions for the states of one example (no gradient)."""

    def __init__(self, params: ParameterSet, example: Example):
        self.params = params
        self.feats = Featurizer(params, example)
        self._L = _leaves(params, grad=False)
        with ag.no_grad():
            self._enc = _Encoded(self._L, self.feats, value=False)
        self._logits: dict = {}
        self.calls = 0

    def _cache_key(self, s: MdpState):
        if self.params.config.policy_sees_target:
            return s.key
        return (s.index, s.stack[-self.params.config.stack_depth:])

    def logits(self, states) -> list[np.ndarray]:
        keys = [self._cache_key(s) for s in states]
        todo = {}
        for k, s in zip(keys, states):
            if k not in self._logits and k not in todo:
                todo[k] = s
        if todo:
            batch = list(todo.values())
            utt, stacks, worlds = _state_inputs(self.feats, batch)
            with ag.no_grad():
                out = policy_logits(self._L, self.params, self._enc, utt, stacks, worlds,
                                    [self.feats.target_ids] * len(batch)).data
            self.calls += 1
            for k, row in zip(todo, out):
                self._logits[k] = row
        return [self._logits[k] for k in keys]

    def distributions(self, problem, states) -> list[np.ndarray]:
        rows = self.logits(states)
        out = []
        for s, row in zip(states, rows):
            idx = [tok.index for tok, _ in problem.successors(s)]
            if not idx:
                out.append(np.zeros(0))
                continue
            z = row[idx].astype(np.float64)
            z = np.exp(z - z.max())
            out.append(z / z.sum())
        return out


class ModelCritic:
    """Value estimates V(s, y) for the states of one example."""

    def __init__(self, params: ParameterSet, example: Example):
        self.params = params
        self.feats = Featurizer(params, example)
        self._L = _leaves(params, grad=False)
        with ag.no_grad():
            self._enc = _Encoded(self._L, self.feats, value=True)
        self._cache: dict = {}

    def values(self, problem, states) -> np.ndarray:
        todo = list({s.key: s for s in states if s.key not in self._cache}.values())
        if todo:
            utt, stacks, worlds = _state_inputs(self.feats, todo)
            with ag.no_grad():
                z = value_logits(self._L, self.params, self._enc, utt, stacks, worlds,
                                 [self.feats.target_ids] * len(todo)).data
            for s, v in zip(todo, ag._sigmoid(z.astype(np.float64))):
                self._cache[s.key] = v
        return np.array([self._cache[s.key] for s in states])


# -- operations ------------------------------------------------------------------


def policy_dist(params: ParameterSet, example: Example, s: MdpState, problem=None) -> dict:
    problem = problem or SconeProblem(example)
    succ = problem.successors(s)
    if not succ:
        raise ValueError("dead end: no valid tokens")
    probs = ModelActor(params, example).distributions(problem, [s])[0]
    return {tok: float(p) for (tok, _), p in zip(succ, probs)}


def value_predict(params: ParameterSet, example: Example, s: MdpState) -> float:
    return float(ModelCritic(params, example).values(None, [s])[0])


def sequence_logprob(params: ParameterSet, example: Example, tokens, problem=None) -> float:
    problem = problem or SconeProblem(example)
    if not tokens:
        return 0.0
    actor = ModelActor(params, example)
    states = problem.replay(tokens)
    dists = actor.distributions(problem, states[:-1])
    total = 0.0
    for s, tok, p in zip(states, tokens, dists):
        names = [t.name for t, _ in problem.successors(s)]
        total += float(np.log(p[names.index(tok.name)]))
    return total


def _grads(params, L) -> dict:
    out = {}
    for k, leaf in L.items():
        g = leaf.grad
        out[k] = np.zeros_like(params.tensors[k]) if g is None else np.asarray(g, dtype=params.tensors[k].dtype)
    return out


def policy_loss_grad(params: ParameterSet, example: Example, weighted_programs, problem=None):
    """Loss ``-sum w * log p(z)`` and its gradient; ``weighted_programs`` holds (tokens, weight)."""
    problem = problem or SconeProblem(example)
    feats = Featurizer(params, example)
    rows, chosen, masks, weights = [], [], [], []
    V = len(DOMAINS[example.domain].vocab)
    for tokens, w in weighted_programs:
        if w == 0 or not tokens:
            continue
        states = problem.replay(tokens)
        for s, tok in zip(states, tokens):
            mask = np.zeros(V, dtype=bool)
            mask[[t.index for t, _ in problem.successors(s)]] = True
            rows.append(s)
            chosen.append(tok.index)
            masks.append(mask)
            weights.append(w)
    if not rows:
        return 0.0, params.zeros_like()
    L = _leaves(params, grad=True)
    enc = _Encoded(L, feats, value=False)
    utt, stacks, worlds = _state_inputs(feats, rows)
    logits = policy_logits(L, params, enc, utt, stacks, worlds, [feats.target_ids] * len(rows))
    lp = ag.masked_log_softmax(logits, np.array(masks))
    picked = ag.index(lp, (np.arange(len(rows)), np.array(chosen)))
    loss = -ag.dot_const(picked, np.array(weights))
    loss.backward()
    return float(loss.data), _grads(params, L)


def value_loss_grad(params: ParameterSet, example: Example, value_examples):
    """Log-loss of V(s, y) against soft labels; ``value_examples`` holds (state, label) pairs.

    Computed on logits, so it stays finite for saturated predictions.
    """
    value_examples = [(s, l) for s, l in value_examples if not s.done]
    if not value_examples:
        return 0.0, params.zeros_like()
    feats = Featurizer(params, example)
    L = _leaves(params, grad=True)
    enc = _Encoded(L, feats, value=True)
    states = [s for s, _ in value_examples]
    labels = np.array([l for _, l in value_examples], dtype=params.tensors["val_out_b"].dtype)
    utt, stacks, worlds = _state_inputs(feats, states)
    z = value_logits(L, params, enc, utt, stacks, worlds, [feats.target_ids] * len(states))
    ll = ag.dot_const(ag.log_sigmoid(z), labels) + ag.dot_const(ag.log_sigmoid(-z), 1.0 - labels)
    loss = -ll
    loss.backward()
    return float(loss.data), _grads(params, L)


def add_grads(a: dict, b: dict, scale: float = 1.0) -> dict:
    return {k: a[k] + scale * b[k] for k in a}


def grad_check(params: ParameterSet, loss_fn, n_coords: int = 100, eps: float = 1e-5, seed: int = 0,
               floor: float = 1e-4) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``loss_fn(params) -> (loss, grads)``.  Half of the coordinates are drawn
    from those with a nonzero analytic gradient, the rest uniformly.  The
    relative error is ``|a - n| / max(|a|, |n|, floor)``; the floor keeps
    near-zero gradients from turning central-difference roundoff (about
    ``1e-16 * |loss| / eps``) into a large ratio.
    """
    if np.dtype(params.config.dtype) != np.float64:
        raise ValueError("grad_check needs double precision parameters")
    rng = np.random.default_rng(seed)
    _, grads = loss_fn(params)
    names = sorted(params.tensors)
    sizes = np.array([params.tensors[n].size for n in names])
    flat_all = [(n, j) for n in names for j in np.flatnonzero(grads[n].ravel() != 0)]
    coords = []
    if flat_all:
        pick = rng.choice(len(flat_all), size=min(n_coords // 2, len(flat_all)), replace=False)
        coords += [flat_all[i] for i in pick]
    while len(coords) < n_coords:
        ti = rng.choice(len(names), p=sizes / sizes.sum())
        coords.append((names[ti], int(rng.integers(sizes[ti]))))
    worst = 0.0
    for name, j in coords:
        arr = params.tensors[name].reshape(-1)
        old = arr[j]
        arr[j] = old + eps
        up, _ = loss_fn(params)
        arr[j] = old - eps
        down, _ = loss_fn(params)
        arr[j] = old
        num = (up - down) / (2 * eps)
        ana = grads[name].reshape(-1)[j]
        worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), floor))
    return worst
