"""Command-line entry point: ``execsearch {train,eval,search,analyze,generate}``.

Settings come from built-in defaults, then an optional ``--config`` file of
``key = value`` lines, then command-line flags (``--set key=value`` reaches
any setting).  The effective configuration is echoed to stderr.

Exit codes: 0 ok, 1 usage, 2 data error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("execsearch")


class UsageError(Exception):
    pass


class DataFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# flag dest -> config key
FLAG_KEYS = {
    "domain": "domain", "algo": "algorithm", "steps": "training_steps", "lr": "learning_rate",
    "batch_size": "batch_size", "beam": "K", "k0": "K0", "program_beam": "program_beam",
    "epsilon": "epsilon", "value_start": "value_ranking_start_step", "max_tokens": "max_tokens_per_command",
    "sample_size": "sample_size", "baseline": "baseline", "seed": "seed", "dtype": "dtype",
    "truncations": "truncations", "k_test": "k_test",
}
EXTRA_KEYS = {"truncations": str, "k_test": int, "data": str, "embeddings": str, "out": str}


def _common(p, train=False):
    p.add_argument("--config", help="flat key = value settings file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any setting")
    p.add_argument("--domain", choices=["scene", "alchemy", "tangrams"])
    p.add_argument("--data", help="dataset file (tab-separated)")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, default=1, help="BLAS threads")
    p.add_argument("--beam", type=int, help="beam size K")
    p.add_argument("--k0", type=int, help="value re-rank size K0")
    p.add_argument("--program-beam", type=int)
    p.add_argument("--max-tokens", type=int, help="max tokens per command")
    p.add_argument("--truncations", help="utterance cuts, e.g. 1,5 (default per domain)")
    p.add_argument("-v", "--verbose", action="store_true")
    if train:
        p.add_argument("--algo", choices=["vbsix", "mml", "reinforce", "expert_mml"])
        p.add_argument("--steps", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--epsilon", type=float)
        p.add_argument("--value-start", type=int)
        p.add_argument("--sample-size", type=int)
        p.add_argument("--baseline", type=float)
        p.add_argument("--dtype", choices=["float32", "float64"])
        p.add_argument("--embeddings", help="pretrained word vectors: word v1 ... vd")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="execsearch", description="Weakly supervised program search with VBSiX.")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)
    p = sub.add_parser("train", help="train a policy (and critic)")
    _common(p, train=True)
    p.add_argument("--out", help="output directory for checkpoints and metrics")
    p.add_argument("--validate", action="store_true", help="check recorded worlds are reachable (warnings only)")

    p = sub.add_parser("eval", help="denotation accuracy at an utterance cutoff")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cutoff", type=int, action="append", help="3 and/or 5 (repeatable; default both)")
    p.add_argument("--k-test", type=int)
    p.add_argument("--out")

    p = sub.add_parser("search", help="search one example and print programs")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--example-id", required=True)
    p.add_argument("--method", choices=["vbsix", "beam"], default="vbsix")
    p.add_argument("--no-value", action="store_true", help="rank by actor score only")
    p.add_argument("--dump-graph", metavar="PATH", help="write the execution graph")
    p.add_argument("--cutoff", type=int, help="truncate the example to this many utterances")

    p = sub.add_parser("analyze", help="execution-space statistics and value deviation")
    _common(p)
    p.add_argument("--checkpoint", action="append", default=[], help="repeatable; one value_dev row each")
    p.add_argument("--graphs", nargs="*", default=[], help="dumped graph files for the statistics")
    p.add_argument("--sample-budget", type=int, default=50)
    p.add_argument("--out", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    p.add_argument("--domain", required=True, choices=["scene", "alchemy", "tangrams"])
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--utterances", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--programs", help="also write gold programs (id TAB program per command)")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("-v", "--verbose", action="store_true")
    return ap


def read_config_file(path: str) -> dict:
    out = {}
    try:
        fh = open(path, encoding="utf-8")
    except OSError as err:
        raise DataFailure(f"cannot read config {path}: {err.strerror}") from None
    with fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = line.partition("=")
            if not sep or not key.strip():
                raise UsageError(f"{path}:{lineno}: expected key = value")
            out[key.strip()] = val.strip()
    return out


def _settings_types():
    from dataclasses import fields

    from .model import ModelConfig
    from .training import TrainConfig
    types = {f.name: f.type for f in fields(TrainConfig)}
    types.update({f.name: f.type for f in fields(ModelConfig)})
    types.update({k: v.__name__ for k, v in EXTRA_KEYS.items()})
    return types


def _coerce(key: str, raw, types: dict):
    kind = types.get(key)
    if kind is None:
        raise UsageError(f"unknown setting {key!r}")
    if not isinstance(raw, str):
        return raw
    kind = kind if isinstance(kind, str) else kind.__name__
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
    except ValueError:
        raise UsageError(f"setting {key}: cannot parse {raw!r} as {kind}") from None
    return raw


def effective_settings(args) -> tuple[dict, dict]:
    """Merged settings and the source of each (default / file / flag)."""
    from dataclasses import asdict

    from .model import ModelConfig
    from .training import default_config
    types = _settings_types()
    file_vals = read_config_file(args.config) if getattr(args, "config", None) else {}
    flag_vals = {}
    for dest, key in FLAG_KEYS.items():
        v = getattr(args, dest, None)
        if v is not None:
            flag_vals[key] = v
    for item in getattr(args, "set", []):
        key, sep, val = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        flag_vals[key.strip()] = val.strip()
    if getattr(args, "data", None):
        flag_vals["data"] = args.data
    if getattr(args, "embeddings", None):
        flag_vals["embeddings"] = args.embeddings
    if getattr(args, "out", None):
        flag_vals["out"] = args.out
    domain = _coerce("domain", flag_vals.get("domain", file_vals.get("domain", "alchemy")), types)
    algo = _coerce("algorithm", flag_vals.get("algorithm", file_vals.get("algorithm", "vbsix")), types)
    if domain not in ("scene", "alchemy", "tangrams"):
        raise UsageError(f"unknown domain {domain!r}")
    if algo not in ("vbsix", "mml", "reinforce", "expert_mml"):
        raise UsageError(f"unknown algorithm {algo!r}")
    base = asdict(default_config(domain, algo))
    base.update(asdict(ModelConfig(dtype="float32")))
    base.update({"truncations": "", "k_test": 32, "data": "", "embeddings": "", "out": ""})
    settings, source = {}, {}
    for k, v in base.items():
        settings[k], source[k] = v, "default"
    for layer, name in ((file_vals, "file"), (flag_vals, "flag")):
        for k, v in layer.items():
            settings[k] = _coerce(k, v, types)
            source[k] = name
    return settings, source


def echo_settings(settings: dict, source: dict, stream=None) -> None:
    stream = stream or sys.stderr
    for k in sorted(settings):
        stream.write(f"config {k} = {settings[k]} [{source[k]}]\n")


def _split_settings(settings: dict):
    from dataclasses import fields

    from .model import ModelConfig
    from .training import TrainConfig
    tc = TrainConfig(**{f.name: settings[f.name] for f in fields(TrainConfig)})
    mc = ModelConfig(**{f.name: settings[f.name] for f in fields(ModelConfig)})
    return tc, mc


def _truncations(settings):
    raw = settings.get("truncations") or ""
    if not raw:
        return None
    try:
        return tuple(int(x) for x in str(raw).split(",") if x.strip())
    except ValueError:
        raise UsageError(f"truncations must be comma-separated integers, got {raw!r}") from None


def _load_data(settings, require=True):
    from .data import DataError, load_dataset
    path = settings.get("data")
    if not path:
        if require:
            raise UsageError("--data is required")
        return None
    if not os.path.exists(path):
        raise DataFailure(f"dataset not found: {path}")
    try:
        return load_dataset(path, settings["domain"])
    except DataError as err:
        raise DataFailure(f"{path}: {err}") from None


def _load_ckpt(path):
    from .model import load_params
    if not os.path.exists(path):
        raise DataFailure(f"checkpoint not found: {path}")
    try:
        return load_params(path)
    except (ValueError, OSError) as err:
        raise DataFailure(f"{path}: {err}") from None


def _write_settings(path, settings):
    with open(path, "w", encoding="utf-8") as fh:
        for k in sorted(settings):
            fh.write(f"{k} = {settings[k]}\n")


# -- commands -----------------------------------------------------------------


def cmd_train(args) -> int:
    from .data import training_examples, validate_dataset
    from .training import Trainer
    settings, source = effective_settings(args)
    echo_settings(settings, source)
    tc, mc = _split_settings(settings)
    ds = _load_data(settings)
    if args.validate:
        validate_dataset(ds)
    examples = training_examples(ds.examples, tc.domain, _truncations(settings))
    if not examples:
        raise DataFailure("no training examples after truncation")
    out = settings["out"] or "run"
    os.makedirs(out, exist_ok=True)
    _write_settings(os.path.join(out, "config.txt"), settings)
    trainer = Trainer(tc, examples, mc, pretrained=settings["embeddings"] or None, out_dir=out,
                      metrics_path=os.path.join(out, "metrics.csv"),
                      value_dev_path=os.path.join(out, "value_dev.csv") if tc.algorithm == "vbsix" else None)
    res = trainer.run()
    last = res.metrics[-1]
    print(f"trained {tc.algorithm} for {len(res.metrics)} steps; hit_accuracy_ema={last[2]:.4f}; "
          f"checkpoint {os.path.join(out, 'final.ckpt')}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import denotation_accuracy, write_eval
    settings, source = effective_settings(args)
    params = _load_ckpt(args.checkpoint)
    settings["domain"], source["domain"] = params.domain, "checkpoint"
    if args.k_test:
        settings["k_test"], source["k_test"] = args.k_test, "flag"
    echo_settings(settings, source)
    ds = _load_data(settings)
    reports = []
    for cutoff in args.cutoff or [3, 5]:
        try:
            r = denotation_accuracy(params, ds.examples, cutoff, settings["k_test"],
                                    settings["max_tokens_per_command"], settings["seed"])
        except ValueError as err:
            raise DataFailure(str(err)) from None
        reports.append(r)
        print(f"cutoff={cutoff} accuracy={r.accuracy:.4f} ({r.correct}/{r.count})")
    out = settings["out"] or "."
    write_eval(os.path.join(out, "eval.csv"), reports)
    return EXIT_OK


def cmd_search(args) -> int:
    from .mdp import SconeProblem
    from .model import ModelActor, ModelCritic
    from .search import beam_search, extract_programs, loads_graph, vbsix
    from .training import program_length, value_window
    settings, source = effective_settings(args)
    params = _load_ckpt(args.checkpoint)
    settings["domain"], source["domain"] = params.domain, "checkpoint"
    echo_settings(settings, source)
    tc, _ = _split_settings(settings)
    ds = _load_data(settings)
    try:
        ex = ds.by_id(args.example_id)
    except KeyError:
        raise DataFailure(f"no example with id {args.example_id!r}") from None
    if args.cutoff:
        try:
            ex = ex.truncate(args.cutoff)
        except ValueError as err:
            raise DataFailure(str(err)) from None
    problem = SconeProblem(ex)
    actor = ModelActor(params, ex)
    L = program_length(tc, ex)
    if args.method == "beam":
        progs = beam_search(problem, actor, tc.K, L)
    else:
        critic = None if args.no_value or not params.has_value_head else ModelCritic(params, ex)
        g = vbsix(problem, actor, tc.K, tc.K0, L, critic, value_window(tc, ex))
        progs = extract_programs(g, problem, actor, tc.program_beam)
        print(f"graph vertices={len(g.vertices)} edges={sum(len(v) for v in g.edges.values())} "
              f"terminals={len(g.terminals)} incorrect={len(g.incorrect)}")
        if args.dump_graph:
            text = g.dumps()
            with open(args.dump_graph, "w", encoding="utf-8") as fh:
                fh.write(text)
            back = loads_graph(text)
            if back.dumps() != text:
                raise RuntimeError("graph dump does not round-trip")
            print(f"graph written to {args.dump_graph}")
    for p in sorted(progs, key=lambda p: (-p.logp, p.text)):
        print(f"{p.logp:.6f}\t{p.reward}\t{p.text}")
    if not progs:
        print("no programs found")
    return EXIT_OK


def cmd_analyze(args) -> int:
    from .evaluation import exec_space_stats, value_deviation_report, vbsix_search_fn, write_space_stats, write_value_dev
    from .data import training_examples
    from .search import loads_graph
    settings, source = effective_settings(args)
    ckpts = [_load_ckpt(p) for p in args.checkpoint]
    if ckpts:
        settings["domain"], source["domain"] = ckpts[-1].domain, "checkpoint"
    echo_settings(settings, source)
    if not ckpts and not args.graphs:
        raise UsageError("analyze needs --checkpoint or --graphs")
    tc, _ = _split_settings(settings)
    os.makedirs(args.out, exist_ok=True)
    graphs = []
    for path in args.graphs:
        try:
            with open(path, encoding="utf-8") as fh:
                graphs.append(loads_graph(fh.read()))
        except (OSError, ValueError) as err:
            raise DataFailure(f"{path}: {err}") from None
    examples = []
    if ckpts:
        ds = _load_data(settings)
        examples = training_examples(ds.examples, tc.domain, _truncations(settings))[:args.sample_budget]
        if not args.graphs:
            fn = vbsix_search_fn(tc, use_value=ckpts[-1].has_value_head, graphs=graphs)
            for ex in examples:
                fn(ckpts[-1], ex)
    stats = exec_space_stats(graphs)
    write_space_stats(os.path.join(args.out, "space_stats.csv"), tc.domain, stats)
    print(f"graphs={stats.graphs} paths_in_beam={stats.paths_in_beam:.1f}{'+' if stats.capped else ''} "
          f"correct_discarded={stats.correct_discarded:.2f}")
    valued = [p for p in ckpts if p.has_value_head]
    if valued:
        rows = value_deviation_report([(p.step, p) for p in valued], examples, tc, args.sample_budget)
        write_value_dev(os.path.join(args.out, "value_dev.csv"), rows)
        for r in rows:
            print(f"step={r[0]} states={r[1]} mean_abs_dev={r[2]} high_states={r[3]} mean_abs_dev_high={r[4]}")
    return EXIT_OK


def cmd_generate(args) -> int:
    from .data import generate_examples, save_dataset
    if args.n < 1 or args.utterances < 1:
        raise UsageError("--n and --utterances must be positive")
    pairs = generate_examples(args.domain, args.n, args.utterances, args.seed)
    save_dataset([ex for ex, _ in pairs], args.out)
    if args.programs:
        with open(args.programs, "w", encoding="utf-8") as fh:
            for ex, progs in pairs:
                fh.write(ex.id + "\t" + "\t".join(progs) + "\n")
    print(f"wrote {len(pairs)} {args.domain} examples to {args.out}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "search": cmd_search, "analyze": cmd_analyze,
            "generate": cmd_generate}


def _fail(code: int, kind: str, msg: str) -> int:
    sys.stderr.write(f"error: {kind}: {' '.join(str(msg).split())}\n")
    return code


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
        if not args.command:
            raise UsageError("missing command (train, eval, search, analyze, generate)")
    except UsageError as err:
        return _fail(EXIT_USAGE, "usage", err)
    threads = str(max(1, args.threads))
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = threads
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .data import DataError
    from .scone import ParseError
    try:
        return COMMANDS[args.command](args)
    except UsageError as err:
        return _fail(EXIT_USAGE, "usage", err)
    except (DataFailure, DataError, ParseError) as err:
        return _fail(EXIT_DATA, "data", err)
    except OSError as err:
        return _fail(EXIT_DATA, "io", f"{err.filename}: {err.strerror}" if err.filename else err)
    except Exception as err:  # noqa: BLE001 - any other failure is a runtime error
        return _fail(EXIT_RUNTIME, "runtime", f"{type(err).__name__}: {err}")


if __name__ == "__main__":
    sys.exit(main())
