"""Command-line pipeline: preprocess, train, evaluate, generate, analyze,
and n-gram baselines.

Machine output is JSON only; each command prints exactly one human summary
line to stdout, and every number on that line is the JSON rendering of a
value stored in the command's JSON output.  Every run writes a manifest
(<output>.manifest.json) recording the command, its configuration, sha256
hashes of the inputs, the output paths, the seed, the wall time, and the
library version.  All artifact JSON is byte-deterministic for fixed inputs
and seed; wall time lives only in the manifest.

Exit codes: 0 success, 1 usage error, 2 data error (bad files, vocabulary
mismatches, invalid values), 3 numeric error (non-ergodic matrices,
divergence, undefined quantities).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import asdict, dataclass

from lamp import __version__
from lamp.core import (
    Corpus,
    DataError,
    EVALUATION_FLOOR,
    HistoryDistribution,
    NumericError,
    Vocabulary,
    generate,
    load_model,
    log_likelihood,
    perplexity,
    save_model,
)
from lamp.analysis import (
    export_trace_csv,
    lamp_mixing_bound,
    mixing_time,
    renewal_rate_estimate,
    simulate_exponent_process,
    stationary_distribution,
)
from lamp.baselines import fit_kneser_ney, fit_naive_ngram, ngram_perplexity, save_ngram
from lamp.data import (
    PreprocessConfig,
    decode_ids,
    encode_tokens,
    load_corpus,
    load_corpus_cache,
    preprocess,
    save_corpus_cache,
    split,
)
from lamp.learn import TrainConfig, alternate_minimize

__all__ = ["main", "RunManifest"]


@dataclass(frozen=True)
class RunManifest:
    command: str
    config: dict
    input_hashes: dict
    outputs: list
    seed: int | None
    wall_time_s: float
    version: str
    summary: dict


class _Parser(argparse.ArgumentParser):
    """Argument parser whose usage failures exit with code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _fmt(value) -> str:
    """Render a value exactly as it appears in the JSON output."""
    return json.dumps(value)


def _write_json(doc, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def _sha256(path: str) -> str:
    digest = hashlib.sha256()
    try:
        with open(path, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                digest.update(chunk)
    except OSError as exc:
        raise DataError(f"cannot read input {path}: {exc}") from exc
    return digest.hexdigest()


def _json_stem(path: str) -> str:
    return path[:-5] if path.endswith(".json") else path


def _write_manifest(
    command: str,
    args: argparse.Namespace,
    inputs: list[str],
    outputs: list[str],
    summary: dict,
    started: float,
) -> None:
    config = {
        k: v
        for k, v in vars(args).items()
        if k not in ("func", "command", "analyze_command")
    }
    manifest = RunManifest(
        command=command,
        config=config,
        input_hashes={path: _sha256(path) for path in inputs},
        outputs=list(outputs),
        seed=getattr(args, "seed", None),
        wall_time_s=time.perf_counter() - started,
        version=__version__,
        summary=summary,
    )
    _write_json(asdict(manifest), outputs[0] + ".manifest.json")


def _load_any_corpus(path: str) -> Corpus:
    """Cache JSON if the file starts with '{', whitespace-token text otherwise."""
    try:
        with open(path, "rb") as fh:
            head = fh.read(64).lstrip()
    except OSError as exc:
        raise DataError(f"cannot read corpus file {path}: {exc}") from exc
    if head.startswith(b"{"):
        return load_corpus_cache(path)
    return load_corpus(path)


def _align_corpus(corpus: Corpus, vocab: Vocabulary) -> Corpus:
    """Re-encode a corpus against a model's vocabulary.

    Identical token sets pass through unchanged; otherwise tokens are mapped
    by name, with unknown tokens falling back to the vocabulary's rare token
    or raising a data error when it has none.
    """
    if corpus.vocab.tokens == vocab.tokens:
        return corpus
    remapped = [
        encode_tokens(vocab, decode_ids(corpus.vocab, seq)) for seq in corpus.sequences
    ]
    return Corpus.from_sequences(vocab, remapped)


# ---------------------------------------------------------------------------
# Commands


def cmd_preprocess(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    corpus, load_report = load_corpus(args.input, limit=args.limit, return_report=True)
    cfg = PreprocessConfig(
        collapse_repeats=args.collapse_repeats,
        rare_min_count=args.rare_min_count,
        rare_token_label=args.rare_label,
        split_fraction=args.split if args.split is not None else 0.9,
        split_seed=args.split_seed,
    )
    out, report = preprocess(corpus, cfg)
    save_corpus_cache(out, args.output)
    outputs = [args.output]
    summary = {
        "n_sequences": report.n_sequences_out,
        "vocab_size": report.vocab_size_out,
        "dropped_short_sequences": report.dropped_short_sequences,
        "skipped_empty_lines": load_report.skipped_empty_lines,
        "rare_token_types": report.rare_token_types,
    }
    if args.split is not None:
        train, test = split(out, cfg.split_fraction, cfg.split_seed, cfg.rare_token_label)
        stem = _json_stem(args.output)
        train_path, test_path = stem + ".train.json", stem + ".test.json"
        save_corpus_cache(train, train_path)
        save_corpus_cache(test, test_path)
        outputs += [train_path, test_path]
        summary["n_train_sequences"] = len(train.sequences)
        summary["n_test_sequences"] = len(test.sequences)
    _write_manifest("preprocess", args, [args.input], outputs, summary, started)
    print(
        f"preprocess: kept {_fmt(summary['n_sequences'])} sequences"
        f" vocab={_fmt(summary['vocab_size'])}"
        f" dropped={_fmt(summary['dropped_short_sequences'])} -> {args.output}"
    )
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    corpus = _load_any_corpus(args.corpus)
    cfg = TrainConfig(
        k=args.k,
        rounds=args.rounds,
        kkt_tol=args.kkt_tol,
        init_decay=args.init_decay,
        support_epsilon=args.support_epsilon,
        weight_only=args.weight_only,
        prior_count=args.prior_count,
        seed=args.seed,
    )
    model, report = alternate_minimize(corpus, cfg, threads=args.threads)
    save_model(model, args.output)
    report_path = args.report or _json_stem(args.output) + ".report.jsonl"
    with open(report_path, "w", encoding="utf-8") as fh:
        fh.write(report.to_jsonl())
    final = report.records[-1]
    summary = {
        "k": cfg.k,
        "rounds": cfg.rounds,
        "log_likelihood": final.log_likelihood,
        "perplexity": final.perplexity,
    }
    _write_manifest("train", args, [args.corpus], [args.output, report_path], summary, started)
    print(
        f"train: k={_fmt(cfg.k)} rounds={_fmt(cfg.rounds)}"
        f" perplexity={_fmt(final.perplexity)} -> {args.output}"
    )
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    model = load_model(args.model)
    corpus = _align_corpus(_load_any_corpus(args.corpus), model.vocab)
    floor = EVALUATION_FLOOR if args.floor else None
    ll = log_likelihood(model, corpus, floor=floor)
    ppl = perplexity(model, corpus, floor=floor)
    doc = {
        "model": args.model,
        "corpus": args.corpus,
        "perplexity": ppl,
        "log_likelihood": ll.total,
        "scored_transitions": ll.scored_transitions,
        "impossible_transitions": ll.impossible_transitions,
        "floor": floor,
    }
    _write_json(doc, args.output)
    summary = {
        "perplexity": ppl,
        "impossible_transitions": ll.impossible_transitions,
    }
    _write_manifest("evaluate", args, [args.model, args.corpus], [args.output], summary, started)
    print(
        f"evaluate: perplexity={_fmt(ppl)}"
        f" impossible={_fmt(ll.impossible_transitions)} -> {args.output}"
    )
    return 0


def cmd_generate(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    model = load_model(args.model)
    start_token = args.start if args.start is not None else model.vocab.tokens[0]
    start = model.vocab.id(start_token)
    ids = generate(model, start, args.length, args.seed)
    tokens = decode_ids(model.vocab, ids)
    doc = {
        "model": args.model,
        "start": start_token,
        "length": args.length,
        "seed": args.seed,
        "tokens": tokens,
        "ids": [int(x) for x in ids],
    }
    _write_json(doc, args.output)
    _write_manifest(
        "generate", args, [args.model], [args.output], {"length": args.length}, started
    )
    print(" ".join(tokens))
    return 0


def cmd_analyze(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    sub = args.analyze_command
    if sub == "stationary":
        model = load_model(args.model)
        pi = stationary_distribution(model.P, tol=args.tol)
        doc = {"model": args.model, "tol": args.tol, "stationary": [float(p) for p in pi]}
        _write_json(doc, args.output)
        summary = {"stationary": doc["stationary"]}
        _write_manifest("analyze stationary", args, [args.model], [args.output], summary, started)
        print(f"analyze stationary: pi={_fmt(doc['stationary'])} -> {args.output}")
    elif sub == "mixing":
        model = load_model(args.model)
        t_mix = mixing_time(model.P, args.delta)
        doc = {"model": args.model, "delta": args.delta, "mixing_time": t_mix}
        _write_json(doc, args.output)
        summary = {"mixing_time": t_mix, "delta": args.delta}
        _write_manifest("analyze mixing", args, [args.model], [args.output], summary, started)
        print(
            f"analyze mixing: mixing_time={_fmt(t_mix)}"
            f" delta={_fmt(args.delta)} -> {args.output}"
        )
    elif sub == "exponent":
        if args.w is None and args.model is None:
            raise DataError("analyze exponent needs --w or --model")
        if args.w is not None:
            weights = [float(v) for v in args.w.split(",") if v.strip() != ""]
            w = HistoryDistribution.from_weights(weights)
            inputs = []
        else:
            w = load_model(args.model).w
            inputs = [args.model]
        trace = simulate_exponent_process(w, args.steps, args.seed)
        est = renewal_rate_estimate(trace, w)
        doc = {
            "w": [float(v) for v in w.weights],
            "t_max": args.steps,
            "seed": args.seed,
            "rate": est.rate,
            "predicted": est.predicted,
            "clt_statistic": est.clt_statistic,
        }
        _write_json(doc, args.output)
        outputs = [args.output]
        if args.trace_csv:
            export_trace_csv(trace, args.trace_csv)
            outputs.append(args.trace_csv)
        summary = {"rate": est.rate, "predicted": est.predicted}
        _write_manifest("analyze exponent", args, inputs, outputs, summary, started)
        print(
            f"analyze exponent: rate={_fmt(est.rate)}"
            f" predicted={_fmt(est.predicted)} -> {args.output}"
        )
    else:  # bound
        model = load_model(args.model)
        bound = lamp_mixing_bound(model.w, model.P, args.delta, args.epsilon, args.T)
        doc = {"model": args.model, **asdict(bound)}
        _write_json(doc, args.output)
        summary = {"bound": bound.bound, "confidence": bound.confidence}
        _write_manifest("analyze bound", args, [args.model], [args.output], summary, started)
        print(
            f"analyze bound: bound={_fmt(bound.bound)}"
            f" confidence={_fmt(bound.confidence)} -> {args.output}"
        )
    return 0


def cmd_baseline(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    corpus = _load_any_corpus(args.corpus)
    if args.smoothing == "naive":
        model = fit_naive_ngram(corpus, order=args.order)
    else:
        model = fit_kneser_ney(corpus, order=args.order, discount=args.discount)
    doc = {
        "corpus": args.corpus,
        "order": args.order,
        "smoothing": args.smoothing,
        "discount": model.discount,
        "train_perplexity": ngram_perplexity(model, corpus),
    }
    inputs = [args.corpus]
    if args.eval_corpus:
        held_out = _align_corpus(_load_any_corpus(args.eval_corpus), model.vocab)
        doc["eval_corpus"] = args.eval_corpus
        doc["eval_perplexity"] = ngram_perplexity(model, held_out)
        inputs.append(args.eval_corpus)
    _write_json(doc, args.output)
    outputs = [args.output]
    if args.model_output:
        save_ngram(model, args.model_output)
        outputs.append(args.model_output)
    summary = {"train_perplexity": doc["train_perplexity"]}
    if "eval_perplexity" in doc:
        summary["eval_perplexity"] = doc["eval_perplexity"]
    _write_manifest("baseline", args, inputs, outputs, summary, started)
    print(
        f"baseline: order={_fmt(args.order)} smoothing={args.smoothing}"
        f" train_perplexity={_fmt(doc['train_perplexity'])} -> {args.output}"
    )
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> _Parser:
    parser = _Parser(prog="lamp", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="clean a text corpus into a JSON cache")
    p.add_argument("input", help="text corpus: one sequence per line, whitespace tokens")
    p.add_argument("--output", required=True, help="corpus cache JSON path")
    p.add_argument("--limit", type=int, default=None, help="keep only the first N sequences")
    p.add_argument("--collapse-repeats", action="store_true")
    p.add_argument("--rare-min-count", type=int, default=0)
    p.add_argument("--rare-label", default="<RARE>")
    p.add_argument("--split", type=float, default=None, metavar="FRACTION",
                   help="also write .train/.test caches with this train fraction")
    p.add_argument("--split-seed", type=int, default=0)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="fit a model by alternating maximization")
    p.add_argument("corpus", help="corpus cache JSON or text file")
    p.add_argument("--output", required=True, help="model JSON path")
    p.add_argument("--k", type=int, required=True, help="number of history lags")
    p.add_argument("--rounds", type=float, default=1.5)
    p.add_argument("--weight-only", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--init-decay", type=float, default=0.8)
    p.add_argument("--support-epsilon", type=float, default=1e-3)
    p.add_argument("--prior-count", type=float, default=0.0)
    p.add_argument("--kkt-tol", type=float, default=1e-6)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--report", default=None, help="training report JSONL path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="perplexity of a model on a corpus")
    p.add_argument("model")
    p.add_argument("corpus")
    p.add_argument("--output", required=True, help="evaluation JSON path")
    p.add_argument("--floor", action="store_true",
                   help="smooth impossible transitions with the evaluation floor")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("generate", help="sample a sequence from a model")
    p.add_argument("model")
    p.add_argument("--output", required=True, help="generation JSON path")
    p.add_argument("--start", default=None, help="start token (default: first in vocab)")
    p.add_argument("--length", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("analyze", help="chain analyses on a trained model")
    asub = p.add_subparsers(dest="analyze_command", required=True)

    q = asub.add_parser("stationary", help="stationary distribution of P")
    q.add_argument("model")
    q.add_argument("--output", required=True)
    q.add_argument("--tol", type=float, default=1e-12)
    q.set_defaults(func=cmd_analyze)

    q = asub.add_parser("mixing", help="exact mixing time of P")
    q.add_argument("model")
    q.add_argument("--output", required=True)
    q.add_argument("--delta", type=float, default=0.01)
    q.set_defaults(func=cmd_analyze)

    q = asub.add_parser("exponent", help="simulate the exponent process")
    q.add_argument("--model", default=None, help="take lag weights from this model")
    q.add_argument("--w", default=None, help="comma-separated lag weights, e.g. 0.5,0.5")
    q.add_argument("--steps", type=int, default=100_000, help="horizon t_max")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--output", required=True)
    q.add_argument("--trace-csv", default=None, help="also export the trace as CSV")
    q.set_defaults(func=cmd_analyze)

    q = asub.add_parser("bound", help="high-probability mixing bound")
    q.add_argument("model")
    q.add_argument("--output", required=True)
    q.add_argument("--delta", type=float, default=0.01)
    q.add_argument("--epsilon", type=float, default=1.0)
    q.add_argument("--T", type=int, default=100)
    q.set_defaults(func=cmd_analyze)

    p = sub.add_parser("baseline", help="fit and score an n-gram baseline")
    p.add_argument("corpus")
    p.add_argument("--output", required=True, help="scores JSON path")
    p.add_argument("--order", type=int, required=True)
    p.add_argument("--smoothing", choices=("naive", "kneser_ney"), default="naive")
    p.add_argument("--discount", type=float, default=0.75)
    p.add_argument("--eval-corpus", default=None)
    p.add_argument("--model-output", default=None, help="also save the fitted model")
    p.set_defaults(func=cmd_baseline)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"lamp: numeric error: {exc}", file=sys.stderr)
        return 3
    except (DataError, OSError) as exc:
        print(f"lamp: data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
