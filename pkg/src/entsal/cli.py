"""Command-line entry point: reproducible experiment steps over the toolkit.

Every artifact-producing command writes its output atomically and drops a
manifest (<out>.manifest.json) recording the resolved configuration, seed,
input digests, and timing. Exit codes: 0 success, 2 usage or validation
problem, 1 unexpected runtime failure.

Heavy numeric imports happen inside the command handlers so --threads can cap
the BLAS thread pools before numpy is loaded; outputs are required to be
byte-identical regardless of the thread setting.
"""

from __future__ import annotations

import argparse
import datetime
import json
import logging
import os
import sys
import time

from . import __version__
from ._util import atomic_write_json, atomic_write_text, sha256_file

log = logging.getLogger("entsal")

PREDICT_METHODS = ("kesm", "frequency", "pagerank", "letor")


def _set_thread_caps(n: int) -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
        os.environ[var] = str(n)


def _manifest(command: str, args: argparse.Namespace, inputs: list[str],
              outputs: list[str], started: float, config: dict | None = None) -> dict:
    return {
        "toolkit": "entsal",
        "version": __version__,
        "command": command,
        "seed": getattr(args, "seed", None),
        "config": config if config is not None else {
            k: v for k, v in vars(args).items() if k not in ("func", "verbose")},
        "inputs": {path: sha256_file(path) for path in inputs if path},
        "outputs": outputs,
        "started_utc": datetime.datetime.fromtimestamp(
            started, tz=datetime.timezone.utc).isoformat(),
        "duration_seconds": round(time.time() - started, 3),
    }


def _write_manifest(primary_output: str, manifest: dict) -> None:
    atomic_write_json(primary_output + ".manifest.json", manifest)


# ---------------------------------------------------------------------------
# build-vocab

def cmd_build_vocab(args: argparse.Namespace) -> int:
    from . import corpus

    started = time.time()
    vocab = corpus.build_vocabulary(corpus.iter_raw_documents(args.docs),
                                    min_count=args.min_count)
    payload = {"format_version": 1, **vocab.to_dict()}
    atomic_write_text(args.out, json.dumps(payload) + "\n")
    _write_manifest(args.out, _manifest("build-vocab", args, [args.docs],
                                        [args.out], started))
    print(f"vocabulary: {len(vocab.word_symbols)} words, "
          f"{len(vocab.entity_symbols)} entities -> {args.out}")
    return 0


def _load_vocab(path: str):
    from .corpus import CorpusError, Vocabulary

    with open(path, "r", encoding="utf-8") as f:
        payload = json.load(f)
    if payload.get("format_version") != 1:
        raise CorpusError(f"unsupported vocabulary format_version "
                          f"{payload.get('format_version')!r}")
    return Vocabulary.from_dict(payload)


# ---------------------------------------------------------------------------
# gen-synthetic

def _load_structured_config(path: str) -> dict:
    if path.endswith(".json"):
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    try:
        import tomllib  # python >= 3.11
    except ModuleNotFoundError:
        import tomli as tomllib
    with open(path, "rb") as f:
        return tomllib.load(f)


def cmd_gen_synthetic(args: argparse.Namespace) -> int:
    from . import corpus

    started = time.time()
    spec_dict = _load_structured_config(args.spec) if args.spec else {}
    spec = corpus.SyntheticSpec.from_dict(spec_dict)
    generated = corpus.generate_synthetic_corpus(spec, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    outputs = []
    for name, records in (("train", generated.train), ("dev", generated.dev),
                          ("test", generated.test),
                          ("descriptions", generated.descriptions)):
        path = os.path.join(args.out, f"{name}.jsonl")
        corpus.write_jsonl(path, records)
        outputs.append(path)
    manifest_base = os.path.join(args.out, "synthetic")
    _write_manifest(manifest_base, _manifest(
        "gen-synthetic", args, [args.spec] if args.spec else [], outputs, started,
        config=vars(spec).copy()))
    print(f"synthetic corpus ({spec.topics} topics) -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# train

def _resolve_train_config(args: argparse.Namespace):
    from .salience import TrainConfig

    file_cfg = _load_structured_config(args.config) if args.config else {}
    unknown = set(file_cfg) - set(TrainConfig.__dataclass_fields__)
    if unknown:
        raise ValueError(f"train config: unknown fields {sorted(unknown)}")
    resolved = {}
    for name, field in TrainConfig.__dataclass_fields__.items():
        flag_value = getattr(args, name, None)
        if flag_value is not None:          # flags win over the config file
            resolved[name] = flag_value
        elif name in file_cfg:
            resolved[name] = file_cfg[name]
        else:
            resolved[name] = field.default
    return TrainConfig(**resolved)


def cmd_train(args: argparse.Namespace) -> int:
    from . import corpus, model, salience

    started = time.time()
    config = _resolve_train_config(args)
    vocab = _load_vocab(args.vocab)
    stats = corpus.EncodeStats()
    train_docs = corpus.encode_documents(corpus.iter_raw_documents(args.train),
                                         vocab, stats)
    dev_docs = corpus.encode_documents(corpus.iter_raw_documents(args.dev),
                                       vocab, stats)
    descriptions = None
    if args.desc:
        descriptions = corpus.load_descriptions(corpus.read_jsonl(args.desc), vocab)
    init_embeddings = None
    if args.init_emb:
        init_embeddings = salience.load_initial_embeddings(args.init_emb, vocab,
                                                           config.dim)

    result = salience.train_salience(train_docs, dev_docs, descriptions, vocab,
                                     config, init_embeddings=init_embeddings)
    model.save_checkpoint(args.out, result.params, result.bank, vocab)
    inputs = [p for p in (args.train, args.dev, args.desc, args.vocab,
                          args.init_emb, args.config) if p]
    manifest = _manifest("train", args, inputs, [args.out], started,
                         config=vars(config).copy())
    manifest["dev_p1_history"] = result.history
    manifest["best_dev_p1"] = result.best_dev_p1
    manifest["dropped_salient_labels"] = stats.dropped_salient_labels
    _write_manifest(args.out, manifest)
    print(f"trained: best dev P@1 = {result.best_dev_p1:.4f} -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# train-letor

def cmd_train_letor(args: argparse.Namespace) -> int:
    from . import baselines, corpus, model
    from ._util import stable_hash

    started = time.time()
    params, _bank, vocab = model.load_checkpoint(args.model)
    docs = corpus.encode_documents(corpus.iter_raw_documents(args.train), vocab)
    pairs = []
    for doc in docs:
        feats = baselines.letor_features(doc, params)
        for pair in corpus.make_salience_pairs(
                doc, seed=stable_hash(args.seed, "letor", doc.doc_id) % (2 ** 32),
                max_pairs=args.max_pairs):
            pairs.append((feats[pair.positive_entity].as_array(),
                          feats[pair.negative_entity].as_array()))
    ranker = baselines.train_linear_pairwise(
        pairs, baselines.LETOR_FEATURE_NAMES,
        baselines.LinearTrainConfig(seed=args.seed))
    atomic_write_text(args.out, json.dumps({"format_version": 1,
                                            **ranker.to_dict()}) + "\n")
    _write_manifest(args.out, _manifest("train-letor", args,
                                        [args.train, args.model], [args.out], started))
    print(f"letor ranker trained on {len(pairs)} pairs -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# predict

def _predict_frequency_raw(raw_docs) -> list[tuple[str, str, float]]:
    rows = []
    for rec in raw_docs:
        counts: dict[str, int] = {}
        for ent in rec["entities"]:
            if ent["positions"]:
                counts[ent["id"]] = counts.get(ent["id"], 0) + len(ent["positions"])
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        rows.extend((rec["doc_id"], eid, float(c)) for eid, c in ranked)
    return rows


def cmd_predict(args: argparse.Namespace) -> int:
    from . import baselines, corpus, model, salience

    started = time.time()
    rows: list[tuple[str, str, float]] = []
    inputs = [args.docs]

    if args.method == "frequency":
        rows = _predict_frequency_raw(corpus.iter_raw_documents(args.docs))
    else:
        if not args.model:
            raise ValueError(f"--method {args.method} requires --model")
        inputs.append(args.model)
        params, bank, vocab = model.load_checkpoint(args.model)
        descriptions = None
        if args.desc:
            inputs.append(args.desc)
            descriptions = corpus.load_descriptions(corpus.read_jsonl(args.desc), vocab)
        docs = corpus.encode_documents(corpus.iter_raw_documents(args.docs), vocab)

        def decode(e: int) -> str:
            return vocab.symbol_of(e)[1]

        if args.method == "kesm":
            for doc in docs:
                for e, score in salience.rank_entities(doc, descriptions, params, bank):
                    rows.append((doc.doc_id, decode(e), score))
        elif args.method == "pagerank":
            alpha = args.alpha
            if args.dev:
                inputs.append(args.dev)
                dev_docs = corpus.encode_documents(
                    corpus.iter_raw_documents(args.dev), vocab)
                alpha = baselines.fit_pagerank_alpha(dev_docs, params, descriptions)
                log.info("pagerank alpha fitted on dev: %.1f", alpha)
            for doc in docs:
                if not doc.entity_mentions:
                    continue
                scores = baselines.pagerank_scores(doc, params, descriptions, alpha)
                for e, score in baselines.rank_by_score(scores):
                    rows.append((doc.doc_id, decode(e), score))
        elif args.method == "letor":
            if not args.letor:
                raise ValueError("--method letor requires --letor params file")
            inputs.append(args.letor)
            with open(args.letor, "r", encoding="utf-8") as f:
                ranker = baselines.LinearRankerParams.from_dict(json.load(f))
            for doc in docs:
                feats = baselines.letor_features(doc, params)
                scores = {e: baselines.linear_score(ranker, fv.as_dict())
                          for e, fv in feats.items()}
                for e, score in baselines.rank_by_score(scores):
                    rows.append((doc.doc_id, decode(e), score))

    atomic_write_text(args.out,
                      "".join(f"{d}\t{e}\t{s!r}\n" for d, e, s in rows))
    _write_manifest(args.out, _manifest("predict", args, inputs, [args.out], started))
    print(f"predictions ({args.method}) for {len({r[0] for r in rows})} docs "
          f"-> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# eval

def _read_predictions(path: str) -> dict[str, list[str]]:
    rankings: dict[str, list[str]] = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 tab-separated fields")
            doc_id, entity_id, _score = parts
            rankings.setdefault(doc_id, []).append(entity_id)
    return rankings


def _emit_report(text: str, out: str | None, args, command: str,
                 inputs: list[str], started: float) -> None:
    if out:
        atomic_write_text(out, text)
        _write_manifest(out, _manifest(command, args, inputs, [out], started))
    else:
        sys.stdout.write(text)


def cmd_eval_salience(args: argparse.Namespace) -> int:
    from . import corpus, evaluation

    started = time.time()
    if not 1 <= len(args.pred) <= 2:
        raise ValueError("eval salience takes one or two --pred files")
    relevant = {}
    for rec in corpus.iter_raw_documents(args.docs):
        relevant[rec["doc_id"]] = set(rec["salient"])

    results = []
    for path in args.pred:
        rankings = _read_predictions(path)
        per_unit, means, skipped = evaluation.evaluate_salience_rankings(
            rankings, relevant)
        results.append((path, per_unit, means, skipped))

    if len(results) == 1:
        path, per_unit, means, skipped = results[0]
        aggregates = [(m, means[m]) for m in evaluation.SALIENCE_METRICS]
        aggregates += [("units", len(per_unit)), ("skipped_docs", skipped)]
        text = evaluation.tsv_report(per_unit, aggregates)
    else:
        (path_a, per_a, means_a, _), (path_b, per_b, means_b, _) = results
        common = sorted(set(per_a) & set(per_b))
        aggregates = [("pred1", path_a), ("pred2", path_b)]
        for m in evaluation.SALIENCE_METRICS:
            a = {u: per_a[u][m] for u in common}
            b = {u: per_b[u][m] for u in common}
            w, t, l = evaluation.win_tie_loss(a, b)
            p = evaluation.permutation_test([a[u] - b[u] for u in common],
                                            permutations=args.permutations,
                                            seed=args.seed)
            aggregates += [(f"{m}/pred1", means_a[m]), (f"{m}/pred2", means_b[m]),
                           (f"{m}/win_tie_loss", f"{w}/{t}/{l}"),
                           (f"{m}/p_value", p)]
        aggregates.append(("units", len(common)))
        text = evaluation.tsv_report({}, aggregates)

    _emit_report(text, args.out, args, "eval-salience",
                 [args.docs, *args.pred], started)
    return 0


def cmd_eval_search(args: argparse.Namespace) -> int:
    from . import evaluation, ranking

    started = time.time()
    if not 1 <= len(args.run) <= 2:
        raise ValueError("eval search takes one or two --run files")
    qrels = ranking.load_qrels(args.qrels)

    results = []
    for path in args.run:
        entries = ranking.load_run(path)
        run: dict[str, list[str]] = {}
        for e in sorted(entries, key=lambda e: e.rank):
            run.setdefault(e.query_id, []).append(e.doc_id)
        per_unit, means, skipped = evaluation.evaluate_search_run(run, qrels,
                                                                  k=args.k)
        if skipped:
            log.warning("%s: %d queries skipped (missing or positive-free qrels)",
                        path, skipped)
        results.append((path, per_unit, means, skipped))

    metrics = (f"NDCG@{args.k}", f"ERR@{args.k}")
    if len(results) == 1:
        path, per_unit, means, skipped = results[0]
        aggregates = [(m, means[m]) for m in metrics]
        aggregates += [("units", len(per_unit)), ("skipped_queries", skipped)]
        text = evaluation.tsv_report(per_unit, aggregates)
    else:
        (path_a, per_a, means_a, sk_a), (path_b, per_b, means_b, sk_b) = results
        common = sorted(set(per_a) & set(per_b))
        aggregates = [("run1", path_a), ("run2", path_b)]
        for m in metrics:
            a = {u: per_a[u][m] for u in common}
            b = {u: per_b[u][m] for u in common}
            w, t, l = evaluation.win_tie_loss(a, b)
            p = evaluation.permutation_test([a[u] - b[u] for u in common],
                                            permutations=args.permutations,
                                            seed=args.seed)
            aggregates += [(f"{m}/run1", means_a[m]), (f"{m}/run2", means_b[m]),
                           (f"{m}/win_tie_loss", f"{w}/{t}/{l}"),
                           (f"{m}/p_value", p)]
        aggregates += [("units", len(common)),
                       ("skipped_queries", f"{sk_a}/{sk_b}")]
        text = evaluation.tsv_report({}, aggregates)

    _emit_report(text, args.out, args, "eval-search", [args.qrels, *args.run],
                 started)
    return 0


# ---------------------------------------------------------------------------
# features / rerank

def cmd_features(args: argparse.Namespace) -> int:
    import io

    from . import corpus, model, ranking

    started = time.time()
    params, bank, vocab = model.load_checkpoint(args.model)
    descriptions = None
    if args.desc:
        descriptions = corpus.load_descriptions(corpus.read_jsonl(args.desc), vocab)
    queries = {}
    for rec in corpus.read_jsonl(args.queries):
        q = ranking.encode_query(rec, vocab)
        queries[q.query_id] = q
    docs = {}
    for rec in corpus.iter_raw_documents(args.docs):
        doc = corpus.encode_document(rec, vocab)
        docs[doc.doc_id] = doc
    base_run = ranking.load_run(args.base)
    qrels = ranking.load_qrels(args.qrels) if args.qrels else None

    instances = ranking.extract_features_for_run(
        base_run, queries, docs, descriptions, params, bank, qrels,
        floor=args.floor)
    buf = io.StringIO()
    ranking.export_features(instances, buf)
    atomic_write_text(args.out, buf.getvalue())
    inputs = [p for p in (args.model, args.queries, args.docs, args.base,
                          args.qrels, args.desc) if p]
    _write_manifest(args.out, _manifest("features", args, inputs, [args.out],
                                        started))
    print(f"{len(instances)} feature rows -> {args.out}")
    return 0


def cmd_rerank(args: argparse.Namespace) -> int:
    from . import ranking
    from .baselines import LinearTrainConfig

    started = time.time()
    instances = ranking.parse_features(args.features)
    base_run = ranking.load_run(args.base)
    ranker = ranking.train_ranker(instances, folds=args.folds,
                                  config=LinearTrainConfig(seed=args.seed))
    scores = ranker.score_instances(instances)
    reranked = ranking.rerank_run(base_run, scores, tag=args.tag)
    ranking.write_run(args.out, reranked)
    _write_manifest(args.out, _manifest("rerank", args,
                                        [args.features, args.base], [args.out],
                                        started))
    print(f"re-ranked {len(reranked)} entries over {args.folds} folds -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="entsal",
        description="Entity salience estimation and search re-ranking toolkit.")
    parser.add_argument("--version", action="version",
                        version=f"entsal {__version__} (checkpoint format 1)")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap numeric thread pools (outputs are identical "
                             "regardless)")
    parser.add_argument("--verbose", action="store_true", help="info-level logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-vocab", help="build a vocabulary from documents")
    p.add_argument("--docs", required=True)
    p.add_argument("--min-count", type=int, default=2, dest="min_count")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("gen-synthetic", help="generate the synthetic topical corpus")
    p.add_argument("--spec", default=None, help="TOML or JSON generator config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("train", help="train the salience model")
    p.add_argument("--train", required=True)
    p.add_argument("--dev", required=True)
    p.add_argument("--desc", default=None)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="TOML/JSON config; flags win")
    p.add_argument("--init-emb", default=None, dest="init_emb",
                   help="JSONL symbol/kind/vector initial embeddings")
    p.add_argument("--seed", type=int, default=None, help="default 0")
    p.add_argument("--dim", type=int, default=None, help="default 128")
    p.add_argument("--batch-size", type=int, default=None, dest="batch_size",
                   help="default 64")
    p.add_argument("--lr", type=float, default=None, help="default 1e-3")
    p.add_argument("--patience", type=int, default=None, help="default 3")
    p.add_argument("--eval-interval", type=int, default=None, dest="eval_interval",
                   help="batches between dev evaluations; default 1000")
    p.add_argument("--max-epochs", type=int, default=None, dest="max_epochs",
                   help="default 5")
    p.add_argument("--max-pairs", type=int, default=None, dest="max_pairs",
                   help="per-document pair cap; default 256")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-letor", help="train the feature baseline ranker")
    p.add_argument("--train", required=True)
    p.add_argument("--model", required=True, help="checkpoint providing embeddings")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-pairs", type=int, default=256, dest="max_pairs")
    p.set_defaults(func=cmd_train_letor)

    p = sub.add_parser("predict", help="rank entities per document")
    p.add_argument("--docs", required=True)
    p.add_argument("--method", required=True, choices=PREDICT_METHODS)
    p.add_argument("--model", default=None)
    p.add_argument("--desc", default=None)
    p.add_argument("--letor", default=None, help="letor params from train-letor")
    p.add_argument("--alpha", type=float, default=0.1,
                   help="pagerank mixing weight; overridden by --dev grid fit")
    p.add_argument("--dev", default=None,
                   help="fit pagerank alpha by P@1 on these documents")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="evaluate predictions or runs")
    eval_sub = p.add_subparsers(dest="eval_kind", required=True)

    ps = eval_sub.add_parser("salience", help="P/R@{1,5} against salient labels")
    ps.add_argument("--docs", required=True)
    ps.add_argument("--pred", action="append", required=True,
                    help="prediction TSV; give twice to compare")
    ps.add_argument("--out", default=None, help="report path (default stdout)")
    ps.add_argument("--permutations", type=int, default=10000)
    ps.add_argument("--seed", type=int, default=0)
    ps.set_defaults(func=cmd_eval_salience)

    ps = eval_sub.add_parser("search", help="NDCG@20 / ERR@20 against qrels")
    ps.add_argument("--qrels", required=True)
    ps.add_argument("--run", action="append", required=True,
                    help="TREC run; give twice to compare")
    ps.add_argument("--k", type=int, default=20)
    ps.add_argument("--out", default=None)
    ps.add_argument("--permutations", type=int, default=10000)
    ps.add_argument("--seed", type=int, default=0)
    ps.set_defaults(func=cmd_eval_search)

    p = sub.add_parser("features", help="extract salience ranking features")
    p.add_argument("--model", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--docs", required=True)
    p.add_argument("--base", required=True, help="base TREC run to re-rank")
    p.add_argument("--qrels", default=None)
    p.add_argument("--desc", default=None)
    p.add_argument("--floor", type=float, default=1e-10)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("rerank", help="cross-validated re-ranking of a base run")
    p.add_argument("--features", required=True)
    p.add_argument("--base", required=True)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tag", default="entsal")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rerank)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return 2
        _set_thread_caps(args.threads)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception:   # noqa: BLE001 - runtime failure contract
        import traceback

        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
