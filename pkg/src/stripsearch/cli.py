"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data or artifact error,
3 external-service error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from collections.abc import Sequence
from dataclasses import replace
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .bench import (
    BenchmarkCase,
    RerankCase,
    audit_pools,
    build_embedding_benchmark,
    build_rerank_benchmark,
    evaluate_ranks,
    stability_report,
    subsample_evaluator,
)
from .context import DEFAULT_BUDGET, MODES, ScoreParams, informative_score, select_context
from .corpus import (
    Corpus,
    DescriptionLabel,
    SourceFunction,
    binary_filter,
    dedup,
    ingest_binary,
    ingest_source,
    read_jsonl,
    source_filter,
    write_jsonl,
)
from .embedding import LinearEmbedder, Triple, train_embedder
from .index import RankedList, VectorIndex
from .llm import ClientConfig, LLMClient, ReplyParseError, ServiceError, llm_generate_description, llm_grade_description
from .optim import TrainConfig
from .pipeline import Pipeline, PipelineConfig, build_index, evaluate_system
from .reranker import LinearReranker, RerankSample, build_rerank_samples, rerank, train_reranker
from .sampler import ELIGIBLE_GRADES, DataPair, DescriptionSimilarity, SamplerConfig, build_pairs, descriptions_by_function

log = logging.getLogger("stripsearch")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_SERVICE = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse's default exit code is 2
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _emit(obj: Any) -> None:
    print(json.dumps(obj, ensure_ascii=False))


def _load_descriptions(path: str) -> list[DescriptionLabel]:
    return [DescriptionLabel.from_json(o) for o in read_jsonl(path)]


def _load_sources(path: str) -> list[SourceFunction]:
    return [SourceFunction.from_json(o) for o in read_jsonl(path)]


def _load_pairs(path: str) -> list[DataPair]:
    return [DataPair.from_json(o) for o in read_jsonl(path)]


def _load_cases(path: str) -> list[BenchmarkCase | RerankCase]:
    out: list[BenchmarkCase | RerankCase] = []
    for o in read_jsonl(path):
        out.append(RerankCase.from_json(o) if "candidate_ids" in o else BenchmarkCase.from_json(o))
    return out


def _ints(text: str) -> list[int]:
    try:
        vals = [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from exc
    if not vals or min(vals) < 1:
        raise UsageError("k values must be positive integers")
    return vals


def _write_tsv(path: Path, rows: Sequence[dict[str, Any]]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fields: list[str] = []
    for row in rows:
        fields.extend(k for k in row if k not in fields)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fields, delimiter="\t", lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def _train_cfg(args: argparse.Namespace, base: TrainConfig) -> TrainConfig:
    updates = {}
    for name in ("learning_rate", "lr_min", "epochs", "batch_size", "temperature", "seed"):
        val = getattr(args, name, None)
        if val is not None:
            updates[name] = val
    return replace(base, **updates)


def _add_train_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--lr-min", dest="lr_min", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--seed", type=int)


def _flat_metrics(report) -> dict[str, Any]:
    return {**report.metrics(), "n_queries": report.n_queries, "elapsed_s": report.elapsed}


# ---------------------------------------------------------------------------
# corpus
# ---------------------------------------------------------------------------


def cmd_corpus_ingest(args: argparse.Namespace) -> int:
    rows = list(read_jsonl(args.raw))
    if args.kind == "source":
        n = write_jsonl(args.out, (f.to_json() for f in ingest_source(rows)))
    else:
        n = write_jsonl(args.out, (r.to_json() for r in ingest_binary(rows)))
    log.info("wrote %d records to %s", n, args.out)
    return EXIT_OK


def cmd_corpus_filter(args: argparse.Namespace) -> int:
    reasons: dict[str, int] = {}
    kept = []
    if args.kind == "source":
        items = _load_sources(args.input)
        verdicts = [(f, source_filter(f)) for f in items]
    else:
        items = list(Corpus.load(args.input))
        verdicts = [(f, binary_filter(f)) for f in items]
    for f, v in verdicts:
        if v.keep:
            kept.append(f)
        else:
            reasons[v.reason] = reasons.get(v.reason, 0) + 1
    write_jsonl(args.out, (f.to_json() for f in kept))
    _emit({"input": len(items), "kept": len(kept), "dropped": reasons})
    return EXIT_OK


def cmd_corpus_dedup(args: argparse.Namespace) -> int:
    corpus = Corpus.load(args.input)
    kept = dedup(list(corpus), args.threshold, args.num_hashes, args.seed)
    write_jsonl(args.out, (corpus[i].to_json() for i in kept))
    _emit({"input": len(corpus), "kept": len(kept), "dropped": len(corpus) - len(kept)})
    return EXIT_OK


# ---------------------------------------------------------------------------
# context
# ---------------------------------------------------------------------------


def _params(args: argparse.Namespace) -> ScoreParams:
    return ScoreParams(beta=args.beta, k=args.k)


def cmd_context_score(args: argparse.Namespace) -> int:
    corpus = Corpus.load(args.corpus)
    ids = args.id or corpus.ids()
    for fid in ids:
        if fid not in corpus:
            raise KeyError(f"function {fid!r} not in corpus")
        _emit({"id": fid, "score": informative_score(corpus[fid], corpus, _params(args))})
    return EXIT_OK


def cmd_context_select(args: argparse.Namespace) -> int:
    corpus = Corpus.load(args.corpus)
    if args.id not in corpus:
        raise KeyError(f"function {args.id!r} not in corpus")
    _emit(select_context(corpus[args.id], corpus, _params(args), args.mode, args.seed).to_json())
    return EXIT_OK


# ---------------------------------------------------------------------------
# sample
# ---------------------------------------------------------------------------


def cmd_sample_pairs(args: argparse.Namespace) -> int:
    corpus = Corpus.load(args.corpus)
    cfg = SamplerConfig(args.threshold, args.negatives, args.mining_pool, args.seed, args.described_only)
    build = build_pairs(corpus, _load_descriptions(args.descriptions), cfg)
    write_jsonl(args.out, (p.to_json() for p in build.pairs))
    _emit(
        {
            "pairs": len(build.pairs),
            "with_hard_negative": sum(p.hard_negative_id is not None for p in build.pairs),
            "skipped_grade": build.skipped_grade,
            "skipped_unresolved": build.skipped_unresolved,
            "skipped_insufficient": build.skipped_insufficient,
        }
    )
    return EXIT_OK


def cmd_sample_rerank(args: argparse.Namespace) -> int:
    corpus = Corpus.load(args.corpus)
    queries = _queries(_load_descriptions(args.descriptions))
    samples = build_rerank_samples(
        _load_pairs(args.pairs), corpus, queries, args.mode, _params(args), args.negatives_per_positive, args.seed, args.budget
    )
    write_jsonl(args.out, (s._asdict() for s in samples))
    _emit({"samples": len(samples), "positives": sum(s.label for s in samples)})
    return EXIT_OK


# ---------------------------------------------------------------------------
# embed / rerank models
# ---------------------------------------------------------------------------


def _queries(descriptions: Sequence[DescriptionLabel]) -> dict[str, str]:
    return {d.id: d.text_en for d in descriptions}


def cmd_embed_train(args: argparse.Namespace) -> int:
    corpus = Corpus.load(args.corpus)
    queries = _queries(_load_descriptions(args.descriptions))
    triples = [
        Triple(queries[p.query_id], corpus[p.positive_id].pseudocode, corpus[p.hard_negative_id].pseudocode)
        for p in _load_pairs(args.pairs)
        if p.hard_negative_id is not None
    ]
    cfg = _train_cfg(args, TrainConfig())
    res = train_embedder(triples, cfg, feature_dim=args.feature_dim, dim=args.dim, hash_seed=args.hash_seed)
    res.model.save(args.out)
    _emit({"triples": len(triples), "epoch_losses": res.epoch_losses, "out": args.out})
    return EXIT_OK


def cmd_embed_encode(args: argparse.Namespace) -> int:
    model = LinearEmbedder.load(args.model)
    if args.input:
        if not args.out:
            raise UsageError("--in requires --out")
        corpus = Corpus.load(args.input)
        index = build_index(model, corpus)
        n = write_jsonl(args.out, ({"id": fid, "vector": index.vector(fid).tolist()} for fid in index.ids))
        _emit({"encoded": n, "dim": model.dim, "out": args.out})
        return EXIT_OK
    if not args.text:
        raise UsageError("give --text or --in")
    for text in args.text:
        _emit({"text": text, "vector": model.embed_many([text])[0].tolist()})
    return EXIT_OK


def cmd_rerank_train(args: argparse.Namespace) -> int:
    if args.samples:
        samples = [RerankSample(o["query"], o["assembled_input"], int(o["label"])) for o in read_jsonl(args.samples)]
    else:
        if not (args.corpus and args.descriptions and args.pairs):
            raise UsageError("give --samples, or all of --corpus, --descriptions and --pairs")
        corpus = Corpus.load(args.corpus)
        queries = _queries(_load_descriptions(args.descriptions))
        samples = build_rerank_samples(
            _load_pairs(args.pairs), corpus, queries, args.mode, _params(args), args.negatives_per_positive,
            args.seed or 0, args.budget,
        )
    cfg = _train_cfg(args, TrainConfig(epochs=3))
    res = train_reranker(samples, cfg, feature_dim=args.feature_dim, hash_seed=args.hash_seed)
    res.model.save(args.out)
    _emit(
        {
            "samples": len(samples),
            "initial_loss": res.initial_loss,
            "final_loss": res.final_loss,
            "epoch_losses": res.epoch_losses,
            "out": args.out,
        }
    )
    return EXIT_OK


def cmd_rerank_run(args: argparse.Namespace) -> int:
    model = LinearReranker.load(args.model)
    corpus = Corpus.load(args.corpus)
    raw = args.candidates.strip()
    if raw.startswith("["):
        ids = [str(x["id"]) if isinstance(x, dict) else str(x) for x in json.loads(raw)]
    elif Path(raw).is_file():
        ids = [str(x["id"]) if isinstance(x, dict) else str(x) for x in json.loads(Path(raw).read_text())]
    else:
        ids = [fid for fid in raw.split(",") if fid]
    candidates = RankedList([(fid, 0.0) for fid in ids])
    out = rerank(model, args.query, candidates, corpus, args.mode, _params(args), args.seed, args.budget)
    _emit(out.to_json())
    return EXIT_OK


# ---------------------------------------------------------------------------
# index
# ---------------------------------------------------------------------------


def cmd_index_build(args: argparse.Namespace) -> int:
    if args.vectors:
        index = VectorIndex.build([(str(o["id"]), np.asarray(o["vector"], dtype=float)) for o in read_jsonl(args.vectors)])
        index.save(args.out)
        _emit({"count": len(index), "dim": index.dim, "out": args.out})
        return EXIT_OK
    if not (args.model and args.corpus):
        raise UsageError("give --vectors, or both --model and --corpus")
    model = LinearEmbedder.load(args.model)
    corpus = Corpus.load(args.corpus)
    ids = [line.strip() for line in Path(args.ids).read_text().splitlines() if line.strip()] if args.ids else None
    index = build_index(model, corpus, ids)
    index.save(args.out)
    _emit({"count": len(index), "dim": index.dim, "out": args.out})
    return EXIT_OK


def cmd_index_search(args: argparse.Namespace) -> int:
    index = VectorIndex.load(args.index)
    if args.query_vec:
        vec = np.asarray(json.loads(Path(args.query_vec).read_text()), dtype=float)
    elif args.model and args.query:
        vec = LinearEmbedder.load(args.model).embed_many([args.query])[0]
    else:
        raise UsageError("give --query-vec, or both --model and --query")
    _emit(index.search(vec, args.top_n).to_json())
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------


def cmd_bench_build_embed(args: argparse.Namespace) -> int:
    corpus = Corpus.load(args.corpus)
    descriptions = _load_descriptions(args.descriptions)
    texts = descriptions_by_function(corpus, descriptions)
    by_source: dict[str, list[str]] = {}
    for rec in corpus:
        if rec.source_id is not None:
            by_source.setdefault(rec.source_id, []).append(rec.id)
    pairs = []
    for d in descriptions:
        if d.grade not in ELIGIBLE_GRADES or d.id != d.function_ref:
            continue
        positives = [d.function_ref] if d.function_ref in corpus else by_source.get(d.function_ref, [])
        if positives:
            pairs.append((d.text_en, positives[0]))
    order = np.random.default_rng(args.seed).permutation(len(pairs))
    pairs = [pairs[int(i)] for i in order[: args.limit]] if args.limit else [pairs[int(i)] for i in order]
    build = build_embedding_benchmark(pairs, corpus.ids(), texts, args.k, args.rho, args.seed)
    write_jsonl(args.out, (c.to_json() for c in build.cases))
    if args.rejects:
        write_jsonl(args.rejects, build.rejects)
    summary: dict[str, Any] = {"cases": len(build.cases), "rejects": len(build.rejects)}
    if args.audit:
        summary["audit_violations"] = len(audit_pools(build.cases, texts, DescriptionSimilarity(), args.rho))
    _emit(summary)
    return EXIT_OK


def cmd_bench_build_rerank(args: argparse.Namespace) -> int:
    model = LinearEmbedder.load(args.model)
    corpus = Corpus.load(args.corpus)
    cases = [c for c in _load_cases(args.bench) if isinstance(c, BenchmarkCase)]
    pool_ids = sorted({fid for c in cases for fid in c.pool_ids})
    index = build_index(model, corpus, pool_ids)
    vectors = {fid: index.vector(fid) for fid in index.ids}
    build = build_rerank_benchmark(cases, lambda q: model.embed_many([q])[0], vectors, args.n)
    write_jsonl(args.out, (c.to_json() for c in build.cases))
    _emit(
        {
            "cases": len(build.cases),
            "excluded_top1": build.excluded_top1,
            "excluded_missed": build.excluded_missed,
            "excluded_small_pool": build.excluded_small_pool,
        }
    )
    return EXIT_OK


def _pipeline_from(args: argparse.Namespace) -> Pipeline:
    cfg = PipelineConfig.from_file(args.config)
    return Pipeline.from_config(cfg)


def _ensure_pool_index(pipe: Pipeline, cases: Sequence[BenchmarkCase | RerankCase]) -> None:
    """Make sure every pool member is indexed; embed missing ones on the fly."""
    needed = {fid for c in cases if isinstance(c, BenchmarkCase) for fid in c.pool_ids}
    missing = sorted(needed - set(pipe.index.ids))
    if not missing:
        return
    extra = build_index(pipe.embedder, pipe.corpus, missing)
    pairs = [(fid, pipe.index.vector(fid)) for fid in pipe.index.ids] + [(fid, extra.vector(fid)) for fid in extra.ids]
    pipe.index = VectorIndex.build(pairs, pipe.embedder.dim if hasattr(pipe.embedder, "dim") else None)


def cmd_bench_run(args: argparse.Namespace) -> int:
    ks = _ints(args.ks)
    mrr_ks = _ints(args.mrr_ks)
    pipe = _pipeline_from(args)
    cases = _load_cases(args.bench)
    _ensure_pool_index(pipe, cases)
    systems = {"embedding_only": replace_scorer(pipe, None)}
    if pipe.scorer is not None:
        systems["two_stage"] = pipe
    rows = []
    reports = {}
    for name, p in systems.items():
        report = evaluate_system(p, cases, ks, mrr_ks, workers=args.workers)
        reports[name] = report
        rows.append({"system": name, **_flat_metrics(report)})
    out = Path(args.out)
    _write_tsv(out, rows)
    if args.figures:
        from .plotting import plot_metric_bars

        fig = plot_metric_bars({n: r.metrics() for n, r in reports.items()}, out.with_suffix(".png"))
        log.info("figure written to %s", fig)
    for row in rows:
        _emit(row)
    return EXIT_OK


def replace_scorer(pipe: Pipeline, scorer) -> Pipeline:
    return Pipeline(pipe.cfg, pipe.embedder, pipe.index, pipe.corpus, scorer)


def cmd_bench_stability(args: argparse.Namespace) -> int:
    pipe = _pipeline_from(args)
    cases = _load_cases(args.bench)
    _ensure_pool_index(pipe, cases)
    base = evaluate_system(pipe, cases)
    rep = stability_report(subsample_evaluator(base.ranks, args.fraction), args.trials, args.seed)
    out = Path(args.out)
    rows = [{"trial": i + 1, **t} for i, t in enumerate(rep.trials)]
    rows.append({"trial": "std_pct", **rep.std_pct})
    rows.append({"trial": "mean_pct", **rep.mean_pct})
    _write_tsv(out, rows)
    if args.figures:
        from .plotting import plot_stability

        plot_stability(rep.trials, out.with_suffix(".png"))
    _emit(rep.to_json())
    return EXIT_OK


def cmd_bench_ablation(args: argparse.Namespace) -> int:
    from .experiment import ExperimentConfig, ablation
    from .synthetic import SyntheticConfig

    cfg = ExperimentConfig(synth=SyntheticConfig(n_functions=args.n_functions, seed=args.seed), seed=args.seed,
                           n_queries=args.queries, pool_size=args.pool)
    seeds = [args.seed + i for i in range(args.seeds)]
    res = ablation(cfg, seeds)
    out = Path(args.out)
    rows = [{"mode": m, "mean_rec@1": float(np.mean(v)), **{f"seed{s}": x for s, x in zip(seeds, v)}} for m, v in res.rec1.items()]
    _write_tsv(out, rows)
    if args.figures:
        from .plotting import plot_ablation

        plot_ablation(res.rec1, out.with_suffix(".png"))
    _emit(res.to_json())
    return EXIT_OK


# ---------------------------------------------------------------------------
# search / eval
# ---------------------------------------------------------------------------


def cmd_search(args: argparse.Namespace) -> int:
    pipe = _pipeline_from(args)
    _emit(pipe.search(args.query).to_json())
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    pipe = _pipeline_from(args)
    cases = _load_cases(args.bench)
    _ensure_pool_index(pipe, cases)
    report = evaluate_system(pipe, cases, workers=args.workers)
    _emit(report.to_json())
    return EXIT_OK


# ---------------------------------------------------------------------------
# synth (LLM) and synthetic corpora
# ---------------------------------------------------------------------------


def _client(args: argparse.Namespace) -> LLMClient:
    return LLMClient(ClientConfig(args.endpoint, timeout=args.timeout, max_retries=args.retries, max_in_flight=args.max_in_flight))


def cmd_synth_describe(args: argparse.Namespace) -> int:
    from concurrent.futures import ThreadPoolExecutor

    client = _client(args)
    sources = _load_sources(args.sources)
    with ThreadPoolExecutor(max_workers=args.max_in_flight) as pool:
        labels = list(pool.map(lambda fn: llm_generate_description(client, fn), sources))
    write_jsonl(args.out, (d.to_json() for d in labels))
    _emit({"described": len(labels)})
    return EXIT_OK


def cmd_synth_grade(args: argparse.Namespace) -> int:
    from concurrent.futures import ThreadPoolExecutor

    client = _client(args)
    sources = {s.id: s for s in _load_sources(args.sources)}
    labels = _load_descriptions(args.descriptions)
    for d in labels:
        if d.function_ref not in sources:
            raise KeyError(f"description {d.id!r} refers to unknown source function {d.function_ref!r}")

    def grade(d: DescriptionLabel) -> DescriptionLabel:
        letter, _ = llm_grade_description(client, sources[d.function_ref], d)
        return replace(d, grade=letter)

    with ThreadPoolExecutor(max_workers=args.max_in_flight) as pool:
        graded = list(pool.map(grade, labels))
    kept = [d for d in graded if d.grade in ELIGIBLE_GRADES] if args.keep_ab else graded
    write_jsonl(args.out, (d.to_json() for d in kept))
    counts = {g: sum(d.grade == g for d in graded) for g in "ABCD"}
    _emit({"graded": len(graded), "written": len(kept), "grades": counts})
    return EXIT_OK


def cmd_synthetic(args: argparse.Namespace) -> int:
    from .synthetic import SyntheticConfig, generate

    cfg = SyntheticConfig(
        n_functions=args.n_functions,
        seed=args.seed,
        lexical_overlap=args.overlap,
        with_callees=not args.no_callees,
        exact_duplicates=args.duplicates,
        rephrasings=args.rephrasings,
    )
    data = generate(cfg)
    out = Path(args.out_dir)
    data.corpus.dump(out / "corpus.jsonl")
    write_jsonl(out / "sources.jsonl", (s.to_json() for s in data.sources))
    write_jsonl(out / "descriptions.jsonl", (d.to_json() for d in data.descriptions))
    (out / "train_sources.txt").write_text("\n".join(data.train_sources) + "\n")
    (out / "test_sources.txt").write_text("\n".join(data.test_sources) + "\n")
    _emit({"functions": len(data.corpus), "sources": len(data.sources), "descriptions": len(data.descriptions), "out": str(out)})
    return EXIT_OK


def cmd_experiment(args: argparse.Namespace) -> int:
    from .experiment import ExperimentConfig, run_experiment
    from .plotting import plot_losses, plot_metric_bars
    from .synthetic import SyntheticConfig

    cfg = ExperimentConfig(synth=SyntheticConfig(n_functions=args.n_functions, seed=args.seed), seed=args.seed,
                           n_queries=args.queries, pool_size=args.pool, mode=args.mode)
    res = run_experiment(cfg)
    out = Path(args.out_dir)
    rows = [{"system": r["system"], **{f"rec@{k}": v for k, v in r["rec"].items()},
             **{f"mrr@{k}": v for k, v in r["mrr"].items()}, "n_queries": r["n_queries"], "elapsed_s": r["elapsed_s"]}
            for r in res.metrics_rows()]
    _write_tsv(out / "metrics.tsv", rows)
    write_jsonl(out / "embed_bench.jsonl", (c.to_json() for c in res.embed_cases))
    write_jsonl(out / "rerank_bench.jsonl", (c.to_json() for c in res.rerank_cases))
    if args.figures:
        plot_metric_bars({"embedding only": res.embedding_only.metrics(), "two stage": res.two_stage.metrics()},
                         out / "metrics.png", "Pool benchmark")
        plot_losses({"embedder (InfoNCE)": res.embed_losses, "reranker (BCE)": res.rerank_losses}, out / "losses.png")
    for r in rows:
        _emit(r)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _context_args(p: argparse.ArgumentParser, with_mode: bool = True) -> None:
    p.add_argument("--beta", type=float, default=15.0)
    p.add_argument("--k", type=int, default=5)
    if with_mode:
        p.add_argument("--mode", choices=MODES, default="heuristic")


def _llm_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--endpoint", required=True)
    p.add_argument("--timeout", type=float, default=60.0)
    p.add_argument("--retries", type=int, default=4)
    p.add_argument("--max-in-flight", dest="max_in_flight", type=int, default=4)


def build_parser() -> argparse.ArgumentParser:
    root = _Parser(prog="stripsearch", description="Natural-language search over stripped-binary pseudocode.")
    root.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    root.add_argument("-v", "--verbose", action="store_true")
    top = root.add_subparsers(dest="command", required=True, parser_class=_Parser)

    corpus = top.add_parser("corpus", help="ingest, filter and deduplicate function records").add_subparsers(
        dest="sub", required=True, parser_class=_Parser
    )
    p = corpus.add_parser("ingest")
    p.add_argument("--in", "--raw", dest="raw", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=("binary", "source"), default="binary")
    p.set_defaults(func=cmd_corpus_ingest)
    p = corpus.add_parser("filter")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=("binary", "source"), default="binary")
    p.set_defaults(func=cmd_corpus_filter)
    p = corpus.add_parser("dedup")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.95)
    p.add_argument("--hashes", "--num-hashes", dest="num_hashes", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_corpus_dedup)

    ctx = top.add_parser("context", help="informative scores and context selection").add_subparsers(
        dest="sub", required=True, parser_class=_Parser
    )
    p = ctx.add_parser("score")
    p.add_argument("--corpus", required=True)
    p.add_argument("--id", action="append")
    _context_args(p, with_mode=False)
    p.set_defaults(func=cmd_context_score)
    p = ctx.add_parser("select")
    p.add_argument("--corpus", required=True)
    p.add_argument("--id", required=True)
    p.add_argument("--seed", type=int, default=0)
    _context_args(p)
    p.set_defaults(func=cmd_context_select)

    sample = top.add_parser("sample", help="training pair construction").add_subparsers(
        dest="sub", required=True, parser_class=_Parser
    )
    p = sample.add_parser("pairs")
    p.add_argument("--corpus", required=True)
    p.add_argument("--desc", "--descriptions", dest="descriptions", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.95)
    p.add_argument("--negatives", type=int, default=8)
    p.add_argument("--mining-pool", dest="mining_pool", type=int, default=32)
    p.add_argument("--described-only", dest="described_only", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sample_pairs)
    p = sample.add_parser("rerank-samples", help="labelled (query, assembled input) samples from pairs")
    p.add_argument("--corpus", required=True)
    p.add_argument("--desc", "--descriptions", dest="descriptions", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--negatives-per-positive", dest="negatives_per_positive", type=int, default=4)
    p.add_argument("--budget", type=int, default=DEFAULT_BUDGET)
    p.add_argument("--seed", type=int, default=0)
    _context_args(p)
    p.set_defaults(func=cmd_sample_rerank)

    emb = top.add_parser("embed", help="train or apply the linear embedder").add_subparsers(
        dest="sub", required=True, parser_class=_Parser
    )
    p = emb.add_parser("train")
    p.add_argument("--corpus", required=True)
    p.add_argument("--desc", "--descriptions", dest="descriptions", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dim", type=int, default=256)
    p.add_argument("--feature-dim", dest="feature_dim", type=int, default=1 << 16)
    p.add_argument("--hash-seed", dest="hash_seed", type=int, default=0)
    p.add_argument("--tau", dest="temperature", type=float)
    _add_train_args(p)
    p.set_defaults(func=cmd_embed_train)
    p = emb.add_parser("encode")
    p.add_argument("--model", required=True)
    p.add_argument("--text", action="append")
    p.add_argument("--in", dest="input", help="corpus to encode (one vector per function)")
    p.add_argument("--out", help="vectors file (line-delimited JSON id/vector)")
    p.set_defaults(func=cmd_embed_encode)

    rr = top.add_parser("rerank", help="train or apply the linear reranker").add_subparsers(
        dest="sub", required=True, parser_class=_Parser
    )
    p = rr.add_parser("train")
    p.add_argument("--samples", help="samples file from 'sample rerank-samples'")
    p.add_argument("--corpus")
    p.add_argument("--desc", "--descriptions", dest="descriptions")
    p.add_argument("--pairs")
    p.add_argument("--out", required=True)
    p.add_argument("--feature-dim", dest="feature_dim", type=int, default=1 << 18)
    p.add_argument("--hash-seed", dest="hash_seed", type=int, default=0)
    p.add_argument("--negatives-per-positive", dest="negatives_per_positive", type=int, default=4)
    p.add_argument("--budget", type=int, default=DEFAULT_BUDGET)
    _context_args(p)
    _add_train_args(p)
    p.set_defaults(func=cmd_rerank_train)
    p = rr.add_parser("run")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--candidates", required=True, help="JSON list (inline or file) or comma-separated ids, stage-1 order")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--budget", type=int, default=DEFAULT_BUDGET)
    _context_args(p)
    p.set_defaults(func=cmd_rerank_run)

    idx = top.add_parser("index", help="build or query a flat vector index").add_subparsers(
        dest="sub", required=True, parser_class=_Parser
    )
    p = idx.add_parser("build")
    p.add_argument("--vectors", help="line-delimited JSON id/vector file")
    p.add_argument("--model")
    p.add_argument("--corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--ids", help="file with one function id per line (default: whole corpus)")
    p.set_defaults(func=cmd_index_build)
    p = idx.add_parser("search")
    p.add_argument("--idx", "--index", dest="index", required=True)
    p.add_argument("--query-vec", dest="query_vec", help="JSON file holding one query vector")
    p.add_argument("--model")
    p.add_argument("--query")
    p.add_argument("--n", "--top-n", dest="top_n", type=int, default=10)
    p.set_defaults(func=cmd_index_search)

    bench = top.add_parser("bench", help="benchmark construction and evaluation").add_subparsers(
        dest="sub", required=True, parser_class=_Parser
    )
    p = bench.add_parser("build-embed")
    p.add_argument("--corpus", required=True)
    p.add_argument("--desc", "--descriptions", dest="descriptions", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rejects")
    p.add_argument("--k", type=int, default=10_000)
    p.add_argument("--rho", type=float, default=0.95)
    p.add_argument("--limit", type=int, default=400)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--audit", action="store_true", help="re-check every pool by brute force")
    p.set_defaults(func=cmd_bench_build_embed)
    p = bench.add_parser("build-rerank")
    p.add_argument("--bench", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=10)
    p.set_defaults(func=cmd_bench_build_rerank)
    for name, func in (("run", cmd_bench_run), ("stability", cmd_bench_stability)):
        p = bench.add_parser(name)
        p.add_argument("--config", "--retriever", dest="config", required=True)
        p.add_argument("--bench", required=True)
        p.add_argument("--out", required=True, help="tab-separated output; figures go next to it")
        p.add_argument("--figures", action="store_true")
        p.set_defaults(func=func)
    run_p, stab_p = bench.choices["run"], bench.choices["stability"]
    run_p.add_argument("--ks", default="1,3,10")
    run_p.add_argument("--mrr-ks", dest="mrr_ks", default="3,10")
    run_p.add_argument("--workers", type=int, default=1)
    stab_p.add_argument("--trials", type=int, default=10)
    stab_p.add_argument("--fraction", type=float, default=0.8)
    stab_p.add_argument("--seed", type=int, default=0)
    p = bench.add_parser("ablation")
    p.add_argument("--out", required=True)
    p.add_argument("--figures", action="store_true")
    p.add_argument("--n-functions", dest="n_functions", type=int, default=2000)
    p.add_argument("--queries", type=int, default=200)
    p.add_argument("--pool", type=int, default=1000)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench_ablation)

    p = top.add_parser("search", help="two-stage search for one query")
    p.add_argument("--config", required=True)
    p.add_argument("--query", required=True)
    p.set_defaults(func=cmd_search)
    p = top.add_parser("eval", help="evaluate the configured system on a benchmark")
    p.add_argument("--config", required=True)
    p.add_argument("--bench", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    synth = top.add_parser("synth", help="LLM description generation and grading").add_subparsers(
        dest="sub", required=True, parser_class=_Parser
    )
    p = synth.add_parser("describe")
    _llm_args(p)
    p.add_argument("--sources", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_describe)
    p = synth.add_parser("grade")
    _llm_args(p)
    p.add_argument("--sources", required=True)
    p.add_argument("--desc", "--descriptions", dest="descriptions", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--keep-ab", dest="keep_ab", action="store_true", help="write only A/B-graded labels")
    p.set_defaults(func=cmd_synth_grade)

    p = top.add_parser("synthetic", help="generate a synthetic corpus with descriptions")
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--n-functions", dest="n_functions", type=int, default=2000)
    p.add_argument("--overlap", type=float, default=0.5)
    p.add_argument("--no-callees", dest="no_callees", action="store_true")
    p.add_argument("--duplicates", type=int, default=0)
    p.add_argument("--rephrasings", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synthetic)

    p = top.add_parser("experiment", help="train and evaluate both stages on a synthetic corpus")
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--figures", action="store_true")
    p.add_argument("--n-functions", dest="n_functions", type=int, default=2000)
    p.add_argument("--queries", type=int, default=200)
    p.add_argument("--pool", type=int, default=1000)
    p.add_argument("--mode", choices=MODES, default="heuristic")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_experiment)
    return root


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"stripsearch: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ServiceError, ReplyParseError) as exc:
        print(f"stripsearch: service error: {exc}", file=sys.stderr)
        return EXIT_SERVICE
    except (OSError, ValueError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"stripsearch: data error: {msg}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
