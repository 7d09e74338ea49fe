"""Scaled synthetic experiment: train both toy models, build benchmarks, evaluate.

This is the desk-scale stand-in for a full training run. It wires the
other modules together in the order a real study would use them: sample
training pairs on the training split, fit the embedder and reranker, build
pool and rerank benchmarks on the held-out split, then compare the
embedding-only system with the two-stage system.
"""

from __future__ import annotations

import logging
import time
from collections.abc import Sequence
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np

from .bench import (
    BenchmarkCase,
    EvalReport,
    RerankCase,
    build_embedding_benchmark,
    build_rerank_benchmark,
    embedding_ranks,
    evaluate_ranks,
)
from .context import MODES, ScoreParams
from .embedding import LinearEmbedder, Triple, train_embedder
from .optim import TrainConfig
from .pipeline import Pipeline, PipelineConfig, build_index, evaluate_system
from .reranker import LinearReranker, build_rerank_samples, train_reranker
from .sampler import ELIGIBLE_GRADES, DataPair, SamplerConfig, build_pairs, descriptions_by_function
from .synthetic import SyntheticConfig, SyntheticData, generate

__all__ = [
    "ExperimentConfig",
    "Prepared",
    "ExperimentResult",
    "prepare",
    "train_stage_models",
    "run_experiment",
    "ablation",
    "AblationResult",
]

log = logging.getLogger(__name__)

# Desk-scale optimiser settings; see README for why these differ from the
# large-model defaults in TrainConfig.
DESK_EMBED_TRAIN = TrainConfig(learning_rate=1e-2, lr_min=1e-3, epochs=10, batch_size=32, temperature=0.1)
DESK_RERANK_TRAIN = TrainConfig(learning_rate=1e-2, lr_min=1e-3, epochs=3, batch_size=32)


@dataclass(frozen=True)
class ExperimentConfig:
    synth: SyntheticConfig = SyntheticConfig()
    sampler: SamplerConfig = SamplerConfig(negatives=8, mining_pool=64)
    embed_train: TrainConfig = DESK_EMBED_TRAIN
    rerank_train: TrainConfig = DESK_RERANK_TRAIN
    feature_dim: int = 1 << 15
    dim: int = 128
    rerank_feature_dim: int = 1 << 18
    pool_size: int = 1000
    n_queries: int = 200
    rerank_n: int = 10
    rho: float = 0.95
    mode: str = "heuristic"
    params: ScoreParams = ScoreParams()
    negatives_per_positive: int = 4
    seed: int = 0


@dataclass
class Prepared:
    """Data, training pairs and benchmark queries, before any model is fit."""

    cfg: ExperimentConfig
    data: SyntheticData
    pairs: list[DataPair]
    queries: dict[str, str]  # description id -> text
    test_ids: list[str]
    test_descriptions: dict[str, list[str]]
    bench_pairs: list[tuple[str, str]]


@dataclass
class ExperimentResult:
    embed_cases: list[BenchmarkCase]
    rejects: int
    rerank_cases: list[RerankCase]
    embedding_only: EvalReport
    two_stage: EvalReport
    rerank_embedding_only: EvalReport
    rerank_two_stage: EvalReport
    embed_losses: list[float]
    rerank_losses: list[float]
    timings: dict[str, float] = field(default_factory=dict)
    embedder: LinearEmbedder | None = field(default=None, repr=False)
    reranker: LinearReranker | None = field(default=None, repr=False)

    def metrics_rows(self) -> list[dict[str, Any]]:
        rows = []
        for system, report in (
            ("embedding_only", self.embedding_only),
            ("two_stage", self.two_stage),
            ("rerank_bench_embedding_only", self.rerank_embedding_only),
            ("rerank_bench_two_stage", self.rerank_two_stage),
        ):
            rows.append({"system": system, **report.to_json()})
        return rows


def prepare(cfg: ExperimentConfig) -> Prepared:
    data = generate(replace(cfg.synth, seed=cfg.synth.seed))
    train_ids = data.target_ids(data.train_sources)
    train_corpus = data.corpus.subset(train_ids)
    train_set = set(data.train_sources)
    train_descs = [d for d in data.descriptions if d.function_ref in train_set]
    pairs = build_pairs(train_corpus, train_descs, replace(cfg.sampler, seed=cfg.seed)).pairs
    queries = {d.id: d.text_en for d in data.descriptions}

    test_ids = data.target_ids(data.test_sources)
    test_set = set(data.test_sources)
    test_descriptions = descriptions_by_function(
        data.corpus.subset(test_ids), [d for d in data.descriptions if d.function_ref in test_set]
    )
    primary = data.primary_descriptions(data.test_sources)
    eligible = [s for s in data.test_sources if primary[s].grade in ELIGIBLE_GRADES]
    rng = np.random.default_rng(cfg.seed)
    chosen = [eligible[int(i)] for i in rng.permutation(len(eligible))[: cfg.n_queries]]
    bench_pairs = [(primary[s].text_en, data.targets[s][0]) for s in chosen]
    return Prepared(cfg, data, pairs, queries, test_ids, test_descriptions, bench_pairs)


def _triples(prep: Prepared) -> list[Triple]:
    corpus = prep.data.corpus
    return [
        Triple(prep.queries[p.query_id], corpus[p.positive_id].pseudocode, corpus[p.hard_negative_id].pseudocode)
        for p in prep.pairs
        if p.hard_negative_id is not None
    ]


def train_stage_models(
    prep: Prepared, mode: str | None = None, seed: int | None = None, embedder: LinearEmbedder | None = None
) -> tuple[LinearEmbedder, list[float], LinearReranker, list[float]]:
    """Fit the embedder (unless given) and a reranker for one context mode and seed."""
    cfg = prep.cfg
    mode = cfg.mode if mode is None else mode
    seed = cfg.seed if seed is None else seed
    embed_losses: list[float] = []
    if embedder is None:
        res = train_embedder(
            _triples(prep), replace(cfg.embed_train, seed=seed), feature_dim=cfg.feature_dim, dim=cfg.dim
        )
        embedder, embed_losses = res.model, res.epoch_losses
    samples = build_rerank_samples(
        prep.pairs, prep.data.corpus, prep.queries, mode, cfg.params, cfg.negatives_per_positive, seed
    )
    rr = train_reranker(samples, replace(cfg.rerank_train, seed=seed), feature_dim=cfg.rerank_feature_dim)
    return embedder, embed_losses, rr.model, rr.epoch_losses


def _pipeline(prep: Prepared, embedder: LinearEmbedder, index, reranker, mode: str, seed: int) -> Pipeline:
    pcfg = PipelineConfig(top_n_retrieve=prep.cfg.rerank_n, top_k_return=min(3, prep.cfg.rerank_n), mode=mode,
                          beta=prep.cfg.params.beta, k=prep.cfg.params.k, seed=seed)
    return Pipeline(pcfg, embedder, index, prep.data.corpus, reranker)


def run_experiment(cfg: ExperimentConfig = ExperimentConfig(), prep: Prepared | None = None) -> ExperimentResult:
    timings: dict[str, float] = {}
    t = time.perf_counter()
    prep = prep or prepare(cfg)
    timings["prepare_s"] = time.perf_counter() - t

    t = time.perf_counter()
    embedder, embed_losses, reranker, rerank_losses = train_stage_models(prep)
    timings["train_s"] = time.perf_counter() - t

    t = time.perf_counter()
    build = build_embedding_benchmark(prep.bench_pairs, prep.test_ids, prep.test_descriptions, cfg.pool_size, cfg.rho, cfg.seed)
    index = build_index(embedder, prep.data.corpus, prep.test_ids)
    vectors = {fid: index.vector(fid) for fid in index.ids}
    embed_query = lambda q: embedder.embed_many([q])[0]  # noqa: E731
    rr_build = build_rerank_benchmark(build.cases, embed_query, vectors, cfg.rerank_n)
    timings["bench_build_s"] = time.perf_counter() - t

    t = time.perf_counter()
    ranks, elapsed = embedding_ranks(build.cases, embed_query, vectors, cfg.rerank_n)
    embedding_only = evaluate_ranks(ranks, elapsed=elapsed)
    pipe = _pipeline(prep, embedder, index, reranker, cfg.mode, cfg.seed)
    two_stage = evaluate_system(pipe, build.cases)
    rr_only = evaluate_system(_pipeline(prep, embedder, index, None, cfg.mode, cfg.seed), rr_build.cases)
    rr_two = evaluate_system(pipe, rr_build.cases)
    timings["eval_s"] = time.perf_counter() - t
    return ExperimentResult(
        build.cases, len(build.rejects), rr_build.cases, embedding_only, two_stage, rr_only, rr_two,
        embed_losses, rerank_losses, timings, embedder, reranker,
    )


@dataclass
class AblationResult:
    seeds: list[int]
    rec1: dict[str, list[float]]  # mode -> per-seed Rec@1 on the rerank benchmark

    def mean(self) -> dict[str, float]:
        return {m: float(np.mean(v)) for m, v in self.rec1.items()}

    def to_json(self) -> dict[str, Any]:
        return {"seeds": self.seeds, "rec1": self.rec1, "mean_rec1": self.mean()}


def ablation(
    cfg: ExperimentConfig = ExperimentConfig(),
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    modes: Sequence[str] = MODES,
    prep: Prepared | None = None,
) -> AblationResult:
    """Rec@1 per context mode, retraining the reranker per mode and seed.

    The embedder and both benchmarks are fixed so every mode reranks the
    same candidate lists; the seed drives reranker training and, for the
    random mode, which callees are drawn.
    """
    prep = prep or prepare(cfg)
    embedder, _, _, _ = train_stage_models(prep, mode="none")
    build = build_embedding_benchmark(prep.bench_pairs, prep.test_ids, prep.test_descriptions, cfg.pool_size, cfg.rho, cfg.seed)
    index = build_index(embedder, prep.data.corpus, prep.test_ids)
    vectors = {fid: index.vector(fid) for fid in index.ids}
    cases = build_rerank_benchmark(build.cases, lambda q: embedder.embed_many([q])[0], vectors, cfg.rerank_n).cases
    rec1: dict[str, list[float]] = {m: [] for m in modes}
    for seed in seeds:
        for mode in modes:
            _, _, reranker, _ = train_stage_models(prep, mode=mode, seed=seed, embedder=embedder)
            report = evaluate_system(_pipeline(prep, embedder, index, reranker, mode, seed), cases)
            rec1[mode].append(report.rec[1])
            log.info("ablation seed %d mode %s: rec@1 %.4f", seed, mode, report.rec[1])
    return AblationResult(list(seeds), rec1)
