"""Benchmark construction and retrieval metrics.

Embedding benchmarks give each query a pool of K functions: its positive
plus K-1 negatives whose best description similarity to the query stays
below a leakage threshold. Rerank benchmarks keep only the queries whose
positive an embedder retrieves in its top N but not at rank 1.
"""

from __future__ import annotations

import math
import time
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .embedding import HashingEmbedder
from .features import featurize_many
from .index import RankedList, VectorIndex

__all__ = [
    "BenchmarkCase",
    "RerankCase",
    "EvalReport",
    "EmbedBenchBuild",
    "RerankBenchBuild",
    "MaxSimScorer",
    "build_embedding_benchmark",
    "audit_pools",
    "build_rerank_benchmark",
    "recall_at_k",
    "mrr_at_k",
    "evaluate_ranks",
    "stability_report",
    "subsample_evaluator",
    "rank_in",
    "embedding_ranks",
    "StabilityReport",
    "DEFAULT_REC_KS",
    "DEFAULT_MRR_KS",
]

DEFAULT_REC_KS = (1, 3, 10)
DEFAULT_MRR_KS = (3, 10)


@dataclass
class BenchmarkCase:
    query: str
    positive_id: str
    pool_ids: list[str]

    def __post_init__(self) -> None:
        if self.positive_id not in self.pool_ids:
            raise ValueError(f"positive {self.positive_id!r} missing from its pool")
        if len(set(self.pool_ids)) != len(self.pool_ids):
            raise ValueError("pool contains duplicate ids")

    def to_json(self) -> dict[str, Any]:
        return {"query": self.query, "positive_id": self.positive_id, "pool_ids": self.pool_ids}

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> BenchmarkCase:
        return cls(obj["query"], str(obj["positive_id"]), [str(x) for x in obj["pool_ids"]])


@dataclass
class RerankCase:
    query: str
    positive_id: str
    candidate_ids: list[str]

    def __post_init__(self) -> None:
        if self.positive_id not in self.candidate_ids:
            raise ValueError(f"positive {self.positive_id!r} missing from candidates")
        if self.candidate_ids[0] == self.positive_id:
            raise ValueError("positive must not be the first candidate")

    def to_json(self) -> dict[str, Any]:
        return {"query": self.query, "positive_id": self.positive_id, "candidate_ids": self.candidate_ids}

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> RerankCase:
        return cls(obj["query"], str(obj["positive_id"]), [str(x) for x in obj["candidate_ids"]])


# ---------------------------------------------------------------------------
# Embedding benchmark (pool construction)
# ---------------------------------------------------------------------------


class MaxSimScorer:
    """Best description similarity between a query and each candidate.

    All candidate descriptions are hashed once into a sparse matrix; one
    sparse mat-vec then scores a query against the whole candidate set.
    """

    def __init__(self, candidate_ids: Sequence[str], descriptions: Mapping[str, Sequence[str]], embedder: HashingEmbedder | None = None):
        self.embedder = embedder or HashingEmbedder()
        self.candidate_ids = list(candidate_ids)
        texts: list[str] = []
        owner: list[int] = []
        for i, fid in enumerate(self.candidate_ids):
            for t in descriptions.get(fid, ()):
                texts.append(t)
                owner.append(i)
        self._owner = np.asarray(owner, dtype=np.int64)
        self._matrix, _ = featurize_many(texts, self.embedder.feature_dim, self.embedder.hash_seed)

    def scores(self, query: str) -> np.ndarray:
        """MaxSim for every candidate; -inf where a candidate has no description."""
        out = np.full(len(self.candidate_ids), -np.inf)
        if self._matrix.shape[0] == 0:
            return out
        q, _ = featurize_many([query], self.embedder.feature_dim, self.embedder.hash_seed)
        sims = np.asarray((self._matrix @ q.T).todense()).ravel()
        np.maximum.at(out, self._owner, sims)
        return out


@dataclass
class EmbedBenchBuild:
    cases: list[BenchmarkCase] = field(default_factory=list)
    rejects: list[dict[str, Any]] = field(default_factory=list)


def build_embedding_benchmark(
    pairs: Sequence[tuple[str, str]],
    candidate_ids: Sequence[str],
    descriptions: Mapping[str, Sequence[str]],
    k: int = 10_000,
    rho: float = 0.95,
    seed: int = 0,
    scorer: MaxSimScorer | None = None,
) -> EmbedBenchBuild:
    """Pools of exactly ``k`` ids per (query, positive) pair.

    Candidates are visited in a per-query seeded order and admitted iff
    their MaxSim to the query is below ``rho``. A query whose pool cannot
    reach ``k`` goes to ``rejects`` instead of yielding an undersized pool.
    """
    if k < 1:
        raise ValueError("pool size k must be >= 1")
    scorer = scorer or MaxSimScorer(candidate_ids, descriptions)
    ids = scorer.candidate_ids
    position = {fid: i for i, fid in enumerate(ids)}
    master = np.random.SeedSequence(seed & 0xFFFFFFFF)
    child_seeds = master.spawn(len(pairs))

    out = EmbedBenchBuild()
    for (query, positive), child in zip(pairs, child_seeds):
        maxsim = scorer.scores(query)
        order = np.random.default_rng(child).permutation(len(ids))
        admissible = order[maxsim[order] < rho]
        pos_idx = position.get(positive)
        if pos_idx is not None:
            admissible = admissible[admissible != pos_idx]
        if len(admissible) < k - 1:
            out.rejects.append({"query": query, "positive_id": positive, "admissible": int(len(admissible))})
            continue
        pool = [positive] + [ids[i] for i in admissible[: k - 1]]
        out.cases.append(BenchmarkCase(query, positive, pool))
    return out


def audit_pools(
    cases: Iterable[BenchmarkCase],
    descriptions: Mapping[str, Sequence[str]],
    desc_sim: Callable[[str, str], float],
    rho: float = 0.95,
) -> list[tuple[str, str, float]]:
    """Every (query, admitted negative, MaxSim) with MaxSim >= rho."""
    violations = []
    for case in cases:
        for fid in case.pool_ids:
            if fid == case.positive_id:
                continue
            best = max((desc_sim(case.query, t) for t in descriptions.get(fid, ())), default=-math.inf)
            if best >= rho:
                violations.append((case.query, fid, best))
    return violations


# ---------------------------------------------------------------------------
# Rerank benchmark
# ---------------------------------------------------------------------------


@dataclass
class RerankBenchBuild:
    cases: list[RerankCase] = field(default_factory=list)
    excluded_top1: int = 0
    excluded_missed: int = 0
    excluded_small_pool: int = 0


def build_rerank_benchmark(
    cases: Sequence[BenchmarkCase],
    embed_query: Callable[[str], np.ndarray],
    vectors: Mapping[str, np.ndarray],
    n: int = 10,
) -> RerankBenchBuild:
    """Keep cases whose positive is retrieved in the top n but not first.

    ``vectors`` maps every pool member to its embedding. Candidates are the
    retrieved top n in retrieval order, which is the positive plus the n-1
    best-ranked negatives.
    """
    out = RerankBenchBuild()
    for case in cases:
        if len(case.pool_ids) < n:
            out.excluded_small_pool += 1
            continue
        index = VectorIndex.build([(fid, vectors[fid]) for fid in case.pool_ids])
        retrieved = index.search(embed_query(case.query), n).ids()
        if case.positive_id not in retrieved:
            out.excluded_missed += 1
            continue
        if retrieved[0] == case.positive_id:
            out.excluded_top1 += 1
            continue
        negatives = [fid for fid in retrieved if fid != case.positive_id][: n - 1]
        keep = set(negatives) | {case.positive_id}
        out.cases.append(RerankCase(case.query, case.positive_id, [fid for fid in retrieved if fid in keep]))
    return out


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def _check_k(k: int) -> None:
    if k < 1:
        raise ValueError("k must be >= 1")


def recall_at_k(ranks: Sequence[int | None], k: int) -> float:
    """Share of queries whose positive sits at 1-based rank <= k."""
    _check_k(k)
    if not ranks:
        return 0.0
    return sum(1 for r in ranks if r is not None and r <= k) / len(ranks)


def mrr_at_k(ranks: Sequence[int | None], k: int) -> float:
    _check_k(k)
    if not ranks:
        return 0.0
    return sum(1.0 / r for r in ranks if r is not None and r <= k) / len(ranks)


@dataclass
class EvalReport:
    rec: dict[int, float]
    mrr: dict[int, float]
    n_queries: int
    elapsed: float = 0.0  # seconds
    resample_std: dict[str, float] | None = None
    ranks: list[int | None] = field(default_factory=list, repr=False)

    def metrics(self) -> dict[str, float]:
        out = {f"rec@{k}": v for k, v in self.rec.items()}
        out.update({f"mrr@{k}": v for k, v in self.mrr.items()})
        return out

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "n_queries": self.n_queries,
            "rec": {str(k): v for k, v in self.rec.items()},
            "mrr": {str(k): v for k, v in self.mrr.items()},
            "elapsed_s": self.elapsed,
            "elapsed_per_query_ms": 1e3 * self.elapsed / self.n_queries if self.n_queries else 0.0,
        }
        if self.resample_std is not None:
            out["resample_std_pct"] = self.resample_std
        return out


def evaluate_ranks(
    ranks: Sequence[int | None],
    rec_ks: Sequence[int] = DEFAULT_REC_KS,
    mrr_ks: Sequence[int] = DEFAULT_MRR_KS,
    elapsed: float = 0.0,
) -> EvalReport:
    return EvalReport(
        rec={k: recall_at_k(ranks, k) for k in rec_ks},
        mrr={k: mrr_at_k(ranks, k) for k in mrr_ks},
        n_queries=len(ranks),
        elapsed=elapsed,
        ranks=list(ranks),
    )


def rank_in(ranked: RankedList | Sequence[str], positive: str) -> int | None:
    ids = ranked.ids() if isinstance(ranked, RankedList) else list(ranked)
    return ids.index(positive) + 1 if positive in ids else None


def embedding_ranks(
    cases: Sequence[BenchmarkCase],
    embed_query: Callable[[str], np.ndarray],
    vectors: Mapping[str, np.ndarray],
    top_n: int | None = None,
) -> tuple[list[int | None], float]:
    """Rank of each positive under pure embedding retrieval, plus seconds spent."""
    start = time.perf_counter()
    ranks = []
    for case in cases:
        index = VectorIndex.build([(fid, vectors[fid]) for fid in case.pool_ids])
        ranked = index.search(embed_query(case.query), top_n or len(case.pool_ids))
        ranks.append(ranked.rank_of(case.positive_id))
    return ranks, time.perf_counter() - start


# ---------------------------------------------------------------------------
# Stability
# ---------------------------------------------------------------------------


@dataclass
class StabilityReport:
    trials: list[dict[str, float]]
    std_pct: dict[str, float]
    mean_pct: dict[str, float]

    def to_json(self) -> dict[str, Any]:
        return {"trials": self.trials, "std_pct": self.std_pct, "mean_pct": self.mean_pct}


def stability_report(
    evaluate: Callable[[int], Mapping[str, float]],
    trials: int = 10,
    seed: int = 0,
) -> StabilityReport:
    """Sample std (ddof=1), in percentage points, of metrics over trials.

    ``evaluate`` receives a per-trial seed and returns metric fractions;
    it decides whether a trial rebuilds the test set or subsamples it.
    """
    if trials < 2:
        raise ValueError("stability needs at least 2 trials")
    seeds = np.random.SeedSequence(seed & 0xFFFFFFFF).generate_state(trials, np.uint32)
    results = [dict(evaluate(int(s))) for s in seeds]
    names = list(results[0])
    std = {m: float(np.std([100.0 * r[m] for r in results], ddof=1)) for m in names}
    mean = {m: float(np.mean([100.0 * r[m] for r in results])) for m in names}
    return StabilityReport(results, std, mean)


def subsample_evaluator(
    ranks: Sequence[int | None],
    fraction: float = 0.8,
    rec_ks: Sequence[int] = DEFAULT_REC_KS,
    mrr_ks: Sequence[int] = DEFAULT_MRR_KS,
) -> Callable[[int], dict[str, float]]:
    """Trial function drawing ``fraction`` of the fixed queries without replacement."""
    ranks = list(ranks)
    size = max(1, int(round(fraction * len(ranks))))

    def evaluate(trial_seed: int) -> dict[str, float]:
        pick = np.random.default_rng(trial_seed).choice(len(ranks), size=size, replace=False)
        return evaluate_ranks([ranks[i] for i in sorted(pick)], rec_ks, mrr_ks).metrics()

    return evaluate

