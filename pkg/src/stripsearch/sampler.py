"""Training pair construction: random negatives plus one mined hard negative."""

from __future__ import annotations

from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .corpus import Corpus, DescriptionLabel, FunctionRecord
from .embedding import HashingEmbedder
from .features import SparseFeatures

__all__ = [
    "DataPair",
    "SamplerConfig",
    "PairBuild",
    "InsufficientCandidatesError",
    "DescriptionSimilarity",
    "derive_seed",
    "sample_random_negatives",
    "mine_hard_negative",
    "build_pairs",
    "descriptions_by_function",
    "ELIGIBLE_GRADES",
]

ELIGIBLE_GRADES = frozenset({"A", "B"})


class InsufficientCandidatesError(ValueError):
    pass


@dataclass
class DataPair:
    query_id: str
    positive_id: str
    hard_negative_id: str | None
    random_negative_ids: list[str]
    seed: int

    def __post_init__(self) -> None:
        if self.positive_id in self.random_negative_ids:
            raise ValueError(f"pair {self.query_id}: positive among random negatives")
        if self.hard_negative_id == self.positive_id:
            raise ValueError(f"pair {self.query_id}: hard negative equals positive")

    def to_json(self) -> dict[str, Any]:
        return {
            "query_id": self.query_id,
            "positive_id": self.positive_id,
            "hard_negative_id": self.hard_negative_id,
            "random_negative_ids": list(self.random_negative_ids),
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> DataPair:
        return cls(
            str(obj["query_id"]),
            str(obj["positive_id"]),
            obj.get("hard_negative_id"),
            [str(x) for x in obj.get("random_negative_ids", [])],
            int(obj.get("seed", 0)),
        )


@dataclass(frozen=True)
class SamplerConfig:
    threshold: float = 0.95
    negatives: int = 8
    mining_pool: int = 32
    seed: int = 0
    described_only: bool = False

    def __post_init__(self) -> None:
        if not (0.0 < self.threshold <= 1.0):
            raise ValueError("threshold must lie in (0, 1]")
        if self.negatives < 1 or self.mining_pool < self.negatives:
            raise ValueError("need negatives >= 1 and mining_pool >= negatives")


class DescriptionSimilarity:
    """Cosine between hashed bag-of-terms vectors of two descriptions."""

    def __init__(self, embedder: HashingEmbedder | None = None):
        self.embedder = embedder or HashingEmbedder()
        self._cache: dict[str, SparseFeatures] = {}

    def _features(self, text: str) -> SparseFeatures:
        f = self._cache.get(text)
        if f is None:
            f = self._cache[text] = self.embedder.features(text)
        return f

    def __call__(self, a: str, b: str) -> float:
        return self._features(a).dot(self._features(b))


def derive_seed(master: int, index: int) -> int:
    return int(np.random.SeedSequence([master & 0xFFFFFFFF, index]).generate_state(1, np.uint32)[0])


def sample_random_negatives(
    positive: FunctionRecord,
    corpus: Corpus,
    count: int,
    seed: int,
    pool: Sequence[str] | None = None,
) -> list[str]:
    """Uniform draw without replacement from functions of other sources.

    Anything sharing the positive's ``source_id`` (other compiler settings
    of the same source function) is ineligible, as is the positive itself.
    """
    pool = corpus.ids() if pool is None else pool
    src = positive.source_id
    eligible = []
    for fid in pool:
        if fid == positive.id:
            continue
        if src is not None and corpus[fid].source_id == src:
            continue
        eligible.append(fid)
    if len(eligible) < count:
        raise InsufficientCandidatesError(
            f"{positive.id}: {len(eligible)} eligible negatives, {count} requested"
        )
    order = np.random.default_rng(seed).permutation(len(eligible))[:count]
    return [eligible[i] for i in order]


def mine_hard_negative(
    query: str,
    candidates: Sequence[tuple[str, Sequence[str]]],
    desc_sim: Callable[[str, str], float],
    threshold: float = 0.95,
) -> str | None:
    """First candidate at or below ``threshold`` in descending similarity.

    A candidate's similarity is its best match over its descriptions;
    candidates with no description cannot be mined.
    """
    scored = []
    for pos, (fid, texts) in enumerate(candidates):
        if not texts:
            continue
        scored.append((-max(desc_sim(query, t) for t in texts), pos, fid))
    scored.sort()
    for neg_score, _, fid in scored:
        if -neg_score <= threshold:
            return fid
    return None


def descriptions_by_function(corpus: Corpus, descriptions: Sequence[DescriptionLabel]) -> dict[str, list[str]]:
    """Map function id to all description texts reachable from it.

    A description attaches to the function named by ``function_ref`` or,
    failing that, to every function whose ``source_id`` equals it.
    """
    by_source: dict[str, list[str]] = {}
    for rec in corpus:
        if rec.source_id is not None:
            by_source.setdefault(rec.source_id, []).append(rec.id)
    out: dict[str, list[str]] = {}
    for d in descriptions:
        targets = [d.function_ref] if d.function_ref in corpus else by_source.get(d.function_ref, [])
        for fid in targets:
            out.setdefault(fid, []).append(d.text_en)
    return out


@dataclass
class PairBuild:
    pairs: list[DataPair] = field(default_factory=list)
    skipped_grade: int = 0
    skipped_unresolved: int = 0
    skipped_insufficient: int = 0

    @property
    def skipped(self) -> int:
        return self.skipped_grade + self.skipped_unresolved + self.skipped_insufficient


def build_pairs(
    corpus: Corpus,
    descriptions: Sequence[DescriptionLabel],
    cfg: SamplerConfig = SamplerConfig(),
    desc_sim: Callable[[str, str], float] | None = None,
) -> PairBuild:
    """One DataPair per A/B-graded description and each function it labels.

    Negatives come from the whole corpus, or only from functions carrying
    a description when ``cfg.described_only`` is set. Per-pair seeds are
    derived from ``cfg.seed`` and the pair's position, so the output is a
    pure function of the inputs.
    """
    desc_sim = desc_sim or DescriptionSimilarity()
    texts = descriptions_by_function(corpus, descriptions)
    pool = [fid for fid in corpus.ids() if fid in texts] if cfg.described_only else corpus.ids()
    by_source: dict[str, list[str]] = {}
    for rec in corpus:
        if rec.source_id is not None:
            by_source.setdefault(rec.source_id, []).append(rec.id)

    result = PairBuild()
    n = 0
    for d in descriptions:
        if d.grade not in ELIGIBLE_GRADES:
            result.skipped_grade += 1
            continue
        positives = [d.function_ref] if d.function_ref in corpus else by_source.get(d.function_ref, [])
        if not positives:
            result.skipped_unresolved += 1
            continue
        for pid in positives:
            seed = derive_seed(cfg.seed, n)
            n += 1
            positive = corpus[pid]
            try:
                eligible = sum(
                    1 for f in pool if f != pid and (positive.source_id is None or corpus[f].source_id != positive.source_id)
                )
                candidates = sample_random_negatives(positive, corpus, min(cfg.mining_pool, eligible), seed, pool)
                if len(candidates) < cfg.negatives:
                    raise InsufficientCandidatesError(pid)
            except InsufficientCandidatesError:
                result.skipped_insufficient += 1
                continue
            hard = mine_hard_negative(d.text_en, [(c, texts.get(c, [])) for c in candidates], desc_sim, cfg.threshold)
            randoms = [c for c in candidates if c != hard][: cfg.negatives]
            result.pairs.append(DataPair(d.id, pid, hard, randoms, seed))
    return result
