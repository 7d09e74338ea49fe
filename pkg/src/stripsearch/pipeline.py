"""Two-stage search: embed and retrieve, then rerank with callee context."""

from __future__ import annotations

import dataclasses
import os
import time
from collections.abc import Callable, Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .bench import DEFAULT_MRR_KS, DEFAULT_REC_KS, BenchmarkCase, EvalReport, RerankCase, evaluate_ranks
from .context import DEFAULT_BUDGET, MODES, ScoreParams
from .corpus import Corpus
from .embedding import Embedder, LinearEmbedder
from .index import RankedList, VectorIndex
from .reranker import LinearReranker, Scorer, rerank

__all__ = [
    "PipelineConfig",
    "SearchResponse",
    "Pipeline",
    "ArtifactError",
    "ConfigError",
    "ConstantScorer",
    "build_index",
    "search",
    "evaluate_system",
    "ENV_PREFIX",
]

ENV_PREFIX = "STRIPSEARCH_"


class ArtifactError(FileNotFoundError):
    """A model, index or corpus file named in the config is missing or unreadable."""


class ConfigError(ValueError):
    pass


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


@dataclass
class PipelineConfig:
    """Everything needed to stand a search pipeline up from files.

    An empty ``reranker_path`` runs stage 1 only (the identity reranker).
    """

    embedder_path: str = ""
    reranker_path: str = ""
    index_path: str = ""
    corpus_path: str = ""
    top_n_retrieve: int = 10
    top_k_return: int = 3
    mode: str = "heuristic"
    beta: float = 15.0
    k: int = 5
    budget: int = DEFAULT_BUDGET
    timing: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.top_n_retrieve < 1:
            raise ConfigError("top_n_retrieve must be >= 1")
        if not (1 <= self.top_k_return <= self.top_n_retrieve):
            raise ConfigError("need 1 <= top_k_return <= top_n_retrieve")
        if self.mode not in MODES:
            raise ConfigError(f"unknown context mode {self.mode!r}")

    @property
    def params(self) -> ScoreParams:
        return ScoreParams(beta=self.beta, k=self.k)

    @classmethod
    def from_mapping(cls, values: Mapping[str, str]) -> PipelineConfig:
        kinds = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs: dict[str, Any] = {}
        for key, raw in values.items():
            if key not in kinds:
                raise ConfigError(f"unknown config key {key!r}")
            kind = kinds[key]
            try:
                if kind == "int":
                    kwargs[key] = int(raw)
                elif kind == "float":
                    kwargs[key] = float(raw)
                elif kind == "bool":
                    kwargs[key] = _parse_bool(raw)
                else:
                    kwargs[key] = raw
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {raw!r}") from exc
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: str | Path | None, environ: Mapping[str, str] | None = None) -> PipelineConfig:
        """Read ``key = value`` lines, then apply ``STRIPSEARCH_<KEY>`` overrides.

        Blank lines and ``#`` comments are ignored. Relative artifact paths
        are resolved against the config file's directory.
        """
        values: dict[str, str] = {}
        base = Path(".")
        if path is not None:
            base = Path(path).parent
            try:
                lines = Path(path).read_text(encoding="utf-8").splitlines()
            except OSError as exc:
                raise ArtifactError(f"config file {path}: {exc.strerror}") from exc
            for n, line in enumerate(lines, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{n}: expected key = value")
                key, value = line.split("=", 1)
                values[key.strip()] = value.strip()
        environ = os.environ if environ is None else environ
        for f in dataclasses.fields(cls):
            env_key = ENV_PREFIX + f.name.upper()
            if env_key in environ:
                values[f.name] = environ[env_key]
        for key in ("embedder_path", "reranker_path", "index_path", "corpus_path"):
            if values.get(key) and not Path(values[key]).is_absolute():
                values[key] = str(base / values[key])
        return cls.from_mapping(values)


@dataclass
class SearchResponse:
    final: RankedList
    stage1: RankedList
    elapsed_stage1_ms: float = 0.0
    elapsed_stage2_ms: float = 0.0
    empty: bool = False

    def to_json(self) -> dict[str, Any]:
        return {
            "final": self.final.to_json(),
            "stage1": self.stage1.to_json(),
            "elapsed_stage1_ms": self.elapsed_stage1_ms,
            "elapsed_stage2_ms": self.elapsed_stage2_ms,
            "empty": self.empty,
        }


class ConstantScorer:
    """Scores everything the same; reranking with it leaves stage 1 untouched."""

    def __init__(self, value: float = 0.5):
        self.value = value

    def score(self, query: str, assembled_input: str) -> float:
        return self.value


def build_index(embedder: Embedder, corpus: Corpus, ids: Iterable[str] | None = None, batch: int = 2048) -> VectorIndex:
    """Embed each function's own pseudocode and index it by id."""
    ids = list(corpus.ids() if ids is None else ids)
    pairs: list[tuple[str, np.ndarray]] = []
    for start in range(0, len(ids), batch):
        chunk = ids[start : start + batch]
        vecs = embedder.embed_many([corpus[fid].pseudocode for fid in chunk])
        pairs.extend(zip(chunk, vecs))
    dim = pairs[0][1].shape[0] if pairs else None
    return VectorIndex.build(pairs, dim)


@dataclass
class Pipeline:
    cfg: PipelineConfig
    embedder: Embedder
    index: VectorIndex
    corpus: Corpus
    scorer: Scorer | None = None
    clock: Callable[[], float] = field(default=time.perf_counter, repr=False)

    @classmethod
    def from_config(cls, cfg: PipelineConfig) -> Pipeline:
        def need(label: str, path: str) -> Path:
            if not path:
                raise ArtifactError(f"{label} path is not configured")
            p = Path(path)
            if not p.is_file():
                raise ArtifactError(f"{label} not found: {p}")
            return p

        embedder = LinearEmbedder.load(need("embedder model", cfg.embedder_path))
        index = VectorIndex.load(need("index", cfg.index_path))
        corpus = Corpus.load(need("corpus", cfg.corpus_path))
        scorer = LinearReranker.load(need("reranker model", cfg.reranker_path)) if cfg.reranker_path else None
        if len(index) and index.dim != embedder.dim:
            raise ArtifactError(f"index dim {index.dim} does not match embedder dim {embedder.dim}")
        return cls(cfg, embedder, index, corpus, scorer)

    def _embed_query(self, query: str) -> np.ndarray:
        return self.embedder.embed_many([query])[0]

    def retrieve(self, query: str, index: VectorIndex | None = None, top_n: int | None = None) -> RankedList:
        index = self.index if index is None else index
        return index.search(self._embed_query(query), top_n or self.cfg.top_n_retrieve)

    def reorder(self, query: str, stage1: RankedList) -> RankedList:
        if self.scorer is None or len(stage1) == 0:
            return stage1
        return rerank(self.scorer, query, stage1, self.corpus, self.cfg.mode, self.cfg.params, self.cfg.seed, self.cfg.budget)

    def search(self, query: str, index: VectorIndex | None = None) -> SearchResponse:
        """Embed, retrieve ``top_n_retrieve``, rerank all of them, keep ``top_k_return``."""
        index = self.index if index is None else index
        if len(index) == 0:
            return SearchResponse(RankedList(), RankedList(), empty=True)
        t0 = self.clock()
        stage1 = self.retrieve(query, index)
        t1 = self.clock()
        reranked = self.reorder(query, stage1)
        t2 = self.clock()
        timed = self.cfg.timing
        return SearchResponse(
            final=reranked.head(self.cfg.top_k_return),
            stage1=stage1,
            elapsed_stage1_ms=(t1 - t0) * 1e3 if timed else 0.0,
            elapsed_stage2_ms=(t2 - t1) * 1e3 if timed else 0.0,
        )

    def case_rank(self, case: BenchmarkCase | RerankCase) -> int | None:
        """Rank of the positive after both stages, over the full reranked list.

        Embedding cases search an index restricted to the case's pool;
        rerank cases take their stored candidate order as stage 1.
        """
        if isinstance(case, RerankCase):
            stage1 = RankedList([(fid, 0.0) for fid in case.candidate_ids])
        else:
            stage1 = self.retrieve(case.query, self.index.subset(case.pool_ids))
        return self.reorder(case.query, stage1).rank_of(case.positive_id)


def search(cfg: PipelineConfig, query: str) -> SearchResponse:
    return Pipeline.from_config(cfg).search(query)


def evaluate_system(
    pipeline: Pipeline,
    cases: Sequence[BenchmarkCase | RerankCase],
    rec_ks: Sequence[int] = DEFAULT_REC_KS,
    mrr_ks: Sequence[int] = DEFAULT_MRR_KS,
    workers: int = 1,
) -> EvalReport:
    """Run every case through the pipeline and score the positive's final rank.

    Ranks are taken over all ``top_n_retrieve`` reranked candidates rather
    than the ``top_k_return`` prefix, so Rec@10 stays measurable. With
    ``workers > 1`` cases fan out over threads; results keep case order.
    """
    start = time.perf_counter()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            ranks = list(pool.map(pipeline.case_rank, cases))
    else:
        ranks = [pipeline.case_rank(c) for c in cases]
    return evaluate_ranks(ranks, rec_ks, mrr_ks, time.perf_counter() - start)
