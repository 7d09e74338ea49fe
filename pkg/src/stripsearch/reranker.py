"""Relevance scoring of (query, context-assembled code) pairs.

The trainable scorer is logistic regression over a hashed joint feature
space: query terms, code terms, and (query term, code term) crosses. The
crosses are what let a linear model express relevance between the two
texts rather than the popularity of either one alone.
"""

from __future__ import annotations

import logging
import math
import warnings
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Protocol

import numpy as np
from scipy import sparse

from .context import DEFAULT_BUDGET, ScoreParams, assemble_input, select_context
from .corpus import Corpus
from .embedding import ModelFormatError, _load_npz
from .features import term_hash, terms
from .index import RankedList
from .optim import AdamW, TrainConfig, cosine_lr

__all__ = [
    "Scorer",
    "LinearReranker",
    "RerankSample",
    "ScoreClampWarning",
    "MissingRecordError",
    "joint_features",
    "rerank_score",
    "bce_loss",
    "bce_loss_and_grad",
    "train_reranker",
    "rerank",
    "build_rerank_samples",
]

log = logging.getLogger(__name__)

RERANKER_FORMAT = "linear-reranker"
FORMAT_VERSION = 1
EPS = 1e-12
DEFAULT_MAX_CROSSES = 4096
RERANKER_TRAIN_DEFAULTS = TrainConfig(epochs=3)

_M64 = (1 << 64) - 1


class ScoreClampWarning(RuntimeWarning):
    """A score hit exactly 0 or 1 and was clamped before taking logs."""


class MissingRecordError(KeyError):
    pass


class Scorer(Protocol):
    def score(self, query: str, assembled_input: str) -> float: ...


class RerankSample(NamedTuple):
    query: str
    assembled_input: str
    label: int


def _splitmix(x: np.ndarray) -> np.ndarray:
    x = x + np.uint64(0x9E3779B97F4A7C15)
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def _unique(seq: Sequence[str]) -> list[str]:
    return list(dict.fromkeys(seq))


def joint_features(
    query: str,
    assembled_input: str,
    feature_dim: int,
    hash_seed: int = 0,
    max_crosses: int = DEFAULT_MAX_CROSSES,
) -> tuple[np.ndarray, np.ndarray]:
    """Hashed joint features as (indices, values); duplicates are summed.

    Crosses are enumerated query-term-major in first-appearance order and
    truncated at ``max_crosses``.
    """
    q_terms = _unique(terms(query))
    c_terms = _unique(terms(assembled_input))
    q_h = np.fromiter((term_hash("q:" + t, hash_seed) for t in q_terms), np.uint64, len(q_terms))
    c_h = np.fromiter((term_hash("c:" + t, hash_seed) for t in c_terms), np.uint64, len(c_terms))
    with np.errstate(over="ignore"):
        cross = _splitmix(q_h[:, None] * np.uint64(0x100000001B3) ^ c_h[None, :]).ravel()[:max_crosses]
    hashes = np.concatenate([q_h, c_h, cross])
    buckets = (hashes % np.uint64(feature_dim)).astype(np.int64)
    signs = np.where((hashes >> np.uint64(63)) & np.uint64(1), -1.0, 1.0)
    idx, inverse = np.unique(buckets, return_inverse=True)
    vals = np.bincount(inverse, weights=signs, minlength=len(idx))
    return idx, vals


def _sigmoid(z: np.ndarray | float) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


@dataclass(eq=False)
class LinearReranker:
    weights: np.ndarray  # (feature_dim,)
    bias: float = 0.0
    hash_seed: int = 0
    max_crosses: int = DEFAULT_MAX_CROSSES

    @property
    def feature_dim(self) -> int:
        return len(self.weights)

    @classmethod
    def zeros(cls, feature_dim: int = 1 << 18, hash_seed: int = 0, max_crosses: int = DEFAULT_MAX_CROSSES) -> LinearReranker:
        return cls(np.zeros(feature_dim), 0.0, hash_seed, max_crosses)

    def features(self, query: str, assembled_input: str) -> tuple[np.ndarray, np.ndarray]:
        return joint_features(query, assembled_input, self.feature_dim, self.hash_seed, self.max_crosses)

    def logit(self, query: str, assembled_input: str) -> float:
        idx, vals = self.features(query, assembled_input)
        return float(self.weights[idx] @ vals) + self.bias

    def score(self, query: str, assembled_input: str) -> float:
        return rerank_score(self, query, assembled_input)

    def save(self, path: str | Path) -> None:
        with open(path, "wb") as fh:
            np.savez(
                fh,
                format=np.array(RERANKER_FORMAT),
                version=np.array(FORMAT_VERSION),
                feature_dim=np.array(self.feature_dim),
                hash_seed=np.array(self.hash_seed),
                max_crosses=np.array(self.max_crosses),
                bias=np.array(self.bias),
                weights=self.weights,
            )

    @classmethod
    def load(cls, path: str | Path) -> LinearReranker:
        data = _load_npz(path, RERANKER_FORMAT)
        weights = data["weights"].astype(np.float64)
        if weights.shape != (int(data["feature_dim"]),):
            raise ModelFormatError(f"{path}: weight shape {weights.shape} disagrees with header")
        return cls(weights, float(data["bias"]), int(data["hash_seed"]), int(data["max_crosses"]))


def rerank_score(model: LinearReranker, query: str, assembled_input: str) -> float:
    """Relevance probability, clamped into [1e-12, 1 - 1e-12]."""
    p = float(_sigmoid(model.logit(query, assembled_input)))
    return min(max(p, EPS), 1.0 - EPS)


def bce_loss(scores: Sequence[float], labels: Sequence[int]) -> float:
    p = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=float)
    if p.shape != y.shape or p.ndim != 1 or len(p) == 0:
        raise ValueError("scores and labels must be equal-length, non-empty sequences")
    if np.any((p < 0) | (p > 1)):
        raise ValueError("scores must lie in [0, 1]")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    clamped = np.clip(p, EPS, 1.0 - EPS)
    if np.any(clamped != p):
        warnings.warn("scores clamped away from 0/1", ScoreClampWarning, stacklevel=2)
    return float(-np.mean(y * np.log(clamped) + (1.0 - y) * np.log1p(-clamped)))


def bce_loss_and_grad(
    weights: np.ndarray, bias: float, x: sparse.csr_matrix, labels: np.ndarray
) -> tuple[float, np.ndarray, float]:
    """Mean BCE computed from logits, with gradients for weights and bias.

    Uses log(1 + e^z) - y z, which is the same loss as :func:`bce_loss`
    on sigmoid(z) wherever no clamping happens.
    """
    z = np.asarray(x @ weights).ravel() + bias
    y = np.asarray(labels, dtype=float)
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
    dz = (_sigmoid(z) - y) / len(y)
    return loss, np.asarray(x.T @ dz).ravel(), float(dz.sum())


def _stack(samples: Sequence[RerankSample], model: LinearReranker) -> sparse.csr_matrix:
    indptr, indices, data = [0], [], []
    for s in samples:
        idx, vals = model.features(s.query, s.assembled_input)
        indices.append(idx)
        data.append(vals)
        indptr.append(indptr[-1] + len(idx))
    return sparse.csr_matrix(
        (np.concatenate(data), np.concatenate(indices), np.asarray(indptr)),
        shape=(len(samples), model.feature_dim),
    )


@dataclass
class RerankerTrainResult:
    model: LinearReranker
    epoch_losses: list[float]
    initial_loss: float
    final_loss: float


def train_reranker(
    samples: Sequence[RerankSample],
    cfg: TrainConfig = RERANKER_TRAIN_DEFAULTS,
    feature_dim: int = 1 << 18,
    hash_seed: int = 0,
    max_crosses: int = DEFAULT_MAX_CROSSES,
) -> RerankerTrainResult:
    """Fit the linear reranker with AdamW and cosine lr decay.

    ``initial_loss``/``final_loss`` are full-set mean losses before and
    after training; ``epoch_losses`` are mean pre-step batch losses.
    """
    labels = np.array([s.label for s in samples], dtype=float)
    if len(samples) == 0 or len(np.unique(labels)) < 2:
        raise ValueError("training samples must contain both positive and negative labels")
    model = LinearReranker.zeros(feature_dim, hash_seed, max_crosses)
    x = _stack(samples, model)
    params = np.concatenate([model.weights, [model.bias]])
    opt = AdamW(params.shape, cfg)
    n = len(samples)
    total = cfg.epochs * math.ceil(n / cfg.batch_size)
    initial_loss = bce_loss_and_grad(params[:-1], params[-1], x, labels)[0]
    rng = np.random.default_rng(cfg.seed)
    epoch_losses = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        batch_losses = []
        for start in range(0, n, cfg.batch_size):
            idx = np.sort(order[start : start + cfg.batch_size])
            loss, gw, gb = bce_loss_and_grad(params[:-1], params[-1], x[idx], labels[idx])
            opt.step(params, np.append(gw, gb), cosine_lr(step, total, cfg.learning_rate, cfg.lr_min))
            batch_losses.append(loss)
            step += 1
        epoch_losses.append(float(np.mean(batch_losses)))
        log.info("reranker epoch %d: loss %.6f", epoch + 1, epoch_losses[-1])
    model.weights = params[:-1].copy()
    model.bias = float(params[-1])
    final_loss = bce_loss_and_grad(model.weights, model.bias, x, labels)[0]
    return RerankerTrainResult(model, epoch_losses, initial_loss, final_loss)


def rerank(
    scorer: Scorer,
    query: str,
    candidates: RankedList,
    corpus: Corpus,
    mode: str = "heuristic",
    params: ScoreParams = ScoreParams(),
    seed: int = 0,
    budget: int = DEFAULT_BUDGET,
) -> RankedList:
    """Rescore every candidate with its callee context and reorder.

    Ties keep the incoming order, so a constant scorer is the identity.
    """
    if len(candidates) == 0:
        raise ValueError("no candidates to rerank")
    scored = []
    for rank, (fid, _) in enumerate(candidates):
        target = corpus.get(fid)
        if target is None:
            raise MissingRecordError(f"candidate {fid!r} is not in the corpus")
        bundle = select_context(target, corpus, params, mode, seed)
        text = assemble_input(query, bundle, budget)
        scored.append((-scorer.score(query, text), rank, fid))
    scored.sort()
    return RankedList([(fid, -neg) for neg, _, fid in scored])


def build_rerank_samples(
    pairs: Sequence,
    corpus: Corpus,
    queries: Mapping[str, str],
    mode: str = "heuristic",
    params: ScoreParams = ScoreParams(),
    negatives_per_positive: int = 4,
    seed: int = 0,
    budget: int = DEFAULT_BUDGET,
) -> list[RerankSample]:
    """One positive and up to ``negatives_per_positive`` negatives per pair.

    The hard negative comes first, then random negatives in stored order.
    """
    samples = []
    for pair in pairs:
        query = queries[pair.query_id]
        negs = ([pair.hard_negative_id] if pair.hard_negative_id else []) + list(pair.random_negative_ids)
        for fid, label in [(pair.positive_id, 1)] + [(n, 0) for n in negs[:negatives_per_positive]]:
            bundle = select_context(corpus[fid], corpus, params, mode, seed)
            samples.append(RerankSample(query, assemble_input(query, bundle, budget), label))
    return samples
