"""Hashed bag-of-terms features shared by the embedder and the reranker."""

from __future__ import annotations

import hashlib
import re
from functools import lru_cache
from typing import NamedTuple

import numpy as np
from scipy import sparse

from .corpus import tokenize

__all__ = ["terms", "term_hash", "SparseFeatures", "featurize", "featurize_many"]

_CAMEL = re.compile(r"[A-Z]+(?=[A-Z][a-z])|[A-Z]?[a-z]+|[A-Z]+|\d+")
_WORD = re.compile(r"[A-Za-z][A-Za-z0-9]*")
_NOISE = re.compile(r"[a-z]?\d+|[0-9a-f]*\d[0-9a-f]*")


def _pieces(word: str) -> list[str]:
    out = []
    for chunk in word.split("_"):
        for piece in _CAMEL.findall(chunk):
            piece = piece.lower()
            if len(piece) > 1 and not _NOISE.fullmatch(piece):
                out.append(piece)
    return out


@lru_cache(maxsize=1 << 16)
def _ident_terms(word: str) -> tuple[str, ...]:
    return tuple(_pieces(word))


def terms(text: str) -> list[str]:
    """Lower-cased word pieces from identifiers and string literals.

    Identifiers split on underscores and camel case; placeholder-ish
    pieces (``v3``, ``a1``, hex addresses) and single letters are dropped,
    as are numbers and punctuation.
    """
    out: list[str] = []
    for tok in tokenize(text):
        if tok.kind == "ident":
            out.extend(_ident_terms(tok.text))
        elif tok.kind == "string":
            for word in _WORD.findall(tok.text):
                out.extend(_ident_terms(word))
    return out


@lru_cache(maxsize=1 << 20)
def term_hash(term: str, seed: int) -> int:
    """Stable 64-bit hash of ``term`` keyed by ``seed``."""
    key = (seed & ((1 << 64) - 1)).to_bytes(8, "little")
    return int.from_bytes(hashlib.blake2b(term.encode("utf-8"), digest_size=8, key=key).digest(), "little")


class SparseFeatures(NamedTuple):
    indices: np.ndarray  # sorted, unique
    values: np.ndarray
    feature_dim: int
    degenerate: bool

    def dense(self) -> np.ndarray:
        out = np.zeros(self.feature_dim)
        out[self.indices] = self.values
        return out

    def dot(self, other: SparseFeatures) -> float:
        common, ia, ib = np.intersect1d(self.indices, other.indices, assume_unique=True, return_indices=True)
        return float(self.values[ia] @ other.values[ib]) if len(common) else 0.0


def _bucket_signs(items: list[str], feature_dim: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    hashes = np.fromiter((term_hash(t, seed) for t in items), dtype=np.uint64, count=len(items))
    buckets = (hashes % np.uint64(feature_dim)).astype(np.int64)
    signs = np.where((hashes >> np.uint64(63)) & np.uint64(1), -1.0, 1.0)
    return buckets, signs


def hashed_vector(items: list[str], feature_dim: int, seed: int) -> SparseFeatures:
    """Signed feature hashing of ``items`` followed by L2 normalisation."""
    if not items:
        return SparseFeatures(np.zeros(0, np.int64), np.zeros(0), feature_dim, True)
    buckets, signs = _bucket_signs(items, feature_dim, seed)
    idx, inverse = np.unique(buckets, return_inverse=True)
    vals = np.bincount(inverse, weights=signs, minlength=len(idx))
    keep = vals != 0
    idx, vals = idx[keep], vals[keep]
    norm = float(np.linalg.norm(vals))
    if norm == 0.0:
        return SparseFeatures(np.zeros(0, np.int64), np.zeros(0), feature_dim, True)
    return SparseFeatures(idx, vals / norm, feature_dim, False)


def featurize(text: str, feature_dim: int = 1 << 16, hash_seed: int = 0) -> SparseFeatures:
    return hashed_vector(terms(text), feature_dim, hash_seed)


def featurize_many(texts: list[str], feature_dim: int = 1 << 16, hash_seed: int = 0) -> tuple[sparse.csr_matrix, np.ndarray]:
    """Row-stacked features plus a boolean mask of degenerate rows."""
    indptr = [0]
    indices: list[np.ndarray] = []
    data: list[np.ndarray] = []
    degenerate = np.zeros(len(texts), dtype=bool)
    for i, text in enumerate(texts):
        f = featurize(text, feature_dim, hash_seed)
        degenerate[i] = f.degenerate
        indices.append(f.indices)
        data.append(f.values)
        indptr.append(indptr[-1] + len(f.indices))
    mat = sparse.csr_matrix(
        (
            np.concatenate(data) if data else np.zeros(0),
            np.concatenate(indices) if indices else np.zeros(0, np.int64),
            np.asarray(indptr),
        ),
        shape=(len(texts), feature_dim),
    )
    return mat, degenerate
