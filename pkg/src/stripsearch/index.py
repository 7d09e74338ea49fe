"""Exact (flat) cosine top-N search over unit-norm vectors.

File layout, all little-endian::

    magic  b"SSVI"   4 bytes
    version          u32
    dim              u32
    count            u64
    rows             count * dim float32
    id table         count * (u32 byte length + utf-8 bytes)
"""

from __future__ import annotations

import struct
from collections.abc import Iterable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = ["RankedList", "VectorIndex", "IndexFormatError", "MAGIC", "VERSION"]

MAGIC = b"SSVI"
VERSION = 1
_HEADER = struct.Struct("<4sIIQ")
_LEN = struct.Struct("<I")
NORM_TOLERANCE = 1e-5


@dataclass
class RankedList:
    items: list[tuple[str, float]] = field(default_factory=list)

    def __post_init__(self) -> None:
        ids = [i for i, _ in self.items]
        if len(set(ids)) != len(ids):
            raise ValueError("ranked list contains duplicate ids")
        scores = [sc for _, sc in self.items]
        if any(b > a for a, b in zip(scores, scores[1:])):
            raise ValueError("ranked list scores must be non-increasing")

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self) -> Iterator[tuple[str, float]]:
        return iter(self.items)

    def ids(self) -> list[str]:
        return [i for i, _ in self.items]

    def rank_of(self, fid: str) -> int | None:
        """1-based position of ``fid``, or None when absent."""
        for pos, (i, _) in enumerate(self.items, 1):
            if i == fid:
                return pos
        return None

    def head(self, n: int) -> RankedList:
        return RankedList(self.items[:n])

    def to_json(self) -> list[dict[str, float | str]]:
        return [{"id": i, "score": s} for i, s in self.items]

    @classmethod
    def from_json(cls, rows: Iterable[Mapping]) -> RankedList:
        return cls([(str(r["id"]), float(r.get("score", 0.0))) for r in rows])


class IndexFormatError(ValueError):
    pass


class VectorIndex:
    """Immutable flat index; rows are stored in ascending id order."""

    def __init__(self, dim: int, ids: Sequence[str], matrix: np.ndarray):
        self.dim = dim
        self.ids = list(ids)
        self.matrix = matrix  # float32, (count, dim)
        self._pos = {fid: i for i, fid in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, fid: object) -> bool:
        return fid in self._pos

    def vector(self, fid: str) -> np.ndarray:
        return self.matrix[self._pos[fid]]

    @classmethod
    def build(cls, vectors: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]], dim: int | None = None) -> VectorIndex:
        pairs = list(vectors.items()) if isinstance(vectors, Mapping) else list(vectors)
        seen: set[str] = set()
        for fid, vec in pairs:
            if fid in seen:
                raise ValueError(f"duplicate id {fid!r}")
            seen.add(fid)
            vec = np.asarray(vec)
            if vec.ndim != 1:
                raise ValueError(f"vector for {fid!r} is not one-dimensional")
            if dim is None:
                dim = len(vec)
            if len(vec) != dim:
                raise ValueError(f"vector for {fid!r} has dim {len(vec)}, expected {dim}")
            norm = float(np.linalg.norm(vec))
            if abs(norm - 1.0) > NORM_TOLERANCE:
                raise ValueError(f"vector for {fid!r} is not unit-norm (|v| = {norm:.8f})")
        dim = 0 if dim is None else dim
        pairs.sort(key=lambda p: p[0])
        matrix = np.zeros((len(pairs), dim), dtype=np.float32)
        for row, (_, vec) in enumerate(pairs):
            matrix[row] = vec
        return cls(dim, [p[0] for p in pairs], matrix)

    def search(self, query: np.ndarray, top_n: int = 10) -> RankedList:
        """Exact top-n by cosine; ties go to the smaller id."""
        if top_n < 1:
            raise ValueError("top_n must be >= 1")
        if not self.ids:
            return RankedList()
        query = np.asarray(query, dtype=np.float64)
        if query.shape != (self.dim,):
            raise ValueError(f"query dim {query.shape} does not match index dim {self.dim}")
        scores = self.matrix.astype(np.float64) @ query
        order = np.lexsort((np.arange(len(scores)), -scores))[:top_n]
        return RankedList([(self.ids[i], float(scores[i])) for i in order])

    # -- persistence -------------------------------------------------------

    def save(self, path: str | Path) -> None:
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, VERSION, self.dim, len(self.ids)))
            fh.write(np.ascontiguousarray(self.matrix, dtype="<f4").tobytes())
            for fid in self.ids:
                raw = fid.encode("utf-8")
                fh.write(_LEN.pack(len(raw)))
                fh.write(raw)

    @classmethod
    def load(cls, path: str | Path) -> VectorIndex:
        blob = Path(path).read_bytes()
        if len(blob) < _HEADER.size:
            raise IndexFormatError(f"{path}: truncated header ({len(blob)} of {_HEADER.size} bytes)")
        magic, version, dim, count = _HEADER.unpack_from(blob, 0)
        if magic != MAGIC:
            raise IndexFormatError(f"{path}: bad magic {magic!r} at offset 0")
        if version != VERSION:
            raise IndexFormatError(f"{path}: unsupported version {version} at offset 4")
        offset = _HEADER.size
        row_bytes = count * dim * 4
        if len(blob) < offset + row_bytes:
            raise IndexFormatError(
                f"{path}: truncated vector block at offset {offset}: need {row_bytes} bytes, have {len(blob) - offset}"
            )
        matrix = np.frombuffer(blob, dtype="<f4", count=count * dim, offset=offset).reshape(count, dim)
        matrix = matrix.astype(np.float32)
        offset += row_bytes
        ids = []
        for n in range(count):
            if len(blob) < offset + _LEN.size:
                raise IndexFormatError(f"{path}: truncated id table at offset {offset} (entry {n})")
            (length,) = _LEN.unpack_from(blob, offset)
            offset += _LEN.size
            if len(blob) < offset + length:
                raise IndexFormatError(f"{path}: truncated id entry {n} at offset {offset}")
            try:
                ids.append(blob[offset : offset + length].decode("utf-8"))
            except UnicodeDecodeError as exc:
                raise IndexFormatError(f"{path}: undecodable id entry {n} at offset {offset}") from exc
            offset += length
        if offset != len(blob):
            raise IndexFormatError(f"{path}: {len(blob) - offset} trailing bytes at offset {offset}")
        if len(set(ids)) != len(ids):
            raise IndexFormatError(f"{path}: duplicate ids in id table")
        return cls(dim, ids, matrix)

    def subset(self, ids: Iterable[str]) -> VectorIndex:
        """Index restricted to ``ids``; every id must already be present."""
        wanted = sorted(set(ids))
        missing = [fid for fid in wanted if fid not in self._pos]
        if missing:
            raise KeyError(f"{len(missing)} ids not in index, e.g. {missing[0]!r}")
        rows = [self._pos[fid] for fid in wanted]
        return VectorIndex(self.dim, wanted, self.matrix[rows])

    def equals(self, other: VectorIndex) -> bool:
        return self.dim == other.dim and self.ids == other.ids and np.array_equal(self.matrix, other.matrix)
