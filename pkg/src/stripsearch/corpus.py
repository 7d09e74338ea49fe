"""Function records, lexical extraction, quality filters and MinHash dedup.

Binary-side records hold decompiler pseudocode (IDA-style C). Source-side
records hold the original function text. Both are stored as line-delimited
JSON; token sequences are never persisted and are recomputed on load, so a
stored record always re-tokenizes to exactly its in-memory tokens.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from collections.abc import Callable, Iterable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Any, NamedTuple

import numpy as np

__all__ = [
    "Token",
    "tokenize",
    "count_tokens",
    "SourceFunction",
    "FunctionRecord",
    "DescriptionLabel",
    "Structure",
    "extract_structure",
    "is_stripped_name",
    "Verdict",
    "source_filter",
    "binary_filter",
    "MinHashSignature",
    "IncompatibleSignatureError",
    "minhash_signature",
    "estimate_jaccard",
    "dedup",
    "Corpus",
    "ingest_binary",
    "ingest_source",
    "read_jsonl",
    "write_jsonl",
]

EXTERNAL_PREFIX = "ext:"
STRIPPED_NAME_PATTERN = r"sub_[0-9A-Fa-f]+"
MIN_LOC = 10  # functions with loc <= MIN_LOC are dropped
GRADES = ("A", "B", "C", "D", "ungraded")
LABEL_SOURCES = ("llm", "manual", "synthetic")


# ---------------------------------------------------------------------------
# Tokenizer
# ---------------------------------------------------------------------------


class Token(NamedTuple):
    kind: str  # ident | num | string | char | op | punct
    text: str

    def __repr__(self) -> str:
        return f"{self.kind}({self.text!r})"


_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<lcomment>//[^\n]*)
  | (?P<bcomment>/\*.*?(?:\*/|\Z))
  | (?:L|u8|u|U)?"(?P<string>(?:\\.|[^"\\\n])*)"
  | (?:L|u|U)?'(?P<char>(?:\\.|[^'\\\n]){1,8})'
  | (?P<num>0[xX][0-9A-Fa-f]+[uUlLi0-9]*
        | \d+\.\d*(?:[eE][+-]?\d+)?[fFlL]?
        | \.\d+(?:[eE][+-]?\d+)?[fFlL]?
        | \d+[uUlLi0-9]*)
  | (?P<ident>[A-Za-z_$][A-Za-z0-9_$]*)
  | (?P<op>>>=|<<=|->|\+\+|--|<<|>>|<=|>=|==|!=|&&|\|\||[-+*/%&|^]=|::|[-+*/%=<>!&|^~?:.])
  | (?P<punct>.)
    """,
    re.VERBOSE | re.DOTALL,
)


def tokenize(text: str) -> list[Token]:
    """Split pseudocode into kinded tokens.

    Whitespace and comments are discarded. String and char literal tokens
    carry their content without the quotes, escapes kept verbatim.
    Anything unrecognised (stray quotes, ``#``, ``@``) becomes a one-char
    ``punct`` token, so the function never fails.
    """
    tokens: list[Token] = []
    for m in _TOKEN_RE.finditer(text):
        kind = m.lastgroup
        if kind in ("ws", "lcomment", "bcomment"):
            continue
        tokens.append(Token(kind, m.group(kind)))
    return tokens


def count_tokens(text: str) -> int:
    return len(tokenize(text))


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------


def _count_lines(text: str) -> int:
    return len(text.splitlines())


@dataclass
class SourceFunction:
    id: str
    project: str
    version: str
    path: str
    name: str
    code: str
    loc: int = -1

    def __post_init__(self) -> None:
        if self.loc < 0:
            self.loc = _count_lines(self.code)

    def to_json(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "project": self.project,
            "version": self.version,
            "path": self.path,
            "name": self.name,
            "code": self.code,
            "loc": self.loc,
        }

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> SourceFunction:
        return cls(
            id=str(obj["id"]),
            project=obj.get("project", ""),
            version=obj.get("version", ""),
            path=obj.get("path", ""),
            name=obj.get("name", ""),
            code=obj.get("code", ""),
            loc=int(obj.get("loc", -1)),
        )


@dataclass
class FunctionRecord:
    """One decompiled pseudocode function.

    ``callee_ids`` holds corpus ids for resolved callees and
    ``"ext:<name>"`` for anything outside the corpus (imports, unresolved
    placeholders). ``source_id`` links the function back to the source
    function it was compiled from, when that linkage is known.
    """

    id: str
    binary_id: str
    address: int
    pseudocode: str
    name_symbol: str | None = None
    string_literals: list[str] = field(default_factory=list)
    callee_ids: list[str] = field(default_factory=list)
    loc: int = 0
    is_thunk: bool = False
    is_virtual: bool = False
    source_id: str | None = None
    tokens: list[Token] = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.address < 0:
            raise ValueError(f"{self.id}: negative address")
        if not self.tokens and self.pseudocode:
            self.tokens = tokenize(self.pseudocode)

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "id": self.id,
            "binary_id": self.binary_id,
            "address": self.address,
        }
        if self.name_symbol is not None:
            out["name_symbol"] = self.name_symbol
        out.update(
            pseudocode=self.pseudocode,
            string_literals=list(self.string_literals),
            callee_ids=list(self.callee_ids),
            loc=self.loc,
            is_thunk=self.is_thunk,
            is_virtual=self.is_virtual,
        )
        if self.source_id is not None:
            out["source_id"] = self.source_id
        return out

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> FunctionRecord:
        return cls(
            id=str(obj["id"]),
            binary_id=str(obj.get("binary_id", "")),
            address=int(obj.get("address", 0)),
            pseudocode=obj.get("pseudocode", ""),
            name_symbol=obj.get("name_symbol"),
            string_literals=list(obj.get("string_literals", [])),
            callee_ids=list(obj.get("callee_ids", [])),
            loc=int(obj.get("loc", 0)),
            is_thunk=bool(obj.get("is_thunk", False)),
            is_virtual=bool(obj.get("is_virtual", False)),
            source_id=obj.get("source_id"),
        )


@dataclass
class DescriptionLabel:
    function_ref: str
    text_en: str
    text_cn: str | None = None
    grade: str = "ungraded"
    source: str = "llm"
    id: str | None = None

    def __post_init__(self) -> None:
        if not self.text_en or not self.text_en.strip():
            raise ValueError(f"description for {self.function_ref!r} has empty text_en")
        if self.grade not in GRADES:
            raise ValueError(f"unknown grade {self.grade!r}")
        if self.source not in LABEL_SOURCES:
            raise ValueError(f"unknown label source {self.source!r}")
        if self.id is None:
            self.id = self.function_ref

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {"id": self.id, "function_ref": self.function_ref, "text_en": self.text_en}
        if self.text_cn is not None:
            out["text_cn"] = self.text_cn
        out["grade"] = self.grade
        out["source"] = self.source
        return out

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> DescriptionLabel:
        return cls(
            function_ref=str(obj["function_ref"]),
            text_en=obj.get("text_en", ""),
            text_cn=obj.get("text_cn"),
            grade=obj.get("grade", "ungraded"),
            source=obj.get("source", "llm"),
            id=obj.get("id"),
        )


# ---------------------------------------------------------------------------
# Structure extraction
# ---------------------------------------------------------------------------

_NOT_CALLS = frozenset(
    """
    if for while switch return sizeof do else case goto break continue default
    typedef struct union enum alignof offsetof __asm asm JUMPOUT
    LOBYTE HIBYTE LOWORD HIWORD LODWORD HIDWORD BYTE1 BYTE2 BYTE3 BYTE4 BYTE5
    BYTE6 BYTE7 WORD1 WORD2 WORD3 DWORD1 SLOBYTE SHIBYTE SLOWORD SHIWORD
    SLODWORD SHIDWORD SBYTE1 SBYTE2 SBYTE3 SWORD1 SWORD2 __PAIR16__ __PAIR32__
    __PAIR64__ __PAIR128__ __CFADD__ __CFSUB__ __OFADD__ __OFSUB__ __SETS__
    __CFSHL__ __CFSHR__ __ROL1__ __ROL2__ __ROL4__ __ROL8__ __ROR1__ __ROR2__
    __ROR4__ __ROR8__ __readfsqword __writefsqword __readgsqword __fastcall
    __cdecl __stdcall __thiscall __usercall __noreturn
    """.split()
)
_CONTROL = frozenset({"if", "for", "while", "do", "switch", "goto"})


class Structure(NamedTuple):
    callee_ids: list[str]
    string_literals: list[str]
    loc: int
    name_symbol: str | None
    declared_name: str | None
    is_thunk: bool


def is_stripped_name(name: str | None, pattern: str = STRIPPED_NAME_PATTERN) -> bool:
    return name is None or re.fullmatch(pattern, name) is not None


def _split_header(tokens: Sequence[Token]) -> tuple[list[Token], list[Token]]:
    for i, tok in enumerate(tokens):
        if tok.kind == "punct" and tok.text == "{":
            return list(tokens[:i]), list(tokens[i + 1 :])
    return list(tokens), []


def _call_names(tokens: Sequence[Token]) -> list[str]:
    names = []
    for i in range(len(tokens) - 1):
        tok, nxt = tokens[i], tokens[i + 1]
        if tok.kind != "ident" or nxt.text != "(" or nxt.kind != "punct":
            continue
        if tok.text in _NOT_CALLS:
            continue
        if i > 0 and tokens[i - 1].text in (".", "->"):
            continue
        names.append(tok.text)
    return names


def _declared_name(header: Sequence[Token]) -> str | None:
    name = None
    for i in range(len(header) - 1):
        if header[i].kind == "ident" and header[i + 1].text == "(" and header[i].text not in _NOT_CALLS:
            name = header[i].text
            break
    return name


def _looks_like_thunk(body: Sequence[Token], declared: str | None) -> bool:
    if declared is not None and declared.startswith("j_"):
        return True
    if any(t.kind == "ident" and t.text in _CONTROL for t in body):
        return False
    statements: list[list[Token]] = [[]]
    for tok in body:
        if tok.kind == "punct" and tok.text in (";", "}"):
            statements.append([])
        else:
            statements[-1].append(tok)
    effects = []
    for stmt in statements:
        if not stmt:
            continue
        has_call = bool(_call_names(stmt)) or any(t.text == "JUMPOUT" for t in stmt)
        if has_call or stmt[0].text == "return" or any(t.text == "=" for t in stmt):
            effects.append((stmt, has_call))
    if len(effects) != 1:
        return False
    stmt, has_call = effects[0]
    if not has_call:
        return False
    jumps = sum(1 for t in stmt if t.text == "JUMPOUT")
    return len(_call_names(stmt)) + jumps == 1 and not any(t.text == "=" for t in stmt)


def extract_structure(
    text: str,
    symbol_table: Mapping[str, str] | None = None,
    stripped_pattern: str = STRIPPED_NAME_PATTERN,
    tokens: Sequence[Token] | None = None,
) -> Structure:
    """Pull callees, string literals, loc and the name symbol out of pseudocode.

    Works purely at the lexical level. The declared name is the first
    identifier applied to a parameter list before the opening brace; it is
    reported as ``name_symbol`` unless it matches the stripped-placeholder
    pattern. Callees are identifiers in call position inside the body,
    resolved through ``symbol_table`` or marked ``ext:<name>``.
    """
    symbol_table = symbol_table or {}
    tokens = tokenize(text) if tokens is None else tokens
    header, body = _split_header(tokens)
    declared = _declared_name(header)
    name_symbol = None if is_stripped_name(declared, stripped_pattern) else declared

    callees: list[str] = []
    seen: set[str] = set()
    for name in _call_names(body):
        if name == declared:
            continue
        ref = symbol_table.get(name, EXTERNAL_PREFIX + name)
        if ref not in seen:
            seen.add(ref)
            callees.append(ref)

    strings = [t.text for t in tokens if t.kind == "string"]
    return Structure(
        callee_ids=callees,
        string_literals=strings,
        loc=_count_lines(text),
        name_symbol=name_symbol,
        declared_name=declared,
        is_thunk=bool(body) and _looks_like_thunk(body, declared),
    )


# ---------------------------------------------------------------------------
# Filters
# ---------------------------------------------------------------------------


class Verdict(NamedTuple):
    keep: bool
    reason: str | None = None


def source_filter(f: SourceFunction) -> Verdict:
    if f.loc <= MIN_LOC:
        return Verdict(False, "short")
    return Verdict(True)


def binary_filter(f: FunctionRecord) -> Verdict:
    if f.loc <= MIN_LOC:
        return Verdict(False, "short")
    if f.is_thunk:
        return Verdict(False, "thunk")
    if f.is_virtual:
        return Verdict(False, "virtual")
    return Verdict(True)


# ---------------------------------------------------------------------------
# MinHash
# ---------------------------------------------------------------------------

_EMPTY_VALUE = np.uint64((1 << 64) - 1)


class IncompatibleSignatureError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class MinHashSignature:
    values: np.ndarray  # uint64, length num_hashes
    num_hashes: int
    seed: int
    empty: bool = False

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MinHashSignature):
            return NotImplemented
        return (
            self.num_hashes == other.num_hashes
            and self.seed == other.seed
            and bool(np.array_equal(self.values, other.values))
        )

    def __hash__(self) -> int:
        return hash((self.num_hashes, self.seed, self.values.tobytes()))


@lru_cache(maxsize=1 << 18)
def _shingle_hash(kind: str, text: str) -> int:
    digest = hashlib.blake2b(f"{kind}\x00{text}".encode("utf-8", "surrogatepass"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


@lru_cache(maxsize=64)
def _salts(num_hashes: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed & ((1 << 64) - 1))
    return rng.integers(0, np.iinfo(np.uint64).max, size=num_hashes, dtype=np.uint64, endpoint=True)


def _mix64(x: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer; uint64 arithmetic wraps, which is intended."""
    x = x ^ (x >> np.uint64(30))
    x = x * np.uint64(0xBF58476D1CE4E5B9)
    x = x ^ (x >> np.uint64(27))
    x = x * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def minhash_signature(tokens: Iterable[Token], num_hashes: int = 256, seed: int = 0) -> MinHashSignature:
    """MinHash over the set of (kind, text) unigram shingles.

    Hash function ``i`` is the splitmix64 finalizer applied to the 64-bit
    shingle hash xor a per-function salt drawn from ``seed``.
    """
    if num_hashes < 1:
        raise ValueError("num_hashes must be >= 1")
    shingles = {(t.kind, t.text) for t in tokens}
    if not shingles:
        values = np.full(num_hashes, _EMPTY_VALUE, dtype=np.uint64)
        return MinHashSignature(values, num_hashes, seed, empty=True)
    base = np.fromiter((_shingle_hash(k, s) for k, s in shingles), dtype=np.uint64, count=len(shingles))
    hashed = _mix64(_salts(num_hashes, seed)[:, None] ^ base[None, :])
    return MinHashSignature(hashed.min(axis=1), num_hashes, seed)


def estimate_jaccard(a: MinHashSignature, b: MinHashSignature) -> float:
    if a.num_hashes != b.num_hashes or a.seed != b.seed:
        raise IncompatibleSignatureError(
            f"signatures not comparable: ({a.num_hashes}, seed {a.seed}) vs ({b.num_hashes}, seed {b.seed})"
        )
    return float(np.count_nonzero(a.values == b.values)) / a.num_hashes


def _record_tokens(record: Any) -> list[Token]:
    if isinstance(record, FunctionRecord):
        return record.tokens
    if isinstance(record, SourceFunction):
        return tokenize(record.code)
    raise TypeError(f"cannot take tokens of {type(record).__name__}")


def dedup(
    records: Sequence[Any],
    threshold: float = 0.95,
    num_hashes: int = 256,
    seed: int = 0,
    tokens_of: Callable[[Any], Iterable[Token]] = _record_tokens,
) -> list[str]:
    """Greedy near-duplicate removal; returns kept ids in input order.

    A record is dropped iff its estimated Jaccard with an earlier kept
    record is >= ``threshold``. Candidates come from banded signatures
    with enough bands that any pair reaching the threshold must agree on
    a whole band (pigeonhole), so the band lookup never misses a pair the
    pairwise scan would have caught.
    """
    if not (0.0 < threshold <= 1.0):
        raise ValueError(f"threshold must lie in (0, 1], got {threshold}")
    required = math.ceil(threshold * num_hashes - 1e-9)
    n_bands = min(num_hashes, num_hashes - required + 1)
    bounds = np.linspace(0, num_hashes, n_bands + 1).astype(int)

    kept_ids: list[str] = []
    kept_sigs: list[MinHashSignature] = []
    buckets: dict[tuple[int, bytes], list[int]] = {}
    for record in records:
        sig = minhash_signature(tokens_of(record), num_hashes, seed)
        keys = [(j, sig.values[bounds[j] : bounds[j + 1]].tobytes()) for j in range(n_bands)]
        candidates: set[int] = set()
        for key in keys:
            candidates.update(buckets.get(key, ()))
        if any(estimate_jaccard(sig, kept_sigs[c]) >= threshold for c in sorted(candidates)):
            continue
        idx = len(kept_ids)
        kept_ids.append(record.id)
        kept_sigs.append(sig)
        for key in keys:
            buckets.setdefault(key, []).append(idx)
    return kept_ids


# ---------------------------------------------------------------------------
# Corpus container and JSONL I/O
# ---------------------------------------------------------------------------


def read_jsonl(path: str | Path) -> Iterator[dict[str, Any]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc


def write_jsonl(path: str | Path, rows: Iterable[Mapping[str, Any]]) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=False) + "\n")
            n += 1
    return n


class Corpus:
    """Id-addressable collection of binary function records."""

    def __init__(self, records: Iterable[FunctionRecord] = ()):
        self._records: dict[str, FunctionRecord] = {}
        for rec in records:
            if rec.id in self._records:
                raise ValueError(f"duplicate function id {rec.id!r}")
            self._records[rec.id] = rec

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self) -> Iterator[FunctionRecord]:
        return iter(self._records.values())

    def __contains__(self, fid: object) -> bool:
        return fid in self._records

    def __getitem__(self, fid: str) -> FunctionRecord:
        return self._records[fid]

    def get(self, fid: str) -> FunctionRecord | None:
        return self._records.get(fid)

    def ids(self) -> list[str]:
        return list(self._records)

    def subset(self, ids: Iterable[str]) -> Corpus:
        return Corpus(self._records[i] for i in ids)

    @classmethod
    def load(cls, path: str | Path) -> Corpus:
        return cls(FunctionRecord.from_json(obj) for obj in read_jsonl(path))

    def dump(self, path: str | Path) -> int:
        return write_jsonl(path, (r.to_json() for r in self))


def ingest_binary(
    raw: Iterable[Mapping[str, Any]],
    stripped_pattern: str = STRIPPED_NAME_PATTERN,
) -> list[FunctionRecord]:
    """Turn raw decompiler output rows into structured records.

    Each row needs ``id``, ``binary_id``, ``address`` and ``pseudocode``;
    ``is_virtual`` and ``source_id`` are taken as given. Call targets are
    resolved against the declared names (placeholders included) of every
    function in the same binary.
    """
    rows = list(raw)
    token_lists = [tokenize(r["pseudocode"]) for r in rows]
    tables: dict[str, dict[str, str]] = {}
    for row, toks in zip(rows, token_lists):
        declared = _declared_name(_split_header(toks)[0])
        if declared:
            tables.setdefault(str(row["binary_id"]), {}).setdefault(declared, str(row["id"]))

    records = []
    for row, toks in zip(rows, token_lists):
        table = tables.get(str(row["binary_id"]), {})
        st = extract_structure(row["pseudocode"], table, stripped_pattern, tokens=toks)
        records.append(
            FunctionRecord(
                id=str(row["id"]),
                binary_id=str(row["binary_id"]),
                address=int(row["address"]),
                pseudocode=row["pseudocode"],
                name_symbol=st.name_symbol,
                string_literals=st.string_literals,
                callee_ids=st.callee_ids,
                loc=st.loc,
                is_thunk=st.is_thunk,
                is_virtual=bool(row.get("is_virtual", False)),
                source_id=row.get("source_id"),
                tokens=toks,
            )
        )
    return records


def ingest_source(raw: Iterable[Mapping[str, Any]]) -> list[SourceFunction]:
    out = []
    for row in raw:
        row = dict(row)
        row.pop("loc", None)
        out.append(SourceFunction.from_json(row))
    return out
