"""Seeded generator of IDA-style pseudocode corpora with paired descriptions.

Each source function is a unique (verb, object, adjective, qualifier)
combination. Its description names all four in plain English. Its
pseudocode only hints at them:

* the target function's string literals carry the verb and the object,
  spelled either as the English word or as a code-ish synonym
  (``lexical_overlap`` sets the odds of the English spelling);
* a few *informative* callees carry the qualifier and the object in
  strings and call named imports built from the qualifier's code tokens;
* many *noise* callees are stripped helpers with no strings that call
  only other stripped helpers.

The adjective has no code-side trace at all. So stage 1 can learn the
verb and object, and only context-aware reranking can recover the
qualifier. Everything is a pure function of ``SyntheticConfig``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus import Corpus, DescriptionLabel, SourceFunction, ingest_binary

__all__ = [
    "VERBS",
    "OBJECTS",
    "QUALIFIERS",
    "ADJECTIVES",
    "SyntheticConfig",
    "SyntheticData",
    "generate",
    "describe",
]

VERBS: dict[str, tuple[str, ...]] = {
    "encrypt": ("cipher", "enc"),
    "decrypt": ("decipher", "dec"),
    "compress": ("deflate", "squash"),
    "decompress": ("inflate", "unsquash"),
    "parse": ("lex", "tokenise"),
    "serialize": ("marshal", "pickle"),
    "validate": ("verify", "sanity"),
    "hash": ("digest", "fingerprint"),
    "allocate": ("alloc", "reserve"),
    "release": ("dispose", "reclaim"),
    "send": ("transmit", "emit"),
    "receive": ("recv", "ingest"),
    "open": ("acquire", "attach"),
    "close": ("detach", "teardown"),
    "read": ("fetch", "slurp"),
    "write": ("store", "commit"),
    "sort": ("order", "qsort"),
    "search": ("lookup", "probe"),
    "copy": ("clone", "dup"),
    "compare": ("cmp", "diff"),
    "initialize": ("init", "setup"),
    "reset": ("clear", "wipe"),
    "format": ("render", "sprint"),
    "convert": ("transcode", "xlate"),
}

OBJECTS: dict[str, tuple[str, ...]] = {
    "buffer": ("buf", "bytes"),
    "packet": ("pkt", "datagram"),
    "header": ("hdr", "preamble"),
    "config": ("cfg", "settings"),
    "socket": ("sock", "endpoint"),
    "string": ("str", "cstr"),
    "file": ("fp", "stream"),
    "table": ("tbl", "hashmap"),
    "list": ("lst", "chain"),
    "tree": ("node", "branch"),
    "message": ("msg", "mail"),
    "key": ("keyslot", "secret"),
    "certificate": ("cert", "xcert"),
    "image": ("img", "bitmap"),
    "frame": ("frm", "slice"),
    "record": ("rec", "row"),
    "session": ("sess", "conn"),
    "token": ("tok", "lexeme"),
    "queue": ("fifo", "ring"),
    "matrix": ("mat", "grid"),
    "request": ("req", "query"),
    "response": ("resp", "reply"),
    "entry": ("ent", "slot"),
    "block": ("blk", "chunk"),
    "path": ("pathname", "dirent"),
}

# (English phrase, code tokens used in strings and import names)
QUALIFIERS: tuple[tuple[str, tuple[str, ...]], ...] = (
    ("using the xtea algorithm", ("xtea", "tea")),
    ("with a crc checksum", ("crc", "poly")),
    ("over a tls channel", ("tls", "ssl")),
    ("as unicode text", ("utf", "wchar")),
    ("in gzip format", ("gzip", "zlib")),
    ("as json", ("json", "jsmn")),
    ("in network byte order", ("htonl", "ntohl")),
    ("under a mutex lock", ("mutex", "pthread")),
    ("with retry on failure", ("retry", "backoff")),
    ("through an lru cache", ("lru", "evict")),
    ("using base64 encoding", ("radix", "alphabet")),
    ("and logs the outcome", ("syslog", "logger")),
)

ADJECTIVES = (
    "incoming", "outgoing", "cached", "temporary", "global", "local",
    "pending", "raw", "default", "current", "shared", "nested",
)

_IMPORT_SUFFIXES = ("init", "update", "final", "ctx_new", "open", "free")
_STATUS_WORDS = ("failed", "error", "invalid", "ok", "done")
_LIB_IMPORTS = ("memcpy", "memset", "strlen", "calloc", "__stack_chk_fail")


@dataclass(frozen=True)
class SyntheticConfig:
    n_functions: int = 2000
    seed: int = 0
    lexical_overlap: float = 0.5
    with_callees: bool = True
    informative_callees: int = 2
    noise_callees: int = 8
    helpers_per_binary: int = 40
    sources_per_binary: int = 25
    twin_rate: float = 0.2
    exact_duplicates: int = 0
    rephrasings: int = 0
    low_grade_rate: float = 0.05
    test_fraction: float = 0.6

    def __post_init__(self) -> None:
        capacity = len(VERBS) * len(OBJECTS) * len(QUALIFIERS) * len(ADJECTIVES)
        if not (1 <= self.n_functions <= capacity):
            raise ValueError(f"n_functions must lie in [1, {capacity}]")
        if self.with_callees and self.noise_callees > self.helpers_per_binary:
            raise ValueError("noise_callees cannot exceed helpers_per_binary")
        if not (0.0 <= self.test_fraction <= 1.0):
            raise ValueError("test_fraction must lie in [0, 1]")


@dataclass
class Concept:
    verb: str
    obj: str
    adj: str
    qual: int


@dataclass
class SyntheticData:
    corpus: Corpus
    sources: list[SourceFunction]
    descriptions: list[DescriptionLabel]
    concepts: dict[str, Concept]
    targets: dict[str, list[str]]  # source id -> its target function ids, in generation order
    duplicates: dict[str, str] = field(default_factory=dict)  # copy id -> original id
    train_sources: list[str] = field(default_factory=list)
    test_sources: list[str] = field(default_factory=list)

    def target_ids(self, sources: list[str] | None = None) -> list[str]:
        sources = list(self.targets) if sources is None else sources
        return [fid for s in sources for fid in self.targets[s]]

    def primary_descriptions(self, sources: list[str] | None = None) -> dict[str, DescriptionLabel]:
        """Source id to its main (non-rephrased) description."""
        wanted = set(self.targets) if sources is None else set(sources)
        return {d.function_ref: d for d in self.descriptions if d.id == d.function_ref and d.function_ref in wanted}


def describe(c: Concept, style: int = 0) -> str:
    qual = QUALIFIERS[c.qual][0]
    if style == 0:
        return f"{c.verb.capitalize()} the {c.adj} {c.obj} {qual}."
    return f"Routine that will {c.verb} a {c.adj} {c.obj} {qual}."


def _pick(rng: np.random.Generator, word: str, synonyms: tuple[str, ...], overlap: float) -> str:
    return word if rng.random() < overlap else synonyms[int(rng.integers(len(synonyms)))]


def _noise_lines(rng: np.random.Generator, nvars: int, count: int) -> list[str]:
    lines = []
    for _ in range(count):
        a, b = (int(x) for x in rng.integers(2, 2 + nvars, size=2))
        off = int(rng.integers(1, 64)) * 8
        kind = int(rng.integers(7))
        if kind == 0:
            lines.append(f"  v{a} = *(_DWORD *)(a1 + {off});")
        elif kind == 1:
            lines.append(f"  v{a} += v{b} ^ 0x{int(rng.integers(1, 1 << 16)):X};")
        elif kind == 2:
            lines.append(f"  if ( v{a} > {int(rng.integers(1, 500))} )")
            lines.append(f"    v{b} = {int(rng.integers(0, 100))};")
        elif kind == 3:
            lines.append("  for ( i = 0; i < a2; ++i )")
            lines.append(f"    v{a} = (v{a} << {int(rng.integers(1, 16))}) | (v{b} >> {int(rng.integers(1, 16))});")
        elif kind == 4:
            lines.append(f"  *(_QWORD *)(a1 + {off}) = v{a};")
        elif kind == 5:
            imp = _LIB_IMPORTS[int(rng.integers(4))]
            lines.append(f"  v{a} = {imp}(v{b}, a1, {int(rng.integers(1, 256))});")
        else:
            lines.append(f"  LODWORD(v{a}) = v{b} & 0x{int(rng.integers(1, 1 << 12)):X};")
    return lines


def _function(name: str, nvars: int, body: list[str], ret: str = "v2") -> str:
    decls = [f"  __int64 v{i}; // [rsp+{8 * i:X}h] [rbp-{8 * (nvars + 2 - i):X}h]" for i in range(2, 2 + nvars)]
    return "\n".join(
        [f"__int64 __fastcall {name}(__int64 a1, unsigned int a2)", "{", *decls, "  int i;", "", *body, f"  return {ret};", "}"]
    )


class _Binary:
    """Address allocator plus the stripped helper pool of one binary."""

    def __init__(self, binary_id: str, rng: np.random.Generator, cfg: SyntheticConfig, rows: list[dict]):
        self.binary_id = binary_id
        self.rng = rng
        self.rows = rows
        self.next_addr = 0x100000000 + int(rng.integers(0, 0x1000)) * 0x10
        self.helpers: list[int] = []
        if cfg.with_callees:
            self.helpers = [self.alloc() for _ in range(cfg.helpers_per_binary)]
            for i, addr in enumerate(self.helpers):
                calls = [f"  sub_{self.helpers[j]:X}(a1, v2);" for j in rng.choice(len(self.helpers), 2, replace=False) if j != i]
                body = _noise_lines(rng, 3, int(rng.integers(6, 12))) + calls
                self.emit(addr, _function(f"sub_{addr:X}", 3, body), None)

    def alloc(self) -> int:
        addr = self.next_addr
        self.next_addr += int(self.rng.integers(4, 64)) * 0x10
        return addr

    def emit(self, addr: int, code: str, source_id: str | None) -> str:
        fid = f"{self.binary_id}:{addr:x}"
        self.rows.append({"id": fid, "binary_id": self.binary_id, "address": addr, "pseudocode": code, "source_id": source_id})
        return fid


def _informative_callee(b: _Binary, c: Concept, cfg: SyntheticConfig) -> int:
    rng = b.rng
    toks = QUALIFIERS[c.qual][1]
    qa, qb = toks[int(rng.integers(len(toks)))], toks[int(rng.integers(len(toks)))]
    otok = _pick(rng, c.obj, OBJECTS[c.obj], cfg.lexical_overlap)
    s1, s2 = (_IMPORT_SUFFIXES[int(i)] for i in rng.choice(len(_IMPORT_SUFFIXES), 2, replace=False))
    status = _STATUS_WORDS[int(rng.integers(len(_STATUS_WORDS)))]
    addr = b.alloc()
    body = [
        f'  v2 = {qa}_{s1}(a1, "{qb} {otok}");',
        "  if ( !v2 )",
        f'    puts("{qa} {s2} {status}");',
        *_noise_lines(rng, 3, int(rng.integers(3, 7))),
        f"  {qb}_{s2}(v2, a2);",
    ]
    b.emit(addr, _function(f"sub_{addr:X}", 3, body), None)
    return addr


def _target(b: _Binary, c: Concept, cfg: SyntheticConfig, source_id: str) -> str:
    rng = b.rng
    callees: list[int] = []
    if cfg.with_callees:
        callees += [_informative_callee(b, c, cfg) for _ in range(cfg.informative_callees)]
        callees += [b.helpers[int(j)] for j in rng.choice(len(b.helpers), cfg.noise_callees, replace=False)]
        rng.shuffle(callees)
    vtok = _pick(rng, c.verb, VERBS[c.verb], cfg.lexical_overlap)
    otok = _pick(rng, c.obj, OBJECTS[c.obj], cfg.lexical_overlap)
    status = _STATUS_WORDS[int(rng.integers(len(_STATUS_WORDS)))]
    nvars = int(rng.integers(3, 6))
    body = _noise_lines(rng, nvars, int(rng.integers(5, 10)))
    body += ["  if ( !a1 )", "  {", f'    printf("{vtok} {otok}: {status}\\n");', "    return 0;", "  }"]
    for addr in callees:
        body.append(f"  v{int(rng.integers(2, 2 + nvars))} = sub_{addr:X}(a1, v2);")
    body += _noise_lines(rng, nvars, int(rng.integers(2, 6)))
    addr = b.alloc()
    return b.emit(addr, _function(f"sub_{addr:X}", nvars, body), source_id)


def _grade(rng: np.random.Generator, low_rate: float) -> str:
    u = rng.random()
    if u < low_rate:
        return "C" if rng.random() < 0.7 else "D"
    return "A" if rng.random() < 0.75 else "B"


def generate(cfg: SyntheticConfig = SyntheticConfig()) -> SyntheticData:
    rng = np.random.default_rng(cfg.seed)
    nv, no, na, nq = len(VERBS), len(OBJECTS), len(ADJECTIVES), len(QUALIFIERS)
    verbs, objects = list(VERBS), list(OBJECTS)
    picks = rng.choice(nv * no * na * nq, size=cfg.n_functions, replace=False)

    rows: list[dict] = []
    sources: list[SourceFunction] = []
    descriptions: list[DescriptionLabel] = []
    concepts: dict[str, Concept] = {}
    targets: dict[str, list[str]] = {}
    binaries: dict[str, _Binary] = {}

    def binary(group: int, variant: int) -> _Binary:
        bid = f"bin{group:04d}_O{variant}"
        if bid not in binaries:
            binaries[bid] = _Binary(bid, np.random.default_rng([cfg.seed, group, variant]), cfg, rows)
        return binaries[bid]

    for i, code in enumerate(int(p) for p in picks):
        code, q = divmod(code, nq)
        code, a = divmod(code, na)
        v, o = divmod(code, no)
        c = Concept(verbs[v], objects[o], ADJECTIVES[a], q)
        sid = f"src{i:05d}"
        concepts[sid] = c
        group = i // cfg.sources_per_binary
        variants = 2 if rng.random() < cfg.twin_rate else 1
        targets[sid] = [_target(binary(group, var), c, cfg, sid) for var in range(variants)]
        text = describe(c)
        sources.append(
            SourceFunction(sid, f"proj{group:04d}", "1.0", f"src/{c.obj}.c", f"{c.verb}_{c.adj}_{c.obj}", f"/* {text} */")
        )
        descriptions.append(DescriptionLabel(sid, text, grade=_grade(rng, cfg.low_grade_rate), source="synthetic", id=sid))
        for r in range(cfg.rephrasings):
            descriptions.append(DescriptionLabel(sid, describe(c, 1 + r), grade="A", source="synthetic", id=f"{sid}#r{r + 1}"))

    # Exact duplicates: byte-identical pseudocode under a fresh id and binary.
    duplicates: dict[str, str] = {}
    if cfg.exact_duplicates:
        by_id = {r["id"]: r for r in rows}
        all_targets = [fid for fids in targets.values() for fid in fids]
        for n, j in enumerate(rng.choice(len(all_targets), cfg.exact_duplicates, replace=False)):
            orig = by_id[all_targets[int(j)]]
            bid = f"dup{n:04d}"
            copy = dict(orig, id=f"{bid}:{orig['address']:x}", binary_id=bid)
            rows.append(copy)
            duplicates[copy["id"]] = orig["id"]

    corpus = Corpus(ingest_binary(rows))
    order = list(targets)
    perm = rng.permutation(len(order))
    n_test = int(round(cfg.test_fraction * len(order)))
    test = sorted(order[int(i)] for i in perm[:n_test])
    train = sorted(order[int(i)] for i in perm[n_test:])
    return SyntheticData(corpus, sources, descriptions, concepts, targets, duplicates, train, test)

