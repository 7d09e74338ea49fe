"""Tokenizer, structure extraction, filters, MinHash and dedup."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stripsearch.corpus import (
    Corpus,
    DescriptionLabel,
    FunctionRecord,
    IncompatibleSignatureError,
    SourceFunction,
    Token,
    binary_filter,
    dedup,
    estimate_jaccard,
    extract_structure,
    ingest_binary,
    is_stripped_name,
    minhash_signature,
    source_filter,
    tokenize,
)

from .conftest import make_record

FIG1B = """__int64 __fastcall sub_100000A68(__int64 result, unsigned int *a2)
{
  unsigned int v3; // [xsp+8h] [xbp-28h]
  unsigned int v4; // [xsp+Ch] [xbp-24h]

  v3 = *a2;
  v4 = a2[1];
  puts("xtea");
  return sub_100000B00(result, v3, v4);
}"""


# ---------------------------------------------------------------------------
# tokenize
# ---------------------------------------------------------------------------


class TestTokenize:
    def test_empty(self):
        assert tokenize("") == []

    def test_simple_assignment(self):
        assert tokenize("v3 = 0;") == [
            Token("ident", "v3"),
            Token("op", "="),
            Token("num", "0"),
            Token("punct", ";"),
        ]

    def test_string_literal_preserved(self):
        toks = tokenize('puts("xtea")')
        strings = [t for t in toks if t.kind == "string"]
        assert strings == [Token("string", "xtea")]

    def test_comments_dropped(self):
        assert tokenize("a // trailing\n/* block\ncomment */ b") == [Token("ident", "a"), Token("ident", "b")]

    def test_escapes_kept_verbatim(self):
        toks = tokenize(r'printf("a\"b\n");')
        assert Token("string", r"a\"b\n") in toks

    def test_hex_and_suffixes(self):
        kinds = [t.kind for t in tokenize("0x1Fu + 10LL - 1.5f")]
        assert kinds == ["num", "op", "num", "op", "num"]

    def test_multichar_operators(self):
        ops = [t.text for t in tokenize("a->b <<= c && d != e") if t.kind == "op"]
        assert ops == ["->", "<<=", "&&", "!="]

    def test_unknown_characters_never_fail(self):
        toks = tokenize("#pragma @ `x` \"unterminated")
        assert toks  # degrades to punct tokens

    @given(st.text(max_size=200))
    @settings(max_examples=200, deadline=None)
    def test_total_and_deterministic(self, text):
        assert tokenize(text) == tokenize(text)

    def test_roundtrip_through_jsonl(self, tmp_path):
        rec = ingest_binary([{"id": "f", "binary_id": "b", "address": 1, "pseudocode": FIG1B}])[0]
        Corpus([rec]).dump(tmp_path / "c.jsonl")
        loaded = Corpus.load(tmp_path / "c.jsonl")["f"]
        assert loaded.tokens == rec.tokens == tokenize(FIG1B)
        assert loaded == rec


# ---------------------------------------------------------------------------
# extract_structure
# ---------------------------------------------------------------------------


class TestExtractStructure:
    def test_stripped_name_absent(self):
        st_ = extract_structure(FIG1B)
        assert st_.name_symbol is None
        assert st_.declared_name == "sub_100000A68"

    def test_named_function(self):
        src = "void __cdecl xtea_encode(uint32_t *v, uint32_t *k)\n{\n  int i;\n  for ( i = 0; i < 32; ++i )\n    v[0] += k[i & 3];\n}"
        assert extract_structure(src).name_symbol == "xtea_encode"

    def test_no_calls(self):
        src = "int __fastcall f(int a)\n{\n  int b = a + 1;\n  if ( b > 3 )\n    b = 0;\n  return (b);\n}"
        assert extract_structure(src).callee_ids == []

    def test_calls_resolved_or_external(self):
        st_ = extract_structure(FIG1B, {"sub_100000B00": "bin:100000b00"})
        assert st_.callee_ids == ["ext:puts", "bin:100000b00"]
        assert st_.string_literals == ["xtea"]
        assert st_.loc == len(FIG1B.splitlines())

    def test_keywords_and_macros_are_not_calls(self):
        src = "int f(int a)\n{\n  if ( a ) return sizeof(a);\n  LODWORD(a) = 0;\n  while ( g(a) ) ;\n  return a;\n}"
        assert extract_structure(src).callee_ids == ["ext:g"]

    def test_self_call_excluded_and_duplicates_merged(self):
        src = "int sub_10(int a)\n{\n  h(a);\n  h(a);\n  return sub_10(a - 1);\n}"
        assert extract_structure(src).callee_ids == ["ext:h"]

    def test_thunk_detection(self):
        assert extract_structure("int __fastcall sub_1(void *p)\n{\n  return sub_2(p);\n}").is_thunk
        assert extract_structure("void j_free(void *p)\n{\n  free(p);\n}").is_thunk
        not_thunk = "int f(int a)\n{\n  if ( a )\n    return g(a);\n  return 0;\n}"
        assert not extract_structure(not_thunk).is_thunk

    def test_malformed_degrades(self):
        st_ = extract_structure("}}}{ ( ) ;; \"")
        assert st_.callee_ids == [] and st_.name_symbol is None

    def test_custom_stripped_pattern(self):
        src = "int FUN_00401000(int a)\n{\n  return a;\n}"
        assert extract_structure(src).name_symbol == "FUN_00401000"
        assert extract_structure(src, stripped_pattern=r"FUN_[0-9a-fA-F]+").name_symbol is None

    def test_is_stripped_name(self):
        assert is_stripped_name("sub_100000A68")
        assert not is_stripped_name("sub_main")
        assert is_stripped_name(None)  # no symbol at all is as good as stripped

    @given(st.text(max_size=300))
    @settings(max_examples=150, deadline=None)
    def test_never_raises(self, text):
        st_ = extract_structure(text)
        assert st_.loc >= 0
        toks = [t.text for t in tokenize(text) if t.kind == "string"]
        assert st_.string_literals == toks


def test_ingest_binary_resolves_within_binary(small_binary):
    target = small_binary["b:1000"]
    assert target.callee_ids == ["b:1800", "b:2000", "ext:memcpy"]
    assert target.name_symbol is None
    assert small_binary["b:1800"].name_symbol == "xtea_encode"


def test_ingest_does_not_resolve_across_binaries():
    rows = [
        {"id": "a:1", "binary_id": "a", "address": 1, "pseudocode": "int sub_1()\n{\n  return helper();\n}"},
        {"id": "c:2", "binary_id": "c", "address": 2, "pseudocode": "int helper()\n{\n  return 0;\n}"},
    ]
    recs = {r.id: r for r in ingest_binary(rows)}
    assert recs["a:1"].callee_ids == ["ext:helper"]


# ---------------------------------------------------------------------------
# records and labels
# ---------------------------------------------------------------------------


def test_source_loc_counts_lines():
    assert SourceFunction("s", "p", "1", "a.c", "f", "a\nb\nc").loc == 3
    assert SourceFunction("s", "p", "1", "a.c", "f", "").loc == 0


def test_record_json_omits_absent_fields():
    obj = make_record("f").to_json()
    assert "name_symbol" not in obj and "source_id" not in obj
    assert "tokens" not in obj


def test_description_validation():
    with pytest.raises(ValueError):
        DescriptionLabel("f", "   ")
    with pytest.raises(ValueError):
        DescriptionLabel("f", "ok", grade="E")
    with pytest.raises(ValueError):
        DescriptionLabel("f", "ok", source="web")
    d = DescriptionLabel("f", "Encrypts a block.", text_cn="加密")
    assert DescriptionLabel.from_json(d.to_json()) == d


def test_negative_address_rejected():
    with pytest.raises(ValueError):
        make_record("f", address=-1)


# ---------------------------------------------------------------------------
# filters
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("loc,keep", [(10, False), (11, True), (0, False)])
def test_source_filter_boundary(loc, keep):
    f = SourceFunction("s", "p", "1", "a.c", "f", "x", loc=loc)
    assert source_filter(f).keep is keep
    assert source_filter(f) == source_filter(f)


@pytest.mark.parametrize(
    "kwargs,verdict",
    [
        (dict(loc=50, is_thunk=True), (False, "thunk")),
        (dict(loc=11), (True, None)),
        (dict(loc=5), (False, "short")),
        (dict(loc=50, is_virtual=True), (False, "virtual")),
        (dict(loc=3, is_thunk=True, is_virtual=True), (False, "short")),
    ],
)
def test_binary_filter(kwargs, verdict):
    rec = make_record("f", **kwargs)
    assert tuple(binary_filter(rec)) == verdict


# ---------------------------------------------------------------------------
# MinHash
# ---------------------------------------------------------------------------


def _toks(words) -> list[Token]:
    return [Token("ident", w) for w in words]


def _exact_jaccard(a, b) -> float:
    a, b = set(a), set(b)
    return len(a & b) / len(a | b) if a | b else 1.0


class TestMinHash:
    def test_deterministic(self):
        t = _toks(["a", "b", "c"])
        assert minhash_signature(t, 64, 3) == minhash_signature(list(reversed(t)), 64, 3)

    def test_self_estimate_is_one(self):
        s = minhash_signature(_toks("abcdef"), 256, 0)
        assert estimate_jaccard(s, s) == 1.0

    def test_half_overlap_estimate(self):
        # |A∩B| = 100, |A∪B| = 200, so exact Jaccard is 0.5.
        a = [f"w{i}" for i in range(150)]
        b = [f"w{i}" for i in range(50, 200)]
        assert _exact_jaccard(a, b) == 0.5
        hits = sum(
            abs(estimate_jaccard(minhash_signature(_toks(a), 256, s), minhash_signature(_toks(b), 256, s)) - 0.5) <= 0.1
            for s in range(100)
        )
        assert hits >= 95

    def test_disjoint_near_zero(self):
        a = _toks(f"a{i}" for i in range(500))
        b = _toks(f"b{i}" for i in range(500))
        assert estimate_jaccard(minhash_signature(a, 256, 0), minhash_signature(b, 256, 0)) <= 0.05

    def test_incompatible(self):
        with pytest.raises(IncompatibleSignatureError):
            estimate_jaccard(minhash_signature(_toks("a"), 64, 0), minhash_signature(_toks("a"), 128, 0))
        with pytest.raises(IncompatibleSignatureError):
            estimate_jaccard(minhash_signature(_toks("a"), 64, 0), minhash_signature(_toks("a"), 64, 1))

    def test_empty_is_flagged(self):
        sig = minhash_signature([], 16, 0)
        assert sig.empty and np.all(sig.values == np.iinfo(np.uint64).max)

    def test_kind_is_part_of_shingle(self):
        a = minhash_signature([Token("ident", "x")], 64, 0)
        b = minhash_signature([Token("string", "x")], 64, 0)
        assert estimate_jaccard(a, b) < 1.0

    @given(st.sets(st.integers(0, 60), max_size=30), st.sets(st.integers(0, 60), max_size=30))
    @settings(max_examples=100, deadline=None)
    def test_symmetric(self, a, b):
        sa = minhash_signature(_toks(map(str, a)), 64, 0)
        sb = minhash_signature(_toks(map(str, b)), 64, 0)
        assert estimate_jaccard(sa, sb) == estimate_jaccard(sb, sa)
        assert 0.0 <= estimate_jaccard(sa, sb) <= 1.0


# ---------------------------------------------------------------------------
# dedup
# ---------------------------------------------------------------------------


def _rec(fid: str, words) -> FunctionRecord:
    return make_record(fid, " ".join(words))


class TestDedup:
    def test_identical_pair(self):
        body = [f"t{i}" for i in range(40)]
        assert dedup([_rec("a", body), _rec("b", body)]) == ["a"]

    def test_disjoint_all_kept(self):
        recs = [_rec(str(k), [f"k{k}_{i}" for i in range(30)]) for k in range(6)]
        assert dedup(recs) == [r.id for r in recs]

    def test_a_b_same_c_distinct(self):
        body = [f"t{i}" for i in range(40)]
        recs = [_rec("A", body), _rec("B", list(reversed(body))), _rec("C", [f"u{i}" for i in range(40)])]
        assert dedup(recs) == ["A", "C"]

    def test_threshold_validation(self):
        with pytest.raises(ValueError):
            dedup([], threshold=1.0 + 1e-9)
        with pytest.raises(ValueError):
            dedup([], threshold=0.0)

    def test_order_stable(self, rng):
        recs = [_rec(str(i), [f"w{j}" for j in rng.choice(60, 20, replace=False)]) for i in range(40)]
        assert dedup(recs, 0.5, 64, 7) == dedup(recs, 0.5, 64, 7)

    def test_matches_pairwise_greedy(self, rng):
        """Banded candidate lookup keeps exactly what a full pairwise scan keeps."""
        vocab = [f"w{j}" for j in range(30)]
        recs = [_rec(str(i), rng.choice(vocab, int(rng.integers(3, 12)), replace=False)) for i in range(80)]
        for t in (0.3, 0.6, 0.95):
            sigs = [minhash_signature(r.tokens, 128, 1) for r in recs]
            kept: list[int] = []
            for i, s in enumerate(sigs):
                if not any(estimate_jaccard(s, sigs[j]) >= t for j in kept):
                    kept.append(i)
            assert dedup(recs, t, 128, 1) == [recs[i].id for i in kept]

    @given(st.lists(st.sets(st.integers(0, 25), min_size=1, max_size=10), min_size=1, max_size=25))
    @settings(max_examples=60, deadline=None)
    def test_kept_size_monotone_in_threshold(self, sets):
        recs = [_rec(str(i), [f"w{x}" for x in s]) for i, s in enumerate(sets)]
        sizes = [len(dedup(recs, t, 64, 0)) for t in (1.0, 0.9, 0.7, 0.5, 0.3, 0.1)]
        assert sizes == sorted(sizes, reverse=True)

    def test_source_functions_supported(self):
        code = "int f(int a)\n{\n  return a * 2 + 1;\n}"
        srcs = [SourceFunction("x", "p", "1", "a.c", "f", code), SourceFunction("y", "p", "1", "b.c", "f", code)]
        assert dedup(srcs) == ["x"]
