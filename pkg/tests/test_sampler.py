"""Random negatives, hard-negative mining and pair construction."""

from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stripsearch.corpus import Corpus, DescriptionLabel
from stripsearch.sampler import (
    DataPair,
    DescriptionSimilarity,
    InsufficientCandidatesError,
    SamplerConfig,
    build_pairs,
    descriptions_by_function,
    mine_hard_negative,
    sample_random_negatives,
)

from .conftest import make_record

WORDS = ["alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel", "india", "juliet", "kilo", "lima"]


def _corpus(n_sources: int = 10, twins: int = 1) -> Corpus:
    recs = []
    for s in range(n_sources):
        for t in range(twins):
            recs.append(make_record(f"s{s:03d}_O{t}", f"int f{s}()\n{{\n  return {s};\n}}", source_id=f"src{s:03d}"))
    return Corpus(recs)


def _descs(n_sources: int, grades: str | None = None) -> list[DescriptionLabel]:
    out = []
    for s in range(n_sources):
        g = "A" if grades is None else grades[s % len(grades)]
        text = f"{WORDS[s % len(WORDS)]} {WORDS[(s * 5 + 1) % len(WORDS)]} handler number {s}"
        out.append(DescriptionLabel(f"src{s:03d}", text, grade=g, id=f"d{s:03d}"))
    return out


# ---------------------------------------------------------------------------
# random negatives
# ---------------------------------------------------------------------------


class TestRandomNegatives:
    def test_all_eligible_returned(self):
        corpus = _corpus(11)
        pos = corpus["s000_O0"]
        out = sample_random_negatives(pos, corpus, 10, seed=3)
        assert sorted(out) == sorted(i for i in corpus.ids() if i != pos.id)
        assert out == sample_random_negatives(pos, corpus, 10, seed=3)

    def test_twin_excluded(self):
        corpus = _corpus(6, twins=3)
        pos = corpus["s002_O0"]
        for seed in range(20):
            out = sample_random_negatives(pos, corpus, 10, seed)
            assert not any(fid.startswith("s002_") for fid in out)

    def test_insufficient(self):
        corpus = _corpus(4, twins=2)
        with pytest.raises(InsufficientCandidatesError):
            sample_random_negatives(corpus["s000_O0"], corpus, 7, 0)

    def test_seed_changes_sample(self):
        corpus = _corpus(40)
        pos = corpus["s000_O0"]
        assert sample_random_negatives(pos, corpus, 5, 1) != sample_random_negatives(pos, corpus, 5, 2)

    @given(st.integers(0, 10_000), st.integers(1, 20))
    @settings(max_examples=50, deadline=None)
    def test_without_replacement(self, seed, count):
        corpus = _corpus(25, twins=2)
        out = sample_random_negatives(corpus["s001_O1"], corpus, count, seed)
        assert len(out) == len(set(out)) == count


# ---------------------------------------------------------------------------
# hard negatives
# ---------------------------------------------------------------------------


def _fixed_sim(table):
    return lambda q, t: table[t]


class TestMineHardNegative:
    def test_first_below_threshold(self):
        table = {"a": 0.99, "b": 0.97, "c": 0.94, "d": 0.60}
        cands = [("d", ["d"]), ("a", ["a"]), ("c", ["c"]), ("b", ["b"])]
        assert mine_hard_negative("q", cands, _fixed_sim(table)) == "c"

    def test_none_qualifies(self):
        table = {"a": 0.99, "b": 0.96}
        assert mine_hard_negative("q", [("a", ["a"]), ("b", ["b"])], _fixed_sim(table)) is None

    def test_all_qualify_gives_max(self):
        table = {"a": 0.3, "b": 0.9, "c": 0.5}
        assert mine_hard_negative("q", [(k, [k]) for k in table], _fixed_sim(table)) == "b"

    def test_boundary_inclusive(self):
        assert mine_hard_negative("q", [("a", ["a"])], _fixed_sim({"a": 0.95})) == "a"

    def test_undescribed_skipped(self):
        assert mine_hard_negative("q", [("a", [])], _fixed_sim({})) is None

    def test_best_description_counts(self):
        table = {"x1": 0.2, "x2": 0.99, "y": 0.5}
        assert mine_hard_negative("q", [("x", ["x1", "x2"]), ("y", ["y"])], _fixed_sim(table)) == "y"

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=15), st.floats(0.01, 1.0))
    def test_returned_score_within_threshold(self, scores, thr):
        table = {f"c{i}": s for i, s in enumerate(scores)}
        got = mine_hard_negative("q", [(k, [k]) for k in table], _fixed_sim(table), thr)
        eligible = [s for s in scores if s <= thr]
        if got is None:
            assert not eligible
        else:
            assert table[got] <= thr and table[got] == max(eligible)


def test_description_similarity_is_cosine():
    sim = DescriptionSimilarity()
    assert sim("read file", "read file") == pytest.approx(1.0)
    assert sim("read file", "compress image") == pytest.approx(0.0, abs=0.05)
    assert sim("open socket", "socket open") == pytest.approx(1.0)
    assert sim("a b", "c d") == 0.0  # single letters carry no terms


# ---------------------------------------------------------------------------
# pairs
# ---------------------------------------------------------------------------


class TestBuildPairs:
    CFG = SamplerConfig(negatives=4, mining_pool=8)

    def test_all_low_grades(self):
        res = build_pairs(_corpus(12), _descs(12, "CD"), self.CFG)
        assert res.pairs == [] and res.skipped_grade == 12 == res.skipped

    def test_single_a_pair(self):
        corpus = Corpus([*_corpus(100)])
        res = build_pairs(corpus, _descs(1), SamplerConfig(negatives=8, mining_pool=16))
        (pair,) = res.pairs
        assert pair.positive_id == "s000_O0"
        assert len(pair.random_negative_ids) == 8
        assert pair.hard_negative_id is None  # no other function is described

    def test_mixed_grades_count(self):
        grades = "ABCDAB"
        descs = _descs(30, grades)
        res = build_pairs(_corpus(30, twins=2), descs, self.CFG)
        expected = 2 * sum(1 for d in descs if d.grade in "AB")  # two compiled twins per source
        assert len(res.pairs) == expected
        assert res.skipped_grade == sum(1 for d in descs if d.grade in "CD")

    def test_invariants_exhaustive(self):
        corpus = _corpus(30, twins=2)
        res = build_pairs(corpus, _descs(30), self.CFG)
        for p in res.pairs:
            src = corpus[p.positive_id].source_id
            negs = p.random_negative_ids + ([p.hard_negative_id] if p.hard_negative_id else [])
            assert p.positive_id not in negs
            assert all(corpus[n].source_id != src for n in negs)
            assert all(n in corpus for n in negs)
            assert len(set(negs)) == len(negs)

    def test_hard_negatives_mined_under_threshold(self):
        corpus = _corpus(30)
        descs = _descs(30)
        res = build_pairs(corpus, descs, self.CFG)
        assert any(p.hard_negative_id for p in res.pairs)
        sim = DescriptionSimilarity()
        texts = descriptions_by_function(corpus, descs)
        for p in res.pairs:
            if p.hard_negative_id:
                q = next(d.text_en for d in descs if d.id == p.query_id)
                assert max(sim(q, t) for t in texts[p.hard_negative_id]) <= 0.95

    def test_deterministic_and_seeded(self):
        corpus, descs = _corpus(20), _descs(20)
        a = build_pairs(corpus, descs, self.CFG).pairs
        assert a == build_pairs(corpus, descs, self.CFG).pairs
        other = build_pairs(corpus, descs, SamplerConfig(negatives=4, mining_pool=8, seed=9)).pairs
        assert [p.random_negative_ids for p in a] != [p.random_negative_ids for p in other]

    def test_unresolved_and_insufficient(self):
        corpus = _corpus(3)
        descs = [*_descs(3), DescriptionLabel("nowhere", "text", grade="A")]
        res = build_pairs(corpus, descs, self.CFG)
        assert res.skipped_unresolved == 1
        assert res.skipped_insufficient == 3

    def test_described_only_pool(self):
        corpus = _corpus(30)
        res = build_pairs(corpus, _descs(12), SamplerConfig(negatives=4, mining_pool=8, described_only=True))
        described = {f"s{s:03d}_O0" for s in range(12)}
        assert all(set(p.random_negative_ids) <= described for p in res.pairs)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SamplerConfig(threshold=0.0)
        with pytest.raises(ValueError):
            SamplerConfig(negatives=8, mining_pool=4)

    def test_pair_json_roundtrip(self):
        p = DataPair("q", "p", None, ["a", "b"], 5)
        assert DataPair.from_json(p.to_json()) == p
        with pytest.raises(ValueError):
            DataPair("q", "p", "p", [], 0)
        with pytest.raises(ValueError):
            DataPair("q", "p", None, ["p"], 0)
