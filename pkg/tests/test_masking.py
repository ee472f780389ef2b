import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmasr.data import ManifestRecord, SyntheticTaskConfig, WordAlignment, generate_synthetic
from mmasr.features import silence_vector
from mmasr.masking import (
    MaskLog,
    MaskSpec,
    apply_mask,
    default_color_lexicon,
    frame_range,
    incongruent_shuffle,
    mask_dataset,
    mask_stats,
    read_mask_log,
    select_color_words,
    select_noun_words,
    select_progressive,
    swap_visuals,
)

SIL = silence_vector()


def record(words, frames_per_word=10, utt_id="u", tags=None, seed=0):
    rng = np.random.default_rng(seed)
    n = len(words) * frames_per_word
    aligns = [WordAlignment(w, i * frames_per_word / 100, (i + 1) * frames_per_word / 100) for i, w in enumerate(words)]
    return ManifestRecord(utt_id, list(words), rng.normal(size=(n, 43)), aligns, tags, rng.normal(size=4))


class TestLexicon:
    def test_default_has_21_lowercase_words(self):
        lex = default_color_lexicon()
        assert len(lex) == 21 and len(set(lex)) == 21
        assert all(w == w.lower() for w in lex)
        assert {"red", "blue", "green"} <= set(lex)


class TestSelection:
    def test_color(self):
        assert select_color_words("the blue car".split(), {"blue"}) == {1}

    def test_color_all_occurrences(self):
        assert select_color_words("red and red".split(), {"red"}) == {0, 2}

    def test_color_none(self):
        assert select_color_words("a big house".split(), default_color_lexicon()) == set()

    def test_color_exact_match(self):
        assert select_color_words("reddish Red".split(), {"red"}) == set()

    def test_noun_probabilities(self):
        toks = "a dog sees a cat".split()
        tags = ["DT", "NN", "VBZ", "DT", "NN"]
        rng = np.random.default_rng(0)
        assert select_noun_words(toks, tags, 1.0, rng) == {1, 4}
        assert select_noun_words(toks, tags, 0.0, rng) == set()

    def test_noun_length_mismatch(self):
        with pytest.raises(ValueError):
            select_noun_words(["a", "b"], ["NN"], 0.3, np.random.default_rng(0))

    def test_noun_seeded(self):
        toks = ["x"] * 50
        tags = ["NN"] * 50
        a = select_noun_words(toks, tags, 0.3, np.random.default_rng(4))
        b = select_noun_words(toks, tags, 0.3, np.random.default_rng(4))
        assert a == b and 5 < len(a) < 25

    def test_noun_rng_keyed_by_utterance(self):
        # order of processing does not change per-utterance choices
        recs = [record(["n"] * 6, utt_id=f"u{i}", tags=["NN"] * 6, seed=i) for i in range(5)]
        spec = MaskSpec("noun", probability=0.5, seed=3)
        _, log_a = mask_dataset(recs, spec)
        _, log_b = mask_dataset(recs[::-1], spec)
        assert log_a.masked_indices() == log_b.masked_indices()

    def test_progressive(self):
        assert select_progressive(list("abcde"), 2) == {3, 4}
        assert select_progressive(list("abc"), 10) == {0, 1, 2}
        with pytest.raises(ValueError):
            select_progressive(list("abc"), 0)

    @given(st.integers(0, 12), st.integers(1, 10))
    def test_progressive_monotone(self, n, k):
        toks = ["w"] * n
        assert select_progressive(toks, k) <= select_progressive(toks, k + 2)


class TestMaskSpec:
    def test_parse(self):
        assert MaskSpec.parse("progressive:4").k == 4
        assert MaskSpec.parse("noun").probability == 0.3
        assert MaskSpec.parse("noun:0.5").probability == 0.5
        assert len(MaskSpec.parse("color").lexicon) == 21

    def test_test_sets(self):
        assert MaskSpec("none").test_set == "T"
        assert MaskSpec("color", ("red",)).test_set == "T_C"
        assert MaskSpec("noun").test_set == "T_N"
        assert MaskSpec("progressive", k=6).test_set == "P6"

    @pytest.mark.parametrize("kw", [dict(kind="color"), dict(kind="noun", probability=1.5), dict(kind="progressive", k=0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            MaskSpec(**kw)


class TestApplyMask:
    def test_empty_selection_identity(self):
        rec = record(["a", "b"])
        out, entries, n = apply_mask(rec.features, rec.alignments, [], SIL)
        assert np.array_equal(out, rec.features) and entries == [] and n == 0

    def test_span_frames(self):
        feats = np.random.default_rng(0).normal(size=(40, 43))
        al = [WordAlignment("w", 0.10, 0.30)]
        out, entries, n = apply_mask(feats, al, [0], SIL)
        assert (out[10:30] == SIL).all()
        assert np.array_equal(out[:10], feats[:10]) and np.array_equal(out[30:], feats[30:])
        assert (entries[0].start_frame, entries[0].end_frame, n) == (10, 30, 20)

    @pytest.mark.parametrize("start,end,lo,hi", [(0.0, 0.01, 0, 1), (0.105, 0.2, 11, 20), (0.1, 0.101, 10, 11),
                                                 (0.333, 0.667, 34, 67)])
    def test_frame_start_inside_half_open_span(self, start, end, lo, hi):
        assert frame_range(WordAlignment("w", start, end)) == (lo, hi)
        # oracle: frame f is masked iff its start time f*10ms lies in [start, end)
        expect = [f for f in range(100) if start * 1000 <= f * 10 < end * 1000]
        assert expect == list(range(lo, hi))

    def test_adjacent_words_no_double_count(self):
        rec = record(["a", "b", "c"])
        _, entries, n = apply_mask(rec.features, rec.alignments, [0, 1], SIL)
        assert n == 20 and len(entries) == 2

    def test_idempotent(self):
        rec = record(["a", "b", "c"])
        once, _, _ = apply_mask(rec.features, rec.alignments, [1], SIL)
        twice, _, _ = apply_mask(once, rec.alignments, [1], SIL)
        assert np.array_equal(once, twice)

    def test_alignment_past_end(self):
        with pytest.raises(ValueError, match="utt9"):
            apply_mask(np.zeros((5, 43)), [WordAlignment("w", 0.0, 0.2)], [0], SIL, utt_id="utt9")

    def test_missing_alignment(self):
        with pytest.raises(ValueError, match="no alignment"):
            apply_mask(np.zeros((5, 43)), {}, [0], SIL)

    def test_record_fields_untouched(self):
        rec = record(["red", "car"])
        out, mlog = mask_dataset([rec], MaskSpec("color", ("red",)))
        new = out[0]
        assert new.transcript == rec.transcript and new.alignments == rec.alignments
        assert np.array_equal(new.visual, rec.visual)
        assert not np.array_equal(new.features, rec.features)
        assert rec.features[0, 0] != SIL[0]  # input not modified

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 8), st.integers(0, 1000))
    def test_only_selected_spans_change(self, n_words, seed):
        rng = np.random.default_rng(seed)
        rec = record([f"w{i}" for i in range(n_words)], frames_per_word=int(rng.integers(1, 6)), seed=seed)
        sel = {i for i in range(n_words) if rng.random() < 0.5}
        out, _, n = apply_mask(rec.features, rec.alignments, sel, SIL)
        span = np.zeros(len(rec.features), dtype=bool)
        for i in sel:
            lo, hi = frame_range(rec.alignments[i])
            span[lo:hi] = True
        changed = (out != rec.features).any(axis=1)
        assert not changed[~span].any()
        assert (out[span] == SIL).all() and n == span.sum()


class TestProgressiveMonotone:
    def test_frame_sets_nested(self):
        recs = generate_synthetic(SyntheticTaskConfig(utterances=10, words_per_utterance=7, seed=1))
        prev = None
        for k in (2, 4, 6, 8, 10):
            masked, mlog = mask_dataset(recs, MaskSpec("progressive", k=k))
            sets = {r.utt_id: set(np.flatnonzero((m.features != r.features).any(axis=1)))
                    for r, m in zip(recs, masked)}
            if prev is not None:
                assert all(prev[u] <= sets[u] for u in sets)
                assert mlog.frames_masked >= prev_frames
            prev, prev_frames = sets, mlog.frames_masked


class TestMaskStats:
    def test_hand_counted(self):
        recs = [record(w.split(), utt_id=f"u{i}") for i, w in enumerate(["a red b c", "a b c d", "a b c red"])]
        _, mlog = mask_dataset(recs, MaskSpec("color", ("red",)))
        pct, mean = mask_stats(mlog, recs)
        assert mlog.words_masked == 2
        assert pct == pytest.approx(100 * 2 / 12) and round(pct, 2) == 16.67
        assert mean == pytest.approx(2 / 3)

    def test_empty(self):
        assert mask_stats(MaskLog(), []) == (0.0, 0.0)
        recs = [record(["a"])]
        assert mask_stats(MaskLog(), recs) == (0.0, 0.0)

    def test_inconsistent(self):
        mlog = MaskLog()
        mlog.add("ghost", [], 0)
        with pytest.raises(ValueError, match="ghost"):
            mask_stats(mlog, [record(["a"])])


class TestMaskLogFile:
    def test_round_trip(self, tmp_path):
        recs = [record(["red", "car", "red"], utt_id="x1")]
        _, mlog = mask_dataset(recs, MaskSpec("color", ("red",)))
        mlog.write(tmp_path / "m.log")
        assert (tmp_path / "m.log").read_text() == "x1 red 0 10 color\nx1 red 20 30 color\n"
        assert read_mask_log(tmp_path / "m.log") == {"x1": [("red", 0, 10, "color"), ("red", 20, 30, "color")]}


class TestIncongruent:
    def test_two_is_swap(self):
        assert incongruent_shuffle(["a", "b"], 0) == {"a": "b", "b": "a"}

    @pytest.mark.parametrize("n", [2, 3, 10, 500])
    def test_no_fixed_points(self, n):
        ids = [f"u{i}" for i in range(n)]
        m = incongruent_shuffle(ids, 7)
        assert sorted(m.values()) == sorted(ids)
        assert all(k != v for k, v in m.items())

    def test_seeded(self):
        ids = [f"u{i}" for i in range(30)]
        assert incongruent_shuffle(ids, 5) == incongruent_shuffle(ids, 5)
        assert incongruent_shuffle(ids, 5) != incongruent_shuffle(ids, 6)

    @pytest.mark.parametrize("ids", [[], ["a"]])
    def test_too_few(self, ids):
        with pytest.raises(ValueError, match="cannot derange"):
            incongruent_shuffle(ids, 0)

    def test_roughly_uniform_over_derangements(self):
        # 3 items have exactly 2 derangements
        rng = np.random.default_rng(0)
        counts = {}
        for _ in range(2000):
            m = tuple(incongruent_shuffle(["a", "b", "c"], rng).values())
            counts[m] = counts.get(m, 0) + 1
        assert len(counts) == 2
        assert abs(min(counts.values()) - 1000) < 120

    def test_swap_visuals(self):
        recs = [record(["a"], utt_id=f"u{i}", seed=i) for i in range(3)]
        m = incongruent_shuffle([r.utt_id for r in recs], 1)
        out = swap_visuals(recs, m)
        by = {r.utt_id: r for r in recs}
        for r in out:
            assert np.array_equal(r.visual, by[m[r.utt_id]].visual)
            assert np.array_equal(r.features, by[r.utt_id].features)
