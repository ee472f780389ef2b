import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmasr.data import (
    BOS,
    EOS,
    PAD,
    UNK,
    ManifestError,
    ManifestRecord,
    SyntheticTaskConfig,
    WordAlignment,
    attach_alignments,
    bucket_batches,
    build_vocab,
    collate,
    generate_synthetic,
    load_manifest,
    pool_spatial,
    read_alignments,
    write_alignments,
    write_manifest,
)
from mmasr.masking import MaskSpec, mask_dataset

FIXTURE = [
    {"utt_id": "a1", "transcript": "the red car", "features": [[0.0, 1.0], [2.0, 3.0], [4.0, 5.0]],
     "alignments": [["the", 0.0, 0.01], ["red", 0.01, 0.02], ["car", 0.02, 0.03]],
     "pos_tags": ["DT", "JJ", "NN"], "visual": [0.5, -0.5]},
    {"utt_id": "a2", "transcript": "blue sky", "features": [[1.0, 1.0]],
     "alignments": [], "pos_tags": None, "visual": None},
]


def write_lines(path, objs):
    path.write_text("".join(json.dumps(o) + "\n" for o in objs))
    return path


class TestManifest:
    def test_empty(self, tmp_path):
        (tmp_path / "m.jsonl").write_text("")
        assert load_manifest(tmp_path / "m.jsonl") == []

    def test_two_line_fixture(self, tmp_path):
        recs = load_manifest(write_lines(tmp_path / "m.jsonl", FIXTURE))
        assert [r.utt_id for r in recs] == ["a1", "a2"]
        assert recs[0].transcript == ["the", "red", "car"]
        assert recs[0].alignments[1] == WordAlignment("red", 0.01, 0.02)
        np.testing.assert_array_equal(recs[0].features, [[0, 1], [2, 3], [4, 5]])
        np.testing.assert_array_equal(recs[0].visual, [0.5, -0.5])
        assert recs[1].visual is None and recs[1].pos_tags is None

    def test_round_trip_inline(self, tmp_path):
        p = write_lines(tmp_path / "m.jsonl", FIXTURE)
        write_manifest(tmp_path / "n.jsonl", load_manifest(p))
        again = tmp_path / "o.jsonl"
        write_manifest(again, load_manifest(tmp_path / "n.jsonl"))
        assert again.read_text() == (tmp_path / "n.jsonl").read_text()
        first = json.loads((tmp_path / "n.jsonl").read_text().splitlines()[0])
        assert list(first) == ["utt_id", "transcript", "features", "alignments", "pos_tags", "visual"]

    def test_round_trip_files(self, tmp_path):
        recs = generate_synthetic(SyntheticTaskConfig(utterances=3, feat_dim=4))
        write_manifest(tmp_path / "m.jsonl", recs, data_dir="data")
        back = load_manifest(tmp_path / "m.jsonl")
        assert (tmp_path / "data" / "syn00000.feat").exists()
        for a, b in zip(recs, back):
            np.testing.assert_array_equal(b.features, a.features.astype(np.float32))
            np.testing.assert_array_equal(b.visual, a.visual.astype(np.float32))
            assert a.transcript == b.transcript and a.alignments == b.alignments
        write_manifest(tmp_path / "n.jsonl", back)
        assert (tmp_path / "n.jsonl").read_text() == (tmp_path / "m.jsonl").read_text()

    def test_rewrite_into_other_directory(self, tmp_path):
        recs = generate_synthetic(SyntheticTaskConfig(utterances=2, feat_dim=4))
        write_manifest(tmp_path / "a" / "m.jsonl", recs, data_dir="data")
        loaded = load_manifest(tmp_path / "a" / "m.jsonl")
        changed = [loaded[0].replace(features=loaded[0].features + 1.0), loaded[1]]
        write_manifest(tmp_path / "b" / "m.jsonl", changed, data_dir="data")
        back = load_manifest(tmp_path / "b" / "m.jsonl")
        np.testing.assert_array_equal(back[0].features, changed[0].features.astype(np.float32))
        np.testing.assert_array_equal(back[1].visual, loaded[1].visual)

    @pytest.mark.parametrize("bad,msg", [
        ("{not json", "m.jsonl:2:"),
        (json.dumps({"utt_id": "x", "features": [[1.0]]}), "missing field 'transcript'"),
        (json.dumps({"utt_id": "x", "transcript": "a b", "features": [[1.0]], "alignments": [["c", 0, 0.1]]}),
         "not found"),
        (json.dumps({"utt_id": "x", "transcript": "a b", "features": [[1.0]], "pos_tags": ["NN"]}), "POS"),
        (json.dumps({"utt_id": "x", "transcript": "a b", "features": [[1.0]],
                     "alignments": [["a", 0.2, 0.3], ["b", 0.1, 0.2]]}), "overlap"),
        (json.dumps({"utt_id": "x", "transcript": "a", "features": "missing.feat"}), "m.jsonl:2:"),
    ])
    def test_errors_carry_line_number(self, tmp_path, bad, msg):
        p = tmp_path / "m.jsonl"
        p.write_text(json.dumps(FIXTURE[1]) + "\n" + bad + "\n")
        with pytest.raises(ManifestError, match="m.jsonl:2:") as info:
            load_manifest(p)
        assert msg in str(info.value)

    def test_visual_dim_checked(self, tmp_path):
        with pytest.raises(ManifestError, match="expected 3"):
            load_manifest(write_lines(tmp_path / "m.jsonl", FIXTURE), visual_dim=3)

    def test_missing_visual_loads(self, tmp_path):
        # a multimodal model complains later, not the loader
        assert load_manifest(write_lines(tmp_path / "m.jsonl", FIXTURE[1:]))[0].visual is None

    def test_alignment_validation(self):
        with pytest.raises(ValueError):
            WordAlignment("a", 0.3, 0.2)
        with pytest.raises(ValueError):
            WordAlignment("a", -0.1, 0.2)


class TestAlignmentFile:
    def test_round_trip(self, tmp_path):
        recs = generate_synthetic(SyntheticTaskConfig(utterances=2, words_per_utterance=3))
        write_alignments(tmp_path / "a.txt", recs)
        first = (tmp_path / "a.txt").read_text().splitlines()[0].split()
        assert first[0] == "syn00000" and first[1] == "0.000" and first[2] == "0.080"
        table = read_alignments(tmp_path / "a.txt")
        assert table == {r.utt_id: r.alignments for r in recs}

    def test_attach_replaces(self):
        rec = generate_synthetic(SyntheticTaskConfig(utterances=1, words_per_utterance=2))[0]
        new = attach_alignments([rec], {rec.utt_id: rec.alignments[:1]})[0]
        assert new.alignments == rec.alignments[:1]

    def test_bad_line(self, tmp_path):
        (tmp_path / "a.txt").write_text("u1 0.0 0.1 a\nu1 0.1 b\n")
        with pytest.raises(ManifestError, match=":2:"):
            read_alignments(tmp_path / "a.txt")


class TestVocab:
    def test_min_freq(self):
        v = build_vocab([["a", "a", "b"]], min_freq=2)
        assert v.words == ["a"]
        assert v.encode(["b"]) == [UNK]

    def test_reserved(self):
        v = build_vocab([["x"]])
        assert (v.stoi["<pad>"], v.stoi["<s>"], v.stoi["</s>"], v.stoi["<unk>"]) == (PAD, BOS, EOS, UNK)

    def test_order_frequency_then_lexicographic(self):
        v = build_vocab([["b", "c", "a", "c", "b", "d"]])
        assert v.words == ["b", "c", "a", "d"]

    @given(st.lists(st.lists(st.sampled_from(["x", "y", "zz", "w"]), max_size=5), max_size=5))
    def test_round_trip_and_determinism(self, corpus):
        v = build_vocab(corpus)
        assert v == build_vocab(corpus)
        for tr in corpus:
            assert v.decode(v.encode(tr)) == tr


class TestPool:
    def test_constant(self):
        np.testing.assert_array_equal(pool_spatial(np.full((3, 4, 2), 1.5)), [1.5, 1.5])

    def test_one_by_one(self):
        x = np.arange(5.0).reshape(1, 1, 5)
        np.testing.assert_array_equal(pool_spatial(x), np.arange(5.0))

    def test_oracle(self):
        x = np.random.default_rng(0).normal(size=(2, 2, 3))
        ref = [sum(x[i, j, c] for i in range(2) for j in range(2)) / 4 for c in range(3)]
        np.testing.assert_allclose(pool_spatial(x), ref, atol=1e-12)

    @pytest.mark.parametrize("shape", [(0, 2, 2), (2, 2)])
    def test_bad_shape(self, shape):
        with pytest.raises(ValueError):
            pool_spatial(np.zeros(shape))


class TestBatching:
    def test_collate_pads(self):
        recs = generate_synthetic(SyntheticTaskConfig(utterances=2, words_per_utterance=2, feat_dim=3))
        recs[1] = recs[1].replace(features=recs[1].features[:5], transcript=recs[1].transcript[:1])
        v = build_vocab(r.transcript for r in recs)
        b = collate(recs, v)
        assert b.features.shape == (2, 16, 3)
        assert not b.features[1, 5:].any()
        assert b.lengths.tolist() == [16, 5]
        assert b.targets[0, 0] == BOS and b.targets[0, -1] == EOS
        assert b.targets[1].tolist() == [BOS, v.stoi[recs[1].transcript[0]], EOS, PAD]
        assert b.target_mask[1].tolist() == [True, True, True, False]

    def test_empty_transcript_skipped(self):
        recs = generate_synthetic(SyntheticTaskConfig(utterances=2))
        recs[0] = recs[0].replace(transcript=[], alignments=[])
        b = collate(recs, build_vocab([recs[1].transcript]))
        assert len(b) == 1 and b.skipped == 1

    def test_buckets_cover_everything_once(self):
        recs = generate_synthetic(SyntheticTaskConfig(utterances=23))
        batches = bucket_batches(recs, 5, np.random.default_rng(0))
        flat = sorted(i for b in batches for i in b)
        assert flat == list(range(23)) and max(len(b) for b in batches) == 5

    def test_buckets_seeded(self):
        recs = generate_synthetic(SyntheticTaskConfig(utterances=10))
        assert bucket_batches(recs, 3, np.random.default_rng(1)) == bucket_batches(recs, 3, np.random.default_rng(1))


class TestSynthetic:
    def test_bitwise_reproducible(self):
        a = generate_synthetic(SyntheticTaskConfig(utterances=5, seed=3))
        b = generate_synthetic(SyntheticTaskConfig(utterances=5, seed=3))
        for x, y in zip(a, b):
            assert x.transcript == y.transcript
            assert np.array_equal(x.features, y.features) and np.array_equal(x.visual, y.visual)

    def test_token_count(self):
        recs = generate_synthetic(SyntheticTaskConfig(utterances=7, words_per_utterance=4))
        assert sum(len(r.transcript) for r in recs) == 28

    @settings(max_examples=10, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 10), st.integers(0, 100))
    def test_alignments_tile(self, n, fpw, seed):
        recs = generate_synthetic(SyntheticTaskConfig(utterances=3, words_per_utterance=n, frames_per_word=fpw,
                                                      seed=seed, feat_dim=2))
        for r in recs:
            total = sum(round((a.end_s - a.start_s) * 100) for a in r.alignments)
            assert total == r.num_frames == n * fpw
            assert r.alignments[0].start_s == 0.0

    def test_grounded_one_hot(self):
        cfg = SyntheticTaskConfig(utterances=50, grounded=True, n_grounded=4, visual_dim=6, vocab_size=12)
        lex = cfg.grounded_words()
        for r in generate_synthetic(cfg):
            hits = [w for w in r.transcript if w in lex]
            assert len(hits) == 1
            assert r.visual.sum() == 1.0 and r.visual[lex.index(hits[0])] == 1.0

    def test_grounded_mask_removes_one_word_of_frames(self):
        cfg = SyntheticTaskConfig(utterances=20, grounded=True, frames_per_word=6)
        recs = generate_synthetic(cfg)
        _, mlog = mask_dataset(recs, MaskSpec("color", tuple(cfg.grounded_words())))
        assert all(mlog.frames[r.utt_id] == 6 for r in recs)

    def test_grounded_word_position_uniform(self):
        cfg = SyntheticTaskConfig(utterances=2000, grounded=True, words_per_utterance=5, feat_dim=2)
        lex = set(cfg.grounded_words())
        pos = np.bincount([next(i for i, w in enumerate(r.transcript) if w in lex) for r in generate_synthetic(cfg)])
        assert (np.abs(pos / 2000 - 0.2) < 0.03).all()

    def test_template_seed_shares_words(self):
        a = generate_synthetic(SyntheticTaskConfig(utterances=5, seed=1, template_seed=0, noise=0.0))
        b = generate_synthetic(SyntheticTaskConfig(utterances=5, seed=2, template_seed=0, noise=0.0))
        seen = {}
        for r in a + b:
            for k, w in enumerate(r.transcript):
                chunk = r.features[8 * k : 8 * (k + 1)]
                if w in seen:
                    np.testing.assert_array_equal(seen[w], chunk)
                seen[w] = chunk

    @pytest.mark.parametrize("kw", [dict(utterances=0), dict(noise=-1.0), dict(grounded=True, n_grounded=30),
                                    dict(grounded=True, visual_dim=2)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SyntheticTaskConfig(**kw)

    def test_pos_tags(self):
        r = generate_synthetic(SyntheticTaskConfig(utterances=1, grounded=True))[0]
        assert len(r.pos_tags) == len(r.transcript)
        assert set(r.pos_tags) <= {"NN", "VB", "JJ"}
