from functools import lru_cache

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mmasr.evaluation import (
    EvalReport,
    build_report,
    corpus_recovery,
    corpus_wer,
    edit_distance,
    incongruent_bars,
    masked_word_recovery,
    progressive_curve,
    read_hypotheses,
    render_table,
    wer,
    write_hypotheses,
    write_report,
)


def oracle(ref, hyp):
    """Plain recursion on prefixes; returns (S, D, I) following match > sub > del > ins."""
    ref, hyp = tuple(ref), tuple(hyp)

    @lru_cache(maxsize=None)
    def dist(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        return min(dist(i - 1, j - 1) + (ref[i - 1] != hyp[j - 1]), dist(i - 1, j) + 1, dist(i, j - 1) + 1)

    def walk(i, j):
        if i == 0 and j == 0:
            return (0, 0, 0)
        d = dist(i, j)
        if i and j and ref[i - 1] == hyp[j - 1] and dist(i - 1, j - 1) == d:
            return walk(i - 1, j - 1)
        if i and j and dist(i - 1, j - 1) + 1 == d:
            s, dl, ins = walk(i - 1, j - 1)
            return (s + 1, dl, ins)
        if i and dist(i - 1, j) + 1 == d:
            s, dl, ins = walk(i - 1, j)
            return (s, dl + 1, ins)
        s, dl, ins = walk(i, j - 1)
        return (s, dl, ins + 1)

    return walk(len(ref), len(hyp))


tokens = st.lists(st.sampled_from("abc"), max_size=6)


class TestEditDistance:
    def test_identical(self):
        assert edit_distance("a b c".split(), "a b c".split())[:3] == (0, 0, 0)

    def test_one_substitution(self):
        assert edit_distance("a b c".split(), "a x c".split())[:3] == (1, 0, 0)
        assert wer("a b c".split(), "a x c".split()) == pytest.approx(100 / 3)
        assert round(wer("a b c".split(), "a x c".split()), 2) == 33.33

    def test_empty_hypothesis(self):
        assert edit_distance(list("abcd"), [])[:3] == (0, 4, 0)
        assert wer(list("abcd"), []) == 100.0

    def test_empty_reference(self):
        assert edit_distance([], list("ab"))[:3] == (0, 0, 2)
        with pytest.raises(ValueError):
            wer([], ["a"])

    def test_tie_break_prefers_substitution(self):
        # "a b" vs "b a": 2 subs or del+ins; substitutions win
        assert edit_distance(list("ab"), list("ba"))[:3] == (2, 0, 0)

    def test_against_oracle_1000_random_pairs(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            r = list(rng.choice(list("abcd"), size=rng.integers(0, 7)))
            h = list(rng.choice(list("abcd"), size=rng.integers(0, 7)))
            s, d, i, path = edit_distance(r, h)
            assert (s, d, i) == oracle(r, h)
            assert path.cost == s + d + i

    @given(tokens, tokens)
    def test_path_consistent(self, r, h):
        s, d, i, path = edit_distance(r, h)
        assert [x for _, x, _ in path.ops if x is not None] == list(range(len(r)))
        assert [y for _, _, y in path.ops if y is not None] == list(range(len(h)))
        for op, x, y in path.ops:
            if op == "match":
                assert r[x] == h[y]
            if op == "sub":
                assert r[x] != h[y]

    @given(tokens, tokens, tokens)
    def test_triangle_and_identity(self, x, y, z):
        dist = lambda a, b: sum(edit_distance(a, b)[:3])  # noqa: E731
        assert dist(x, x) == 0
        assert dist(x, z) <= dist(x, y) + dist(y, z)
        assert dist(x, y) == dist(y, x)


class TestCorpusWer:
    def test_perfect(self):
        assert corpus_wer([(["a"], ["a"]), (["b", "c"], ["b", "c"])]) == 0.0

    def test_pooled(self):
        pairs = [("a b c".split(), "a x c".split()), ("d e f".split(), "d".split())]
        assert corpus_wer(pairs) == 50.0

    def test_pooled_not_averaged(self):
        pairs = [(["a"], ["b"]), ("a b c d".split(), "a b c d".split())]
        assert corpus_wer(pairs) == 20.0  # per-utterance mean would be 50

    def test_errors(self):
        with pytest.raises(ValueError):
            corpus_wer([])
        with pytest.raises(ValueError):
            corpus_wer([([], ["a"])])

    @given(st.lists(st.tuples(tokens.filter(bool), tokens), min_size=1, max_size=6), st.randoms())
    def test_order_invariant(self, pairs, rnd):
        shuffled = list(pairs)
        rnd.shuffle(shuffled)
        assert corpus_wer(shuffled) == corpus_wer(pairs)


class TestRecovery:
    def test_identical(self):
        assert masked_word_recovery(list("abcd"), list("abcd"), [1, 3]) == 1.0

    def test_deleted(self):
        assert masked_word_recovery(list("abcd"), list("acd"), [1]) == 0.0

    def test_substituted_slot(self):
        # a b c d vs a x c d: the path is match, sub, match, match
        ref, hyp = "the red car here".split(), "the big car here".split()
        assert masked_word_recovery(ref, hyp, [1]) == 0.0
        assert masked_word_recovery(ref, hyp, [1, 2]) == 0.5

    def test_nothing_masked(self):
        assert masked_word_recovery(list("ab"), list("ab"), []) is None

    def test_bad_index(self):
        with pytest.raises(IndexError):
            masked_word_recovery(list("ab"), list("ab"), [2])

    @given(tokens.filter(bool), tokens, st.data())
    def test_in_unit_interval(self, r, h, data):
        idx = data.draw(st.lists(st.integers(0, len(r) - 1), min_size=1))
        assert 0.0 <= masked_word_recovery(r, h, idx) <= 1.0

    def test_corpus_pooling(self):
        items = [(list("ab"), list("ab"), [0, 1]), (list("ab"), list("xb"), [0]), (list("ab"), list("ab"), [])]
        assert corpus_recovery(items) == pytest.approx(2 / 3)
        assert corpus_recovery([(list("ab"), list("ab"), [])]) is None


def headline_report():
    models = ["baseline", "enc-init", "enc-dec-init", "early-fusion", "hier-attn"]
    wers = dict(zip(models, [25.1, 22.1, 22.3, 22.0, 20.9]))
    return EvalReport("baseline", models, ["T"], {("T", m): w for m, w in wers.items()})


class TestReport:
    def test_delta_four_point_two(self):
        r = headline_report()
        assert f"{r.delta('T', 'hier-attn'):+.1f}" == "+4.2"
        text = render_table(r)
        assert "+4.2" in text.splitlines()[-1]

    def test_best_marker(self):
        text = render_table(headline_report())
        starred = [line for line in text.splitlines() if "*" in line]
        assert len(starred) == 1 and "20.9*" in starred[0] and starred[0].startswith("Hierarchical")

    def test_table_layout(self):
        text = render_table(headline_report())
        lines = text.splitlines()
        assert lines[0].split("|")[0].strip() == "Model" and lines[0].split("|")[1].strip() == "T"
        assert lines[2].startswith("Baseline ASR") and "25.1" in lines[2]

    def test_single_model_zero_delta(self):
        refs = {"u1": "a b".split(), "u2": "c".split()}
        hyps = {"baseline": {"T": {"u1": ["a"], "u2": ["c"]}}}
        r = build_report(hyps, refs)
        assert r.delta("T", "baseline") == 0.0

    def test_two_model_toy(self):
        refs = {"u1": "a b c d".split(), "u2": "e f".split()}
        hyps = {
            "baseline": {"T": {"u1": "a x c".split(), "u2": "e f".split()}, "T_C": {"u1": [], "u2": ["e"]}},
            "hier-attn": {"T": {"u1": "a b c d".split(), "u2": "e".split()}, "T_C": {"u1": ["a"], "u2": ["e"]}},
        }
        r = build_report(hyps, refs)
        assert r.wer[("T", "baseline")] == pytest.approx(100 * 2 / 6)
        assert r.wer[("T", "hier-attn")] == pytest.approx(100 * 1 / 6)
        assert r.delta("T", "hier-attn") == pytest.approx(100 * 2 / 6 - 100 / 6)
        assert r.delta("T_C", "hier-attn") == pytest.approx(100 * 5 / 6 - 100 * 4 / 6)

    def test_mismatched_utterances(self):
        refs = {"u1": ["a"], "u2": ["b"], "u3": ["c"]}
        hyps = {"baseline": {"T": {"u1": ["a"], "u2": ["b"]}}, "enc-init": {"T": {"u1": ["a"], "u3": ["c"]}}}
        with pytest.raises(ValueError, match=r"\['u2', 'u3'\]"):
            build_report(hyps, refs)

    def test_unknown_baseline(self):
        with pytest.raises(ValueError):
            build_report({"enc-init": {"T": {"u": ["a"]}}}, {"u": ["a"]})

    def test_artifacts_deterministic(self, tmp_path):
        refs = {f"u{i}": "a b c".split() for i in range(4)}
        hyps = {}
        for m, errs in (("baseline", 2), ("early-fusion", 1)):
            sets = {}
            for s in ("T", "T_C", "T_N", "T_inc", "P2", "P4", "P10"):
                sets[s] = {u: (["x"] * errs + "a b c".split()[errs:]) if u == "u0" else "a b c".split() for u in refs}
            hyps[m] = sets
        a = write_report(build_report(hyps, refs), tmp_path / "a")
        b = write_report(build_report(hyps, refs), tmp_path / "b")
        for key in a:
            assert a[key].read_bytes() == b[key].read_bytes()
        prog = a["progressive"].read_text().splitlines()
        assert prog[0] == "k\tmodel\twer\tdelta"
        assert [row.split("\t")[0] for row in prog[1:]] == ["2", "2", "4", "4", "10", "10"]
        inc = a["incongruent"].read_text().splitlines()
        assert inc[1].split("\t")[0] == "baseline" and len(inc) == 3

    def test_curve_and_bars_values(self):
        r = EvalReport("baseline", ["baseline", "hier-attn"], ["T", "T_inc", "P2"],
                       {("T", "baseline"): 10.0, ("T", "hier-attn"): 8.0, ("T_inc", "hier-attn"): 9.5,
                        ("T_inc", "baseline"): 10.0, ("P2", "baseline"): 30.0, ("P2", "hier-attn"): 27.5})
        assert "2\thier-attn\t27.5000\t2.5000" in progressive_curve(r)
        assert "hier-attn\t8.0000\t9.5000" in incongruent_bars(r)


class TestHypothesisFiles:
    def test_round_trip(self, tmp_path):
        hyps = {"u1": ["a", "b"], "u2": []}
        write_hypotheses(tmp_path / "h.hyp", hyps)
        assert (tmp_path / "h.hyp").read_text() == "u1\ta b\nu2\t\n"
        assert read_hypotheses(tmp_path / "h.hyp") == hyps

    def test_missing_id(self, tmp_path):
        (tmp_path / "h.hyp").write_text("\tfoo\n")
        with pytest.raises(ValueError, match=":1:"):
            read_hypotheses(tmp_path / "h.hyp")
