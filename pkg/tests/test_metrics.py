import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trajcap.dataset import FrameSet, Sample
from trajcap.metrics import (
    EchoOracle, EmptyPredictor, action_accuracy, bleu4, corpus_rouge_l, detokenize, evaluate,
    lcs_length, rouge_l, score_captions, split_caption, tokenize,
)
from trajcap.verify import oracle_bleu4, oracle_lcs, oracle_rouge_l

words = st.lists(st.sampled_from(["a", "b", "c", "d"]), max_size=10)


def toks(s):
    return s.split()


class TestSplitCaption:
    def test_figure_caption(self):
        p = split_caption("I will slow down. ; Because the front vehicle is stopped.")
        assert (p.action, p.justification, p.warning) == ("I will slow down.", "Because the front vehicle is stopped.", False)

    def test_first_delimiter_wins(self):
        p = split_caption("a ; b ; c")
        assert (p.action, p.justification) == ("a", "b ; c")

    def test_missing_delimiter_warns(self):
        p = split_caption("no delimiter here")
        assert (p.action, p.justification, p.warning) == ("no delimiter here", "", True)

    def test_raw_reconstructs(self):
        raw = "  i will stop . ; because red .  "
        p = split_caption(raw)
        assert f"{p.action} ; {p.justification}" == raw.strip()


class TestTokenize:
    def test_punctuation_is_split_and_lowercased(self):
        assert tokenize("I will slow down. ; Because") == ["i", "will", "slow", "down", ".", ";", "because"]

    def test_detokenize_round_trip(self):
        s = "i will slow down. ; because the front vehicle is stopped."
        assert detokenize(tokenize(s)) == s


class TestBleu:
    def test_identity(self):
        assert bleu4([toks("i will slow down now")], [toks("i will slow down now")]) == 1.0

    def test_brevity_fixture(self):
        got = bleu4([toks("i will slow down")], [toks("i will slow down .")])
        assert abs(got - math.exp(1 - 5 / 4)) < 1e-12
        assert abs(got - 0.77880) < 1e-5

    def test_no_shared_fourgram(self):
        assert bleu4([toks("a b c d e")], [toks("a b c x e")]) == 0.0

    def test_clipping(self):
        # "the" appears 7 times in the candidate but twice in the reference
        cand = toks("the the the the the the the")
        ref = toks("the cat is on the mat")
        assert bleu4([cand], [ref]) == 0.0
        assert oracle_bleu4([cand], [ref]) == 0.0

    def test_empty_candidate_contributes_zero(self):
        a = bleu4([toks("a b c d"), []], [toks("a b c d"), toks("a b c d")])
        assert a == pytest.approx(math.exp(1 - 8 / 4))

    def test_errors(self):
        with pytest.raises(ValueError, match="empty"):
            bleu4([], [])
        with pytest.raises(ValueError):
            bleu4([["a"]], [])

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.tuples(words, words), min_size=1, max_size=6))
    def test_matches_oracle_and_is_order_invariant(self, pairs):
        cands = [c for c, _ in pairs]
        refs = [r for _, r in pairs]
        if not sum(map(len, cands)) or not sum(map(len, refs)):
            return
        got = bleu4(cands, refs)
        assert abs(got - oracle_bleu4(cands, refs)) < 1e-12
        assert abs(got - bleu4(cands[::-1], refs[::-1])) < 1e-12
        assert 0.0 <= got <= 1.0


class TestRouge:
    def test_identical_and_disjoint(self):
        assert rouge_l(toks("a b c"), toks("a b c")) == 1.0
        assert rouge_l(toks("a b c"), toks("x y")) == 0.0

    def test_fixture(self):
        got = rouge_l(toks("i will slow down"), toks("i will stop"))
        p, r, b2 = 0.5, 2 / 3, 1.2 ** 2
        assert abs(got - (1 + b2) * p * r / (r + b2 * p)) < 1e-12
        assert abs(got - 0.58653) < 1e-4

    def test_recall_comes_from_reference(self):
        short, long_ = toks("a b"), toks("a b c d")
        # candidate short: P = 1, R = 0.5; swapped: P = 0.5, R = 1; beta > 1 favours recall
        assert rouge_l(long_, short) > rouge_l(short, long_)
        assert rouge_l(short, long_) == pytest.approx(2.44 * 0.5 / (0.5 + 1.44))

    def test_empty(self):
        assert rouge_l([], toks("a")) == 0.0
        assert rouge_l(toks("a"), []) == 0.0

    def test_corpus_is_mean(self):
        c = [toks("a b"), toks("x")]
        r = [toks("a b"), toks("y")]
        assert corpus_rouge_l(c, r) == 0.5

    @settings(max_examples=300, deadline=None)
    @given(words, words)
    def test_matches_dp_oracle(self, a, b):
        assert lcs_length(a, b) == oracle_lcs(a, b)
        assert abs(rouge_l(a, b) - oracle_rouge_l(a, b)) < 1e-12
        assert (rouge_l(a, b) == 1.0) == (bool(a) and a == b)


def frames(captions):
    return FrameSet([Sample(f"s{i}", "", "", c, "test") for i, c in enumerate(captions)], None, None)


CAPS = ["i will slow down . ; because the front vehicle is stopped .",
        "i will drive at a steady speed . ; because there is a safe distance from the front vehicle ."]


class TestEvaluate:
    def test_echo_oracle_scores_one(self):
        assert evaluate(EchoOracle(), frames(CAPS)).row() == [1.0] * 6

    def test_empty_predictor_scores_zero(self):
        assert evaluate(EmptyPredictor(), frames(CAPS)).row() == [0.0] * 6

    def test_writes_files(self, tmp_path):
        evaluate(EchoOracle(), frames(CAPS), tmp_path)
        assert (tmp_path / "eval_table.json").read_text().count(": 1.0") == 6
        lines = (tmp_path / "per_sample.csv").read_text().splitlines()
        assert lines[0] == "id,prediction,reference,rouge_l"
        assert len(lines) == 3 and lines[1].startswith("s0,")

    def test_action_only_mistake(self):
        pred = ["i will stop . ; because the front vehicle is stopped ."]
        table, _ = score_captions(pred, CAPS[:1])
        assert table.just_b4 == 1.0 and table.action_b4 < 1.0

    def test_action_accuracy(self):
        preds = [CAPS[0], "i will slow down . ; because whatever ."]
        assert action_accuracy(preds, [CAPS[1], CAPS[0]]) == 0.5

    def test_empty_split_rejected(self):
        with pytest.raises(ValueError, match="nothing"):
            evaluate(EchoOracle(), frames([]))
