import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lightcap.harness.synth import synth_generate
from lightcap.metrics import CiderD, bleu4, cider_d, sentence_bleu4

word = st.sampled_from(["a", "red", "blue", "box", "ball", "on", "the", "big"])
sentence = st.lists(word, min_size=1, max_size=7).map(" ".join)
corpus = st.lists(st.tuples(sentence, st.lists(sentence, min_size=1, max_size=3)), min_size=1, max_size=6)


# -- BLEU-4 ------------------------------------------------------------------

def test_bleu_identical_is_one():
    assert bleu4(["the cat sat on the mat"], [["the cat sat on the mat"]]) == pytest.approx(1.0)


def test_bleu_no_overlap_is_zero():
    assert bleu4(["dog runs fast today"], [["the cat sat on the mat"]]) == 0.0


def test_bleu_short_candidate_hand_values():
    # precisions 3/3, 2/2, 1/1 and an empty 4-gram order; brevity penalty exp(1 - 4/3)
    assert bleu4(["the cat sat"], [["the cat sat down"]]) == 0.0
    assert sentence_bleu4("the cat sat", ["the cat sat down"]) == pytest.approx(math.exp(-1 / 3), abs=1e-6)


def test_bleu_hand_computed_precisions():
    cand, ref = "the cat sat on the mat", "the cat is on the mat"
    # clipped matches 5/6, 3/5, 1/4, 0/3; equal lengths so no brevity penalty
    assert bleu4([cand], [[ref]]) == 0.0
    expected = (5 / 6 * 4 / 6 * 2 / 5 * 1 / 4) ** 0.25
    assert sentence_bleu4(cand, [ref]) == pytest.approx(expected, abs=1e-6)


def test_bleu_closest_reference_length():
    refs = [["a b c d e f g h", "a b c d"]]
    # closest reference has 4 words, so no brevity penalty
    assert bleu4(["a b c d"], refs) == pytest.approx(1.0)


def test_bleu_length_mismatch_raises():
    with pytest.raises(ValueError):
        bleu4(["a"], [])
    with pytest.raises(ValueError):
        bleu4(["a"], [[]])


@settings(max_examples=60, deadline=None)
@given(corpus, st.randoms(use_true_random=False))
def test_metrics_permutation_invariant_and_bounded(pairs, rnd):
    cands = [c for c, _ in pairs]
    refs = [r for _, r in pairs]
    order = list(range(len(pairs)))
    rnd.shuffle(order)
    b = bleu4(cands, refs)
    c = cider_d(cands, refs)
    assert b == pytest.approx(bleu4([cands[i] for i in order], [refs[i] for i in order]))
    assert c == pytest.approx(cider_d([cands[i] for i in order], [refs[i] for i in order]))
    assert 0.0 <= b <= 1.0 + 1e-12
    assert 0.0 <= c <= 10.0 + 1e-9


# -- CIDEr-D -----------------------------------------------------------------

def test_cider_hand_trace_two_images():
    refs = [["a red box"], ["a blue box"]]
    # "a" and "box" occur in both images, so their IDF is 0; every other 1-3-gram
    # has weight log 2 and the vectors coincide; no 4-grams: (1 + 1 + 1 + 0) / 4
    scorer = CiderD(refs)
    assert scorer.sentence_score("a red box", refs[0]) == pytest.approx(7.5, abs=1e-6)


def test_cider_hand_trace_length_penalty():
    refs = [["a red box"], ["a blue box"]]
    scorer = CiderD(refs)
    # unigram cosine 1, bigram {a red} against {a red, red box}: 1/sqrt 2, no trigrams
    expected = 10 * math.exp(-1 / 72) * (1 + 1 / math.sqrt(2)) / 4
    assert scorer.sentence_score("a red", refs[0]) == pytest.approx(expected, abs=1e-6)


def test_cider_identical_corpus_scores_ten():
    data = synth_generate(60, 8, seed=3)["train"]
    refs = [[ex.captions[0]] for ex in data]
    assert cider_d([r[0] for r in refs], refs) == pytest.approx(10.0, abs=1e-6)
    assert bleu4([r[0] for r in refs], refs) == pytest.approx(1.0)


def test_cider_empty_candidate_and_empty_corpus():
    scorer = CiderD([["a red box"], ["a blue box"]])
    assert scorer.sentence_score("", ["a red box"]) == 0.0
    with pytest.raises(ValueError):
        CiderD([])


def test_cider_uses_given_idf_table():
    refs = [["a red box"], ["a blue box"]]
    other = CiderD(refs + [["a red ball"], ["the green box"]])
    assert cider_d(["a red box"], [refs[0]], corpus_idf=other) != pytest.approx(
        cider_d(["a red box"], [refs[0]]))


def test_deleting_last_word_never_helps():
    data = synth_generate(80, 8, seed=4)["train"]
    refs = [ex.captions for ex in data]
    scorer = CiderD(refs)
    for r in refs:
        perfect = r[0]
        shorter = " ".join(perfect.split()[:-1])
        assert scorer.sentence_score(shorter, r) <= scorer.sentence_score(perfect, r) + 1e-12
        assert sentence_bleu4(shorter, r) <= sentence_bleu4(perfect, r) + 1e-12
    full = [r[0] for r in refs]
    cut = [" ".join(c.split()[:-1]) for c in full]
    assert bleu4(cut, refs) <= bleu4(full, refs)
    assert scorer.corpus_score(cut, refs) <= scorer.corpus_score(full, refs)
