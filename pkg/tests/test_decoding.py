import itertools

import numpy as np
import pytest

from lightcap.bpe import BOS, PAD, UNK
from lightcap.decoding import beam_search, decode_batch, greedy_decode, greedy_decode_batch
from lightcap.model import CGRUDecoder
from lightcap.numerics import log_softmax_rows, make_rng

from conftest import tiny_cfg


def toy_model(seed, vocab=3, max_len=3, scale=2.0):
    m = CGRUDecoder(tiny_cfg(vocab_size=vocab, max_len=max_len), seed=seed)
    for p in m.parameters():
        p.value[...] = make_rng(seed + 100).normal(scale=scale, size=p.shape)
    return m


def sequence_logprob(m, V, seq, bos):
    ctx = m.encode_visual(V.reshape(1, -1))
    h = m.init_hidden(ctx)
    y, total = bos, 0.0
    for tok in seq:
        h, logits, _ = m.step([y], h, ctx)
        total += log_softmax_rows(logits)[0, tok]
        y = tok
    return total


def exhaustive_best(m, V, max_len, bos, eos):
    """Best normalized score over every EOS-terminated sequence of length <= max_len."""
    others = [t for t in range(m.cfg.vocab_size) if t != eos]
    scores = [sequence_logprob(m, V, list(prefix) + [eos], bos) / n
              for n in range(1, max_len + 1)
              for prefix in itertools.product(others, repeat=n - 1)]
    return max(scores)


@pytest.mark.parametrize("seed", range(4))
def test_full_width_beam_matches_exhaustive_search(seed):
    m = toy_model(seed)
    V = make_rng(seed).normal(size=m.cfg.v_dim)
    _, score, _ = beam_search(m, V, beam=27, max_len=3, banned=(), bos=0, eos=2)
    assert score == pytest.approx(exhaustive_best(m, V, 3, bos=0, eos=2), abs=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_beam_one_equals_greedy(seed):
    m = toy_model(seed, vocab=9, max_len=6, scale=1.0)
    V = make_rng(seed).normal(size=(4, m.cfg.v_dim))
    greedy = greedy_decode_batch(m, V)
    for i in range(4):
        assert beam_search(m, V[i], beam=1)[0] == greedy[i] == greedy_decode(m, V[i])
    assert decode_batch(m, V, beam=1) == greedy


def test_zero_length_and_invalid_beam(tiny_model):
    V = np.ones(tiny_model.cfg.v_dim)
    assert beam_search(tiny_model, V, beam=3, max_len=0)[0] == []
    assert greedy_decode(tiny_model, V, max_len=0) == []
    with pytest.raises(ValueError):
        beam_search(tiny_model, V, beam=0)


@pytest.mark.parametrize("seed", range(5))
def test_beam_score_is_normalized_logprob(seed):
    m = toy_model(seed, vocab=9, max_len=6, scale=1.0)
    V = make_rng(seed).normal(size=m.cfg.v_dim)
    tokens, score, hyp = beam_search(m, V, beam=3, banned=())
    assert hyp.logprob == pytest.approx(sequence_logprob(m, V, hyp.tokens, BOS))
    assert score == pytest.approx(hyp.logprob / len(hyp.tokens))
    if hyp.finished:
        assert tokens == hyp.tokens[:-1]


def test_outputs_never_contain_special_tokens():
    m = toy_model(1, vocab=9, max_len=8, scale=1.0)
    for tok in (PAD, BOS, UNK):
        m["E"].value[tok] *= 5.0   # make them attractive
    V = make_rng(0).normal(size=(6, m.cfg.v_dim))
    for beam in (1, 3):
        for seq in decode_batch(m, V, beam=beam):
            assert not {PAD, BOS, UNK} & set(seq)


def test_beam_respects_max_len():
    m = toy_model(2, vocab=9, max_len=4, scale=0.1)
    V = make_rng(0).normal(size=m.cfg.v_dim)
    assert len(beam_search(m, V, beam=3)[0]) <= 4
    assert len(beam_search(m, V, beam=3, max_len=2)[0]) <= 2


def test_decoding_is_deterministic():
    m = toy_model(3, vocab=9, max_len=6, scale=1.0)
    V = make_rng(0).normal(size=(3, m.cfg.v_dim))
    assert decode_batch(m, V, beam=3) == decode_batch(m, V, beam=3)
