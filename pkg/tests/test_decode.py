import itertools
import math

import numpy as np
import pytest
import torch

from sincmdd.ctc import ctc_brute_force
from sincmdd.decode import DecodeConfig, decode_utterances, encode_one, greedy_attention_decode, joint_beam_decode
from sincmdd.seqmodel import MddModel
from sincmdd.train import tiny_model_config, tiny_sample


def tiny(seed, n_frames=12):
    cfg = tiny_model_config(seed=seed)
    model = MddModel(cfg, dtype=torch.float64)
    return model, tiny_sample(cfg, n_frames=n_frames, seed=seed).inputs[0]


def reference_greedy(model, x, max_len):
    """Step-by-step argmax over the decoder, eos winning exact ties."""
    V = model.vocab
    with torch.no_grad():
        enc = model.encode(x.unsqueeze(0), torch.tensor([x.shape[0]]))
        state, weights, context = model.initial_decoder(enc)
        out, prev = [], V.sos
        while len(out) < max_len:
            state, logp = model.decode_step(state, torch.tensor([prev]), context)
            row = logp[0].numpy()
            phones = row[[V.dec_index(t) for t in range(1, V.n_phones + 1)]]
            if row[V.dec_index(V.eos)] >= phones.max():
                break
            prev = 1 + int(np.argmax(phones))
            out.append(prev)
            att = model.attend(state, enc, weights)
            weights, context = att.weights, att.context
    return tuple(out)


def exhaustive_ctc_best(logprobs, n_phones, max_len):
    best, best_loss = None, math.inf
    for L in range(max_len + 1):
        for y in itertools.product(range(1, n_phones + 1), repeat=L):
            loss = ctc_brute_force(logprobs, list(y))
            if loss < best_loss:  # strict: shorter, then lexicographically smaller, wins ties
                best, best_loss = y, loss
    return best, best_loss


@pytest.mark.parametrize("seed", range(10))
def test_alpha0_width1_is_greedy_attention(seed):
    model, x = tiny(seed)
    got = joint_beam_decode(model, x, alpha=0.0, beam_width=1)
    want = reference_greedy(model, x, max_len=4)
    assert got.tokens == want == greedy_attention_decode(model, x)


@pytest.mark.parametrize("seed", range(10))
def test_alpha1_exhaustive_beam_is_ctc_argmax(seed):
    model, x = tiny(seed)
    lp = model.ctc_logprobs(encode_one(model, x), 0)
    assert lp.shape[0] <= 4
    want, loss = exhaustive_ctc_best(lp, model.vocab.n_phones, 3)
    got = joint_beam_decode(model, x, alpha=1.0, beam_width=40, max_len=3)
    assert got.tokens == want
    assert got.score == pytest.approx(-loss, abs=1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_score_is_monotone_in_beam_width(seed):
    model, x = tiny(seed)
    scores = [joint_beam_decode(model, x, alpha=0.5, beam_width=k).score for k in range(1, 6)]
    assert all(b >= a for a, b in zip(scores, scores[1:]))


def test_score_components_are_consistent():
    model, x = tiny(3)
    r = joint_beam_decode(model, x, alpha=0.3, beam_width=3)
    assert r.score == pytest.approx(0.3 * r.ctc_score + 0.7 * r.att_score)
    lp = model.ctc_logprobs(encode_one(model, x), 0)
    assert r.ctc_score == pytest.approx(-ctc_brute_force(lp, list(r.tokens)), abs=1e-10)


def biased(seed, token):
    model, x = tiny(seed)
    with torch.no_grad():
        model.decoder.out.bias[model.vocab.dec_index(token)] += 100.0
    return model, x


def test_decoder_that_always_ends_gives_empty_sequence():
    model, x = biased(0, tiny_model_config().vocab.eos)
    assert joint_beam_decode(model, x, alpha=0.0, beam_width=3).tokens == ()
    assert greedy_attention_decode(model, x) == ()


def test_max_len_forces_the_end():
    model, x = biased(0, 1)
    assert joint_beam_decode(model, x, alpha=0.0, beam_width=2, max_len=2).tokens == (1, 1)
    assert greedy_attention_decode(model, x, max_len=2) == (1, 1)


def test_invalid_arguments():
    model, x = tiny(0)
    with pytest.raises(ValueError):
        joint_beam_decode(model, x, beam_width=0)
    with pytest.raises(ValueError):
        joint_beam_decode(model, x, alpha=2.0)
    with pytest.raises(ValueError):
        joint_beam_decode(model, x, max_len=0)
    with pytest.raises(ValueError):
        DecodeConfig(beam_width=0)


def test_decode_utterances_returns_symbols(small_corpus):
    from sincmdd.train import default_model_config

    model = MddModel(default_model_config(small_corpus.phones, "fbank"))
    utts = small_corpus.split("test")
    hyps = decode_utterances(model, utts, DecodeConfig(beam_width=2))
    assert set(hyps) == {u.utt_id for u in utts}
    assert all(set(h) <= set(small_corpus.phones) for h in hyps.values())
