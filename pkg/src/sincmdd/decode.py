"""Joint CTC/attention beam search and greedy attention decoding.

Hypotheses are scored by ``alpha * ctc_prefix + (1 - alpha) * attention``.
Ending a hypothesis (eos) swaps its CTC prefix score for the full CTC
probability of the completed sequence, so ``alpha = 1`` is plain CTC search.
Ties between equal scores go to the shorter prefix, then to the smaller
token ids.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .corpus import Utterance
from .ctc import CtcPrefixScorer
from .seqmodel import DecoderState, Encoded, MddModel


@dataclass(frozen=True)
class DecodeConfig:
    alpha: float = 0.5
    beam_width: int = 4
    max_len: int = 0  # 0: number of encoder frames

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.beam_width < 1:
            raise ValueError("beam_width must be at least 1")
        if self.max_len < 0:
            raise ValueError("max_len must be non-negative")


@dataclass
class BeamResult:
    tokens: tuple[int, ...]  # phone ids, eos excluded
    score: float
    ctc_score: float
    att_score: float


@dataclass
class _Hyp:
    tokens: tuple[int, ...]
    att: float
    ctc: float
    ctc_state: tuple[np.ndarray, np.ndarray] | None
    dec: DecoderState | None
    weights: torch.Tensor | None
    context: torch.Tensor | None


def _combined(alpha: float, ctc: float, att: float) -> float:
    # exact endpoints: avoid 0 * LOG_ZERO style contamination
    if alpha == 0.0:
        return att
    if alpha == 1.0:
        return ctc
    return alpha * ctc + (1.0 - alpha) * att


def _key(score: float, tokens: Sequence[int]):
    return (-score, len(tokens), tuple(tokens))


def encode_one(model: MddModel, inputs: np.ndarray | torch.Tensor) -> Encoded:
    """Encode a single utterance (raw samples or a (T, D) frame matrix)."""
    x = torch.as_tensor(np.asarray(inputs), dtype=model.dtype).unsqueeze(0)
    with torch.no_grad():
        return model.encode(x, torch.tensor([x.shape[1]]))


def _slice(enc: Encoded, n: int) -> Encoded:
    return Encoded(
        enc.H.expand(n, -1, -1),
        enc.lengths.expand(n),
        enc.ctc_logits.expand(n, -1, -1),
        enc.enc_proj.expand(n, -1, -1),
    )


@torch.no_grad()
def _beam_search(model: MddModel, enc: Encoded, alpha: float, beam_width: int, max_len: int) -> BeamResult:
    vocab = model.vocab
    n_ph = vocab.n_phones
    use_ctc = alpha > 0.0
    use_att = alpha < 1.0
    scorer = CtcPrefixScorer(model.ctc_logprobs(enc, 0)) if use_ctc else None

    root = _Hyp((), 0.0, 0.0, scorer.initial_state() if use_ctc else None, None, None, None)
    if use_att:
        root.dec, root.weights, root.context = model.initial_decoder(enc)
    beam = [root]
    ended: list[tuple] = []

    for step in range(max_len + 1):
        if not beam:
            break
        force_end = step == max_len
        n = len(beam)
        if use_att:
            # one batched decoder step over all live hypotheses
            dec = DecoderState(torch.cat([h.dec.h for h in beam]), torch.cat([h.dec.c for h in beam]))
            y_prev = torch.tensor([h.tokens[-1] if h.tokens else vocab.sos for h in beam])
            ctx = torch.cat([h.context for h in beam])
            with torch.no_grad():
                dec, logp = model.decode_step(dec, y_prev, ctx)
                att = model.attend(dec, _slice(enc, n), torch.cat([h.weights for h in beam]))
            logp = logp.double().numpy()

        candidates = []
        ext = {}
        for i, h in enumerate(beam):
            att_step = logp[i] if use_att else np.zeros(n_ph + 1)
            ctc_end = scorer.final(h.ctc_state) if use_ctc else 0.0
            att_end = h.att + float(att_step[vocab.dec_index(vocab.eos)])
            score = _combined(alpha, ctc_end, att_end)
            candidates.append((_key(score, h.tokens), i, vocab.eos, ctc_end, att_end, score))
            if force_end:
                continue
            if use_ctc:
                ext[i] = scorer.extend_all(h.ctc_state, h.tokens[-1] if h.tokens else None)
            for label in range(1, n_ph + 1):
                ctc_ext = float(ext[i][2][label - 1]) if use_ctc else 0.0
                att_ext = h.att + float(att_step[vocab.dec_index(label)])
                score = _combined(alpha, ctc_ext, att_ext)
                candidates.append((_key(score, h.tokens + (label,)), i, label, ctc_ext, att_ext, score))

        candidates.sort(key=lambda c: c[0])
        next_beam = []
        for key, i, label, ctc_s, att_s, score in candidates[:beam_width]:
            h = beam[i]
            if label == vocab.eos:
                ended.append((key, h.tokens, ctc_s, att_s, score))
                continue
            child = _Hyp(h.tokens + (label,), att_s, ctc_s, None, None, None, None)
            if use_ctc:
                r_n, r_b, _ = ext[i]
                child.ctc_state = (r_n[:, label - 1].copy(), r_b[:, label - 1].copy())
            if use_att:
                child.dec = DecoderState(dec.h[i : i + 1], dec.c[i : i + 1])
                child.weights = att.weights[i : i + 1]
                child.context = att.context[i : i + 1]
            next_beam.append(child)
        beam = next_beam

        # scores never increase along an extension, so a finished hypothesis
        # strictly better than every live one cannot be overtaken
        if ended and beam:
            best_end = min(e[0] for e in ended)[0]
            best_live = min(-_combined(alpha, h.ctc, h.att) for h in beam)
            if best_end < best_live:
                break

    _, tokens, ctc_s, att_s, score = min(ended, key=lambda e: e[0])
    return BeamResult(tokens, score, ctc_s, att_s)


def joint_beam_decode(
    model: MddModel,
    inputs: np.ndarray | torch.Tensor,
    alpha: float = 0.5,
    beam_width: int = 4,
    max_len: int | None = None,
) -> BeamResult:
    """Best hypothesis found by joint CTC/attention beam search.

    A wider beam explores different, not more, hypotheses, so plain beam
    search can return a worse score at width k than at width 1. To make the
    result monotone in ``beam_width`` this returns the best hypothesis over
    all widths 1..beam_width. ``max_len`` defaults to the number of encoder
    frames; a hypothesis reaching it is ended with eos.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be at least 1")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    enc = encode_one(model, inputs)
    if max_len is None:
        max_len = int(enc.lengths[0])
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    results = [_beam_search(model, enc, alpha, k, max_len) for k in range(1, beam_width + 1)]
    return min(results, key=lambda r: _key(r.score, r.tokens))


@torch.no_grad()
def greedy_attention_decode(
    model: MddModel, inputs: np.ndarray | torch.Tensor, max_len: int | None = None
) -> tuple[int, ...]:
    """Argmax the attention decoder step by step until eos or ``max_len`` phones."""
    vocab = model.vocab
    enc = encode_one(model, inputs)
    if max_len is None:
        max_len = int(enc.lengths[0])
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    state, weights, context = model.initial_decoder(enc)
    tokens: list[int] = []
    y_prev = vocab.sos
    # same tie-break as the beam: eos (shorter prefix) first, then lower ids
    order = [vocab.eos] + list(range(1, vocab.n_phones + 1))
    while len(tokens) < max_len:
        state, logp = model.decode_step(state, torch.tensor([y_prev]), context)
        row = logp[0].double().numpy()
        best = max(order, key=lambda t: row[vocab.dec_index(t)])
        if best == vocab.eos:
            break
        tokens.append(best)
        y_prev = best
        att = model.attend(state, enc, weights)
        weights, context = att.weights, att.context
    return tuple(tokens)


def decode_utterances(
    model: MddModel, utts: Sequence[Utterance], cfg: DecodeConfig = DecodeConfig()
) -> dict[str, list[str]]:
    """Recognized phone sequences keyed by utterance id."""
    from .train import model_inputs

    model.eval()
    out = {}
    for u in utts:
        res = joint_beam_decode(model, model_inputs(u, model.cfg), cfg.alpha, cfg.beam_width, cfg.max_len or None)
        out[u.utt_id] = model.vocab.decode(res.tokens)
    return out
