"""Encoder, location-aware attention and autoregressive decoder.

Decoder recurrence, one output step ``l``::

    q_l, p(y_l | ...) = decode_step(q_{l-1}, y_{l-1}, c_{l-1})
    a_l, c_l          = attend(q_l, H, a_{l-1})

with ``q_0 = 0``, ``a_0`` uniform over the encoder frames and ``c_0`` the
matching (mean) context. The decoder input carries the *previous* context.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .frontend import FrontendConfig, SincFrontend


class VocabError(ValueError):
    pass


@dataclass(frozen=True)
class PhoneVocab:
    """Phones get ids 1..n. Blank is 0; eos and sos follow the phones."""

    symbols: tuple[str, ...]

    BLANK = 0

    def __post_init__(self):
        if len(set(self.symbols)) != len(self.symbols):
            raise VocabError("duplicate phone symbols")
        reserved = {"<blank>", "<sos>", "<eos>"}
        if reserved & set(self.symbols):
            raise VocabError("reserved symbol used as a phone")
        if not self.symbols:
            raise VocabError("empty phone set")

    @property
    def n_phones(self) -> int:
        return len(self.symbols)

    @property
    def eos(self) -> int:
        return self.n_phones + 1

    @property
    def sos(self) -> int:
        return self.n_phones + 2

    @property
    def ctc_size(self) -> int:
        return self.n_phones + 1

    @property
    def dec_size(self) -> int:
        """Decoder output support: the phones plus eos."""
        return self.n_phones + 1

    def encode(self, phones: Sequence[str]) -> list[int]:
        index = {s: i + 1 for i, s in enumerate(self.symbols)}
        try:
            return [index[p] for p in phones]
        except KeyError as exc:
            raise VocabError(f"unknown phone {exc.args[0]!r}") from None

    def decode(self, ids: Sequence[int]) -> list[str]:
        out = []
        for i in ids:
            if not 1 <= i <= self.n_phones:
                raise VocabError(f"id {i} is not a phone")
            out.append(self.symbols[i - 1])
        return out

    def check_target(self, ids: Sequence[int]) -> None:
        for i in ids:
            if not 1 <= int(i) <= self.n_phones:
                raise VocabError(f"target id {i} is blank, sos, eos or out of range")

    @staticmethod
    def dec_index(token: int) -> int:
        """Decoder output column of a phone id or eos (phones first, eos last)."""
        return token - 1


@dataclass(frozen=True)
class ModelConfig:
    phones: tuple[str, ...]
    frontend: str = "sinc"  # "sinc" or "fbank"
    fbank_dim: int = 80
    sinc: FrontendConfig = field(default_factory=FrontendConfig)
    enc_hidden: int = 32
    enc_layers: int = 1
    downsample: int = 2
    att_dim: int = 32
    att_conv_channels: int = 10
    att_conv_width: int = 11
    dec_hidden: int = 32
    emb_dim: int = 16
    init_scale: float = 0.08
    seed: int = 0

    def __post_init__(self):
        if self.frontend not in ("sinc", "fbank"):
            raise ValueError(f"unknown frontend {self.frontend!r}")
        if self.downsample < 1 or self.enc_layers < 1:
            raise ValueError("downsample and enc_layers must be >= 1")
        if self.att_conv_width % 2 == 0:
            raise ValueError("attention conv width must be odd")

    @property
    def vocab(self) -> PhoneVocab:
        return PhoneVocab(tuple(self.phones))

    @property
    def enc_dim(self) -> int:
        return 2 * self.enc_hidden


def full_scale(phones: Sequence[str]) -> ModelConfig:
    """Full-size dimensions (1024-unit BiLSTM encoder / LSTM decoder). Not used in tests."""
    return ModelConfig(
        tuple(phones), enc_hidden=1024, enc_layers=2, att_dim=1024, dec_hidden=1024, emb_dim=256, downsample=4
    )


class Encoder(nn.Module):
    """BiLSTM stack; frames are subsampled by ``downsample`` after the first layer."""

    def __init__(self, in_dim: int, hidden: int, layers: int, downsample: int, dtype=torch.float32):
        super().__init__()
        self.downsample = downsample
        self.rnns = nn.ModuleList(
            nn.LSTM(in_dim if i == 0 else 2 * hidden, hidden, batch_first=True, bidirectional=True, dtype=dtype)
            for i in range(layers)
        )

    def _run(self, rnn: nn.LSTM, x: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        packed = pack_padded_sequence(x, lengths.cpu(), batch_first=True, enforce_sorted=False)
        out, _ = rnn(packed)
        out, _ = pad_packed_sequence(out, batch_first=True, total_length=x.shape[1])
        return out

    def forward(self, x: torch.Tensor, lengths: torch.Tensor):
        if x.shape[1] < 1 or int(lengths.min()) < 1:
            raise ValueError("encoder input must have at least one frame")
        h = self._run(self.rnns[0], x, lengths)
        h = h[:, :: self.downsample]
        lengths = output_length(lengths, self.downsample)
        for rnn in self.rnns[1:]:
            h = self._run(rnn, h, lengths)
        return h, lengths


def output_length(lengths, factor: int):
    """S = ceil(T / factor)."""
    if isinstance(lengths, torch.Tensor):
        return torch.div(lengths + factor - 1, factor, rounding_mode="floor")
    return -(-int(lengths) // factor)


@dataclass
class AttentionStep:
    weights: torch.Tensor  # (B, S)
    context: torch.Tensor  # (B, D_enc)


class LocationAttention(nn.Module):
    """e_s = w . tanh(W q + V h_s + U (conv * a_prev)_s + b), a = softmax(e)."""

    def __init__(self, enc_dim, dec_dim, att_dim, channels, width, dtype=torch.float32):
        super().__init__()
        self.enc_proj = nn.Linear(enc_dim, att_dim, dtype=dtype)
        self.dec_proj = nn.Linear(dec_dim, att_dim, bias=False, dtype=dtype)
        self.loc_conv = nn.Conv1d(1, channels, width, padding=width // 2, bias=False, dtype=dtype)
        self.loc_proj = nn.Linear(channels, att_dim, bias=False, dtype=dtype)
        self.score = nn.Linear(att_dim, 1, dtype=dtype)

    def scores(self, q, enc_proj, prev_weights):
        loc = self.loc_conv(prev_weights.unsqueeze(1)).transpose(1, 2)  # (B, S, C)
        e = torch.tanh(enc_proj + self.dec_proj(q).unsqueeze(1) + self.loc_proj(loc))
        return self.score(e).squeeze(2)

    def forward(self, q, H, enc_proj, prev_weights, mask=None) -> AttentionStep:
        if prev_weights.shape != H.shape[:2]:
            raise ValueError(f"previous weights {tuple(prev_weights.shape)} do not match encoder {tuple(H.shape[:2])}")
        e = self.scores(q, enc_proj, prev_weights)
        if mask is not None:
            e = e.masked_fill(~mask, float("-inf"))
        w = torch.softmax(e, dim=1)
        return AttentionStep(w, torch.bmm(w.unsqueeze(1), H).squeeze(1))


@dataclass
class DecoderState:
    h: torch.Tensor
    c: torch.Tensor


class Decoder(nn.Module):
    def __init__(self, n_tokens, emb_dim, enc_dim, hidden, out_size, dtype=torch.float32):
        super().__init__()
        self.embed = nn.Embedding(n_tokens, emb_dim, dtype=dtype)
        self.cell = nn.LSTMCell(emb_dim + enc_dim, hidden, dtype=dtype)
        self.out = nn.Linear(hidden, out_size, dtype=dtype)

    def forward(self, state: DecoderState, y_prev: torch.Tensor, c_prev: torch.Tensor):
        """Returns (new state, log-probabilities over phones + eos)."""
        x = torch.cat([self.embed(y_prev), c_prev], dim=1)
        h, c = self.cell(x, (state.h, state.c))
        return DecoderState(h, c), F.log_softmax(self.out(h), dim=1)


class FbankNorm(nn.Module):
    """Global mean/variance normalization of precomputed FBANK features."""

    def __init__(self, dim: int, dtype=torch.float32):
        super().__init__()
        self.register_buffer("mean", torch.zeros(dim, dtype=dtype))
        self.register_buffer("std", torch.ones(dim, dtype=dtype))

    @property
    def out_dim(self) -> int:
        return self.mean.shape[0]

    def forward(self, feats: torch.Tensor, lengths: torch.Tensor):
        x = (feats - self.mean) / self.std
        keep = torch.arange(x.shape[1]).unsqueeze(0) < lengths.unsqueeze(1)
        return x * keep.unsqueeze(2).to(x.dtype), lengths


@dataclass
class Encoded:
    H: torch.Tensor  # (B, S, D)
    lengths: torch.Tensor  # (B,)
    ctc_logits: torch.Tensor  # (B, S, V)
    enc_proj: torch.Tensor

    @property
    def mask(self) -> torch.Tensor:
        return torch.arange(self.H.shape[1]).unsqueeze(0) < self.lengths.unsqueeze(1)


class MddModel(nn.Module):
    """Frontend -> shared encoder -> {CTC head, attention decoder}."""

    def __init__(self, cfg: ModelConfig, dtype=torch.float32):
        super().__init__()
        self.cfg = cfg
        self.vocab = cfg.vocab
        if cfg.frontend == "sinc":
            self.frontend = SincFrontend(cfg.sinc, seed=cfg.seed, dtype=dtype)
        else:
            self.frontend = FbankNorm(cfg.fbank_dim, dtype=dtype)
        V = self.vocab
        self.encoder = Encoder(self.frontend.out_dim, cfg.enc_hidden, cfg.enc_layers, cfg.downsample, dtype)
        self.ctc_head = nn.Linear(cfg.enc_dim, V.ctc_size, dtype=dtype)
        self.attention = LocationAttention(
            cfg.enc_dim, cfg.dec_hidden, cfg.att_dim, cfg.att_conv_channels, cfg.att_conv_width, dtype
        )
        self.decoder = Decoder(V.sos + 1, cfg.emb_dim, cfg.enc_dim, cfg.dec_hidden, V.dec_size, dtype)
        gen = torch.Generator().manual_seed(cfg.seed + 1)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if not name.startswith("frontend."):
                    p.uniform_(-cfg.init_scale, cfg.init_scale, generator=gen)

    @property
    def dtype(self) -> torch.dtype:
        return self.ctc_head.weight.dtype

    def encode(self, inputs: torch.Tensor, lengths: torch.Tensor) -> Encoded:
        """Raw waveforms (sinc) or FBANK frames (fbank) -> encoder states + CTC logits."""
        feats, t_len = self.frontend(inputs, lengths)
        H, s_len = self.encoder(feats, t_len)
        return Encoded(H, s_len, self.ctc_head(H), self.attention.enc_proj(H))

    def initial_decoder(self, enc: Encoded):
        B = enc.H.shape[0]
        zeros = enc.H.new_zeros(B, self.cfg.dec_hidden)
        mask = enc.mask.to(enc.H.dtype)
        weights = mask / mask.sum(1, keepdim=True)
        context = torch.bmm(weights.unsqueeze(1), enc.H).squeeze(1)
        return DecoderState(zeros, zeros.clone()), weights, context

    def attend(self, q: DecoderState, enc: Encoded, prev_weights: torch.Tensor) -> AttentionStep:
        return self.attention(q.h, enc.H, enc.enc_proj, prev_weights, enc.mask)

    def decode_step(self, state: DecoderState, y_prev: torch.Tensor, c_prev: torch.Tensor):
        if torch.any(y_prev == PhoneVocab.BLANK) or torch.any(y_prev == self.vocab.eos):
            raise VocabError("decoder input must be a phone or sos")
        return self.decoder(state, y_prev, c_prev)

    def attention_step_logprobs(self, enc: Encoded, targets: list[list[int]]) -> torch.Tensor:
        """Teacher-forced per-step log p(y_l | y_<l, X), zero past each target's eos. Shape (B, Lmax+1)."""
        B = len(targets)
        for t in targets:
            self.vocab.check_target(t)
        lmax = max(len(t) for t in targets)
        V = self.vocab
        inp = torch.full((B, lmax + 1), V.sos, dtype=torch.long)
        out = torch.full((B, lmax + 1), V.eos, dtype=torch.long)
        valid = torch.zeros(B, lmax + 1, dtype=torch.bool)
        for b, t in enumerate(targets):
            inp[b, 1 : len(t) + 1] = torch.tensor(t, dtype=torch.long)
            out[b, : len(t)] = torch.tensor(t, dtype=torch.long)
            valid[b, : len(t) + 1] = True
        inp = inp.masked_fill(~valid, V.sos)
        state, weights, context = self.initial_decoder(enc)
        steps = []
        for l in range(lmax + 1):
            state, logp = self.decode_step(state, inp[:, l], context)
            steps.append(logp.gather(1, (out[:, l] - 1).unsqueeze(1)).squeeze(1))
            if l < lmax:
                att = self.attend(state, enc, weights)
                weights, context = att.weights, att.context
        step_logp = torch.stack(steps, dim=1)
        return step_logp * valid.to(step_logp.dtype)

    def attention_nll(self, enc: Encoded, targets: list[list[int]]) -> torch.Tensor:
        """Per-utterance -log p_att(y|X), eos included. Shape (B,)."""
        return -self.attention_step_logprobs(enc, targets).sum(1)

    def ctc_logprobs(self, enc: Encoded, b: int) -> np.ndarray:
        s = int(enc.lengths[b])
        return F.log_softmax(enc.ctc_logits[b, :s].detach().double(), dim=1).numpy()


# --- parameter file ---------------------------------------------------------

MAGIC = b"SINCMDD\x00"
FORMAT_VERSION = 1


class ParamFileError(ValueError):
    pass


def write_param_file(path: str | Path, tensors: dict[str, np.ndarray], scalars: dict[str, float] | None = None):
    """Binary layout (little-endian): magic, u32 version, u32 n_scalars, u32 n_tensors,
    then per scalar (u16 name length, name, f64) and per tensor
    (u16 name length, name, u8 ndim, u32 dims..., f64 data)."""
    scalars = scalars or {}
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<III", FORMAT_VERSION, len(scalars), len(tensors)))
        for name, value in scalars.items():
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)) + raw + struct.pack("<d", float(value)))
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype="<f8")
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)) + raw)
            f.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr).tobytes())


def read_param_file(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, float]]:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise ParamFileError(f"{path}: not a parameter file")
    pos = len(MAGIC)

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise ParamFileError(f"{path}: truncated")
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    version, n_scalars, n_tensors = take("<III")
    if version != FORMAT_VERSION:
        raise ParamFileError(f"{path}: unsupported format version {version}")
    scalars, tensors = {}, {}
    for _ in range(n_scalars):
        (n,) = take("<H")
        name = data[pos : pos + n].decode("utf-8")
        pos += n
        (scalars[name],) = take("<d")
    for _ in range(n_tensors):
        (n,) = take("<H")
        name = data[pos : pos + n].decode("utf-8")
        pos += n
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I") if ndim else ()
        count = math.prod(shape)
        if pos + 8 * count > len(data):
            raise ParamFileError(f"{path}: truncated tensor {name}")
        tensors[name] = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape).copy()
        pos += 8 * count
    return tensors, scalars


def save_params(model: MddModel, path: str | Path, scalars: dict[str, float] | None = None) -> None:
    state = {k: v.detach().double().numpy() for k, v in model.state_dict().items()}
    write_param_file(path, state, scalars)


def load_params(model: MddModel, path: str | Path) -> dict[str, float]:
    """Fill ``model`` from ``path``; every tensor name and shape must match."""
    tensors, scalars = read_param_file(path)
    expected = model.state_dict()
    if set(tensors) != set(expected):
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        raise ParamFileError(f"parameter names differ from config (missing {missing}, unexpected {extra})")
    for name, ref in expected.items():
        if tuple(tensors[name].shape) != tuple(ref.shape):
            raise ParamFileError(f"{name}: shape {tensors[name].shape} does not match config {tuple(ref.shape)}")
    model.load_state_dict({k: torch.as_tensor(v, dtype=expected[k].dtype) for k, v in tensors.items()})
    return scalars
