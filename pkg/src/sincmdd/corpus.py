"""Synthetic formant-based phone corpus with injected mispronunciations.

Each phone is a mixture of sinusoids at its formant frequencies. Utterances
are synthesized from the *perceived* phone sequence, so the audio always
carries the phones a recognizer should output.
"""
from __future__ import annotations

import math
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .mddeval import DEL, UttAnnotation, write_annotations

SAMPLE_RATE = 16000
PEAK = 0.9
CROSSFADE_MS = 5.0


class WavFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim != 1 or x.size < 1:
            raise ValueError("waveform must be a non-empty 1-D array")
        if self.sample_rate_hz <= 0:
            raise ValueError("sample rate must be positive")
        if np.max(np.abs(x)) > 1.0:
            raise ValueError("waveform samples must lie in [-1, 1]")
        object.__setattr__(self, "samples", x)

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz


@dataclass(frozen=True)
class PhoneSpec:
    symbol: str
    formants_hz: tuple[float, ...]
    duration_ms: float = 90.0
    jitter_ms: float = 15.0


# Vowel-like surrogates; every pair differs by >= 200 Hz in some formant.
DEFAULT_PHONES: tuple[PhoneSpec, ...] = (
    PhoneSpec("aa", (730.0, 1090.0, 2440.0)),
    PhoneSpec("iy", (270.0, 2290.0, 3010.0)),
    PhoneSpec("uw", (300.0, 870.0, 2240.0)),
    PhoneSpec("eh", (530.0, 1840.0, 2480.0)),
    PhoneSpec("ao", (570.0, 840.0, 2410.0)),
    PhoneSpec("er", (490.0, 1350.0, 1690.0)),
)

# The 39-phone CMU inventory; available as symbols, not synthesized.
CMU_PHONES: tuple[str, ...] = (
    "aa ae ah ao aw ay b ch d dh eh er ey f g hh ih iy jh k l m n ng ow oy p r s sh t th uh uw v w y z zh"
).split()

FORMANT_AMPLITUDES = (1.0, 0.6, 0.35)


def formant_separation(a: PhoneSpec, b: PhoneSpec) -> float:
    """Largest per-formant frequency gap between two phones."""
    return max(abs(x - y) for x, y in zip(a.formants_hz, b.formants_hz))


def nearest_phone(symbol: str, specs: dict[str, PhoneSpec]) -> str:
    """Formant-nearest other phone (Euclidean over shared formants, ties by symbol)."""
    me = specs[symbol]

    def dist(other: PhoneSpec) -> float:
        return math.dist(me.formants_hz[:2], other.formants_hz[:2])

    others = sorted((s for s in specs if s != symbol), key=lambda s: (dist(specs[s]), s))
    return others[0]


@dataclass(frozen=True)
class CorpusConfig:
    phones: tuple[PhoneSpec, ...] = DEFAULT_PHONES
    n_utts: int = 600
    min_len: int = 3
    max_len: int = 6
    train_error_rate: float = 0.01
    test_error_rate: float = 0.14  # also used for dev
    deletion_fraction: float = 0.25
    noise_level: float = 0.02
    seed: int = 0
    split_fractions: tuple[float, float, float] = (5 / 6, 1 / 12, 1 / 12)
    sample_rate_hz: int = SAMPLE_RATE
    min_separation_hz: float = 200.0

    def __post_init__(self):
        if not self.phones:
            raise ValueError("phone inventory is empty")
        syms = [p.symbol for p in self.phones]
        if len(set(syms)) != len(syms):
            raise ValueError("duplicate phone symbols")
        if DEL in syms:
            raise ValueError(f"{DEL} is reserved")
        nyq = self.sample_rate_hz / 2
        for p in self.phones:
            if not p.formants_hz or max(p.formants_hz) >= nyq:
                raise ValueError(f"phone {p.symbol}: formants must be below {nyq} Hz")
            if p.duration_ms <= 0 or p.duration_ms - p.jitter_ms <= 0:
                raise ValueError(f"phone {p.symbol}: duration must stay positive")
        for i, a in enumerate(self.phones):
            for b in self.phones[i + 1:]:
                if formant_separation(a, b) < self.min_separation_hz:
                    raise ValueError(
                        f"phones {a.symbol} and {b.symbol} are closer than {self.min_separation_hz} Hz"
                    )
        for p in (self.train_error_rate, self.test_error_rate, self.deletion_fraction):
            if not 0.0 <= p <= 1.0:
                raise ValueError("rates must lie in [0, 1]")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9 or min(self.split_fractions) < 0:
            raise ValueError("split fractions must be non-negative and sum to 1")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")
        if self.n_utts < 1:
            raise ValueError("n_utts must be positive")

    @property
    def spec_map(self) -> dict[str, PhoneSpec]:
        return {p.symbol: p for p in self.phones}

    def with_error_rate(self, p: float) -> "CorpusConfig":
        from dataclasses import replace

        return replace(self, train_error_rate=p, test_error_rate=p)


def _rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


def synth_wave(
    phones: Sequence[str],
    specs: dict[str, PhoneSpec],
    seed: int = 0,
    noise_level: float = 0.02,
    jitter: bool = True,
    sample_rate_hz: int = SAMPLE_RATE,
) -> Waveform:
    """Concatenate formant-sinusoid segments with short cross-fades, peak-normalized to 0.9."""
    if not phones:
        raise ValueError("cannot synthesize an empty phone sequence")
    for p in phones:
        if p not in specs:
            raise ValueError(f"unknown phone {p!r}")
    rng = _rng(seed, 1)
    lengths = []
    for p in phones:
        spec = specs[p]
        dur = spec.duration_ms
        if jitter and spec.jitter_ms > 0:
            dur += rng.uniform(-spec.jitter_ms, spec.jitter_ms)
        lengths.append(int(round(dur * sample_rate_hz / 1000.0)))
    bounds = np.concatenate(([0], np.cumsum(lengths)))
    n = int(bounds[-1])
    t = np.arange(n) / sample_rate_hz
    fade = max(1, int(CROSSFADE_MS * sample_rate_hz / 1000.0))
    idx = np.arange(n)

    out = np.zeros(n)
    for k, p in enumerate(phones):
        start, stop = bounds[k], bounds[k + 1]
        # trapezoid weights: neighbouring segments sum to one across each boundary
        w = np.clip((idx - (start - fade / 2)) / fade, 0.0, 1.0) if k > 0 else np.ones(n)
        if k < len(phones) - 1:
            w = w * np.clip(((stop + fade / 2) - idx) / fade, 0.0, 1.0)
        seg = np.zeros(n)
        for f, amp in zip(specs[p].formants_hz, FORMANT_AMPLITUDES):
            seg += amp * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
        out += w * seg
    out += noise_level * rng.standard_normal(n)
    out *= PEAK / max(np.max(np.abs(out)), 1e-12)
    return Waveform(out, sample_rate_hz)


@dataclass
class Utterance:
    utt_id: str
    split: str
    annotation: UttAnnotation
    wave: Waveform

    @property
    def canonical(self) -> tuple[str, ...]:
        return self.annotation.canonical

    @property
    def perceived(self) -> list[str]:
        return self.annotation.realized


@dataclass
class Corpus:
    utterances: list[Utterance] = field(default_factory=list)
    phones: tuple[str, ...] = ()

    def split(self, name: str) -> list[Utterance]:
        return [u for u in self.utterances if u.split == name]

    @property
    def n_injected_errors(self) -> int:
        return sum(u.annotation.n_errors for u in self.utterances)


SPLITS = ("train", "dev", "test")


def split_sizes(n: int, fractions: Sequence[float]) -> tuple[int, int, int]:
    dev = int(math.floor(n * fractions[1] + 1e-9))
    test = int(math.floor(n * fractions[2] + 1e-9))
    return n - dev - test, dev, test


def mispronounce(
    canonical: Sequence[str],
    rate: float,
    deletion_fraction: float,
    specs: dict[str, PhoneSpec],
    rng: np.random.Generator,
) -> list[str]:
    perceived = []
    for k, phone in enumerate(canonical):
        hit = rng.random() < rate
        delete = rng.random() < deletion_fraction
        if not hit:
            perceived.append(phone)
        elif delete:
            perceived.append(DEL)
        else:
            perceived.append(nearest_phone(phone, specs))
    if all(p == DEL for p in perceived):
        # the audio needs at least one phone
        perceived[-1] = canonical[-1]
    return perceived


def gen_corpus(cfg: CorpusConfig) -> Corpus:
    specs = cfg.spec_map
    symbols = [p.symbol for p in cfg.phones]
    n_train, n_dev, n_test = split_sizes(cfg.n_utts, cfg.split_fractions)
    labels = np.array(["train"] * n_train + ["dev"] * n_dev + ["test"] * n_test)
    _rng(cfg.seed, 0).shuffle(labels)

    utts = []
    for i in range(cfg.n_utts):
        split = str(labels[i])
        rng = _rng(cfg.seed, 2, i)
        length = int(rng.integers(cfg.min_len, cfg.max_len + 1))
        canonical = [symbols[j] for j in rng.integers(0, len(symbols), size=length)]
        rate = cfg.train_error_rate if split == "train" else cfg.test_error_rate
        perceived = mispronounce(canonical, rate, cfg.deletion_fraction, specs, rng)
        utt_id = f"utt{i:05d}"
        ann = UttAnnotation(utt_id, tuple(canonical), tuple(perceived))
        wav = synth_wave(
            ann.realized,
            specs,
            seed=int(rng.integers(0, 2**31)),
            noise_level=cfg.noise_level,
            sample_rate_hz=cfg.sample_rate_hz,
        )
        utts.append(Utterance(utt_id, split, ann, wav))
    return Corpus(utts, tuple(symbols))


# --- WAV I/O ----------------------------------------------------------------

def write_wav(wave_: Waveform, path: str | Path) -> None:
    pcm = np.clip(np.round(wave_.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(wave_.sample_rate_hz)
        w.writeframes(pcm.tobytes())


def read_wav(path: str | Path, expected_rate: int = SAMPLE_RATE) -> Waveform:
    """Read 16-bit mono PCM at ``expected_rate``; anything else is a WavFormatError."""
    try:
        with wave.open(str(path), "rb") as w:
            channels, width, rate, n = w.getnchannels(), w.getsampwidth(), w.getframerate(), w.getnframes()
            data = w.readframes(n)
    except (wave.Error, EOFError) as exc:
        raise WavFormatError(f"{path}: not a readable PCM WAV file ({exc})") from exc
    if channels != 1:
        raise WavFormatError(f"{path}: expected mono audio, found {channels} channels")
    if width != 2:
        raise WavFormatError(f"{path}: expected 16-bit samples, found {8 * width}-bit")
    if rate != expected_rate:
        raise WavFormatError(f"{path}: expected {expected_rate} Hz, found {rate} Hz")
    if n == 0:
        raise WavFormatError(f"{path}: no audio frames")
    x = np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(x, rate)


# --- dataset layout ---------------------------------------------------------

def write_corpus(corpus: Corpus, root: str | Path) -> None:
    root = Path(root)
    (root / "wav").mkdir(parents=True, exist_ok=True)
    for u in corpus.utterances:
        write_wav(u.wave, root / "wav" / f"{u.utt_id}.wav")
    with open(root / "transcripts.tsv", "w", encoding="utf-8") as f:
        f.write("utt_id\tphones\n")
        for u in corpus.utterances:
            f.write(f"{u.utt_id}\t{' '.join(u.canonical)}\n")
    with open(root / "splits.tsv", "w", encoding="utf-8") as f:
        f.write("utt_id\tsplit\n")
        for u in corpus.utterances:
            f.write(f"{u.utt_id}\t{u.split}\n")
    with open(root / "phones.txt", "w", encoding="utf-8") as f:
        f.write("\n".join(corpus.phones) + "\n")
    write_annotations([u.annotation for u in corpus.utterances], root / "annotations.tsv")


def _read_tsv(path: Path) -> list[list[str]]:
    if not path.exists():
        raise FileNotFoundError(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    return [line.split("\t") for line in lines[1:] if line]


def load_corpus(root: str | Path) -> Corpus:
    from .mddeval import read_annotations

    root = Path(root)
    splits = {row[0]: row[1] for row in _read_tsv(root / "splits.tsv")}
    anns = read_annotations(root / "annotations.tsv")
    phones_file = root / "phones.txt"
    if phones_file.exists():
        phones = tuple(phones_file.read_text(encoding="utf-8").split())
    else:
        phones = tuple(sorted({p for a in anns for p in a.canonical}))
    utts = []
    for ann in anns:
        wav_path = root / "wav" / f"{ann.utt_id}.wav"
        if not wav_path.exists():
            raise FileNotFoundError(wav_path)
        utts.append(Utterance(ann.utt_id, splits.get(ann.utt_id, "train"), ann, read_wav(wav_path)))
    return Corpus(utts, phones)
