"""Joint CTC/attention objective, SGD training loop, checkpoints and gradient checks."""
from __future__ import annotations

import copy
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import ctc as ctc_mod
from .corpus import Corpus, Utterance
from .frontend import FrontendConfig, fbank
from .seqmodel import FbankNorm, MddModel, ModelConfig, load_params, save_params

log = logging.getLogger(__name__)

CLIP_NORM = 5.0


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.5
    lr: float = 0.5
    epochs: int = 30
    batch_size: int = 8
    seed: int = 0
    frontend: str = "sinc"
    clip_norm: float = CLIP_NORM

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("lr, epochs and batch_size must be positive")
        if self.frontend not in ("sinc", "fbank"):
            raise ValueError(f"unknown frontend {self.frontend!r}")


# --- CTC bridge -------------------------------------------------------------

class _CtcFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, logits, target):
        lp = F.log_softmax(logits.detach().double(), dim=1).numpy()
        res = ctc_mod.ctc_loss(lp, target)
        ctx.save_for_backward(torch.as_tensor(res.grad, dtype=logits.dtype))
        return logits.new_tensor(res.loss)

    @staticmethod
    def backward(ctx, grad_out):
        (grad,) = ctx.saved_tensors
        return grad * grad_out, None


def ctc_nll(logits: torch.Tensor, target: Sequence[int]) -> tuple[torch.Tensor, bool]:
    """Differentiable -log p_ctc(target | logits) for one utterance of (S, V) logits."""
    loss = _CtcFunction.apply(logits, tuple(int(t) for t in target))
    return loss, bool(torch.isfinite(loss))


# --- batches ----------------------------------------------------------------

@dataclass
class Sample:
    utt_id: str
    inputs: np.ndarray  # waveform samples (sinc) or (T, 80) FBANK frames
    target: list[int]


@dataclass
class Batch:
    inputs: torch.Tensor
    lengths: torch.Tensor
    targets: list[list[int]]
    utt_ids: list[str]


def make_batch(samples: Sequence[Sample], dtype=torch.float32) -> Batch:
    """Zero-pad inputs to the longest sample."""
    lengths = torch.tensor([s.inputs.shape[0] for s in samples], dtype=torch.long)
    shape = (len(samples), int(lengths.max())) + samples[0].inputs.shape[1:]
    x = np.zeros(shape)
    for i, s in enumerate(samples):
        x[i, : s.inputs.shape[0]] = s.inputs
    return Batch(torch.as_tensor(x, dtype=dtype), lengths, [s.target for s in samples], [s.utt_id for s in samples])


def model_inputs(utt: Utterance, model_cfg: ModelConfig) -> np.ndarray:
    """Raw samples for the sinc frontend, FBANK frames otherwise."""
    if len(utt.wave) == 0:
        raise ValueError(f"{utt.utt_id}: zero-length utterance")
    if model_cfg.frontend == "fbank":
        return fbank(utt.wave, n_mels=model_cfg.fbank_dim).frames
    return utt.wave.samples


def prepare_samples(utts: Sequence[Utterance], model_cfg: ModelConfig) -> list[Sample]:
    vocab = model_cfg.vocab
    out = []
    for u in utts:
        if not u.perceived:
            raise ValueError(f"{u.utt_id}: empty target")
        out.append(Sample(u.utt_id, model_inputs(u, model_cfg), vocab.encode(u.perceived)))
    return out


def bucket(samples: Sequence[Sample], batch_size: int) -> list[list[Sample]]:
    """Length-sorted (stable on utt_id) fixed-size batches."""
    ordered = sorted(samples, key=lambda s: (s.inputs.shape[0], s.utt_id))
    return [ordered[i : i + batch_size] for i in range(0, len(ordered), batch_size)]


# --- losses -----------------------------------------------------------------

@dataclass
class JointLoss:
    loss: torch.Tensor  # scalar, mean over utterances
    ctc: torch.Tensor  # (B,) may contain inf for infeasible targets
    att: torch.Tensor  # (B,)
    ctc_feasible: list[bool]


def combine(ctc: torch.Tensor, att: torch.Tensor, alpha: float) -> torch.Tensor:
    """alpha * ctc + (1 - alpha) * att per utterance; zero-weight branches are skipped."""
    if alpha == 1.0:
        return ctc
    if alpha == 0.0:
        return att
    # an infeasible CTC term drops out and the attention branch still trains
    ctc = torch.where(torch.isfinite(ctc), ctc, torch.zeros_like(ctc))
    return alpha * ctc + (1.0 - alpha) * att


def joint_loss(model: MddModel, batch: Batch, alpha: float) -> JointLoss:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    enc = model.encode(batch.inputs, batch.lengths)
    ctc_terms, feasible = [], []
    zero = enc.H.new_zeros(())
    for b, target in enumerate(batch.targets):
        if alpha > 0.0:
            loss, ok = ctc_nll(enc.ctc_logits[b, : int(enc.lengths[b])], target)
        else:
            loss, ok = zero, True
        ctc_terms.append(loss)
        feasible.append(ok)
    ctc = torch.stack(ctc_terms)
    att = model.attention_nll(enc, batch.targets) if alpha < 1.0 else torch.zeros_like(ctc)
    per_utt = combine(ctc, att, alpha)
    return JointLoss(per_utt.mean(), ctc, att, feasible)


def parameter_grads(model: nn.Module, loss: torch.Tensor) -> dict[str, np.ndarray]:
    params = [p for p in model.parameters() if p.requires_grad]
    names = [n for n, p in model.named_parameters() if p.requires_grad]
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return {
        n: (np.zeros(tuple(p.shape)) if g is None else g.detach().double().numpy())
        for n, p, g in zip(names, params, grads)
    }


# --- checkpoints ------------------------------------------------------------

@dataclass
class Checkpoint:
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    state: dict[str, np.ndarray]
    epoch: int
    best_val: float
    history: list[dict] = field(default_factory=list)

    def build_model(self, dtype=torch.float32) -> MddModel:
        model = MddModel(self.model_cfg, dtype=dtype)
        ref = model.state_dict()
        model.load_state_dict({k: torch.as_tensor(v, dtype=ref[k].dtype) for k, v in self.state.items()})
        model.eval()
        return model

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        model = self.build_model()
        save_params(model, directory / "model.bin", {"epoch": self.epoch, "best_val": self.best_val})
        write_kv(directory / "config.txt", config_to_kv(self.model_cfg, self.train_cfg))
        with open(directory / "history.tsv", "w", encoding="utf-8") as f:
            f.write("epoch\ttrain_loss\tdev_loss\n")
            for h in self.history:
                f.write(f"{h['epoch']}\t{h['train_loss']!r}\t{h['dev_loss']!r}\n")

    @classmethod
    def load(cls, directory: str | Path) -> "Checkpoint":
        directory = Path(directory)
        model_cfg, train_cfg = config_from_kv(read_kv(directory / "config.txt"))
        model = MddModel(model_cfg)
        scalars = load_params(model, directory / "model.bin")
        state = {k: v.detach().numpy().copy() for k, v in model.state_dict().items()}
        return cls(model_cfg, train_cfg, state, int(scalars.get("epoch", 0)), float(scalars.get("best_val", math.inf)))


def flatten_config(obj, prefix: str) -> dict[str, str]:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(v):
            out.update(flatten_config(v, key + "."))
        elif isinstance(v, (tuple, list)):
            out[key] = ",".join(str(x) for x in v)
        elif isinstance(v, float):
            out[key] = repr(v)
        else:
            out[key] = str(v)
    return out


def coerce_value(template, raw: str):
    if isinstance(template, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(template, int):
        return int(raw)
    if isinstance(template, float):
        return float(raw)
    if isinstance(template, tuple):
        items = [x for x in raw.split(",") if x != ""]
        if template and isinstance(template[0], int):
            return tuple(int(x) for x in items)
        if template and isinstance(template[0], float):
            return tuple(float(x) for x in items)
        return tuple(items)
    return raw


def unflatten_config(cls_or_obj, kv: dict[str, str], prefix: str):
    """Rebuild a dataclass from flattened keys, using defaults (or an instance) as type templates.

    Keys outside ``prefix`` are ignored; unknown keys inside it raise ``KeyError``.
    """
    known = set(flatten_config(cls_or_obj, prefix))
    unknown = sorted(k for k in kv if k.startswith(prefix) and k not in known)
    if unknown:
        raise KeyError(f"unknown config keys: {', '.join(unknown)}")
    return _apply(cls_or_obj, kv, prefix)


def _apply(cls_or_obj, kv: dict[str, str], prefix: str):
    base = cls_or_obj
    updates = {}
    for f in dataclasses.fields(base):
        key = f"{prefix}{f.name}"
        cur = getattr(base, f.name)
        if dataclasses.is_dataclass(cur):
            updates[f.name] = _apply(cur, kv, key + ".")
        elif key in kv:
            updates[f.name] = coerce_value(cur, kv[key])
    return dataclasses.replace(base, **updates)


def config_to_kv(model_cfg: ModelConfig, train_cfg: TrainConfig) -> dict[str, str]:
    return {**flatten_config(model_cfg, "model."), **flatten_config(train_cfg, "train.")}


def config_from_kv(kv: dict[str, str]) -> tuple[ModelConfig, TrainConfig]:
    if "model.phones" not in kv:
        raise ValueError("config lacks model.phones")
    template = ModelConfig(tuple(kv["model.phones"].split(",")))
    return unflatten_config(template, kv, "model."), unflatten_config(TrainConfig(), kv, "train.")


def write_kv(path: str | Path, kv: dict[str, str]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for k in sorted(kv):
            f.write(f"{k}={kv[k]}\n")


def read_kv(path: str | Path) -> dict[str, str]:
    kv = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        kv[key.strip()] = value.strip()
    return kv


# --- training loop ----------------------------------------------------------

def default_model_config(phones: Sequence[str], frontend: str, seed: int = 0) -> ModelConfig:
    """Desk-scale model: 16 sinc filters of 251 taps, small conv stack, 32-unit BiLSTM."""
    sinc = FrontendConfig(filter_count=16, kernel_length=251, conv_layer_filters=(32, 32), conv_kernel_sizes=(3, 3))
    return ModelConfig(tuple(phones), frontend=frontend, sinc=sinc, seed=seed)


def set_input_stats(model: MddModel, samples: Sequence[Sample], batch_size: int = 16) -> None:
    """Freeze per-dimension mean/std of the frontend's log features on ``samples``."""
    if isinstance(model.frontend, FbankNorm):
        frames = np.concatenate([s.inputs for s in samples], axis=0)
        with torch.no_grad():
            model.frontend.mean.copy_(torch.as_tensor(frames.mean(0)))
            model.frontend.std.copy_(torch.as_tensor(np.maximum(frames.std(0), 1e-5)))
        return
    fe = model.frontend
    total = np.zeros(fe.cfg.filter_count)
    total_sq = np.zeros(fe.cfg.filter_count)
    count = 0
    with torch.no_grad():
        for i in range(0, len(samples), batch_size):
            batch = make_batch(samples[i : i + batch_size], model.dtype)
            x, t_len = fe.compressed(batch.inputs, batch.lengths)
            for b in range(x.shape[0]):
                v = x[b, :, : int(t_len[b])].double().numpy()
                total += v.sum(1)
                total_sq += (v**2).sum(1)
                count += v.shape[1]
    mean = total / count
    std = np.sqrt(np.maximum(total_sq / count - mean**2, 0.0))
    fe.set_log_stats(torch.as_tensor(mean, dtype=model.dtype), torch.as_tensor(std, dtype=model.dtype))


def evaluate_loss(model: MddModel, samples: Sequence[Sample], alpha: float, batch_size: int) -> float:
    total, n = 0.0, 0
    with torch.no_grad():
        for chunk in bucket(samples, batch_size):
            res = joint_loss(model, make_batch(chunk, model.dtype), alpha)
            total += res.loss.item() * len(chunk)
            n += len(chunk)
    return total / n


def sgd_step(model: nn.Module, lr: float, clip_norm: float) -> float:
    params = [p for p in model.parameters() if p.grad is not None]
    norm = float(torch.nn.utils.clip_grad_norm_(params, clip_norm))
    with torch.no_grad():
        for p in params:
            p.add_(p.grad, alpha=-lr)
            p.grad = None
    return norm


def train_loop(
    corpus: Corpus,
    cfg: TrainConfig,
    model_cfg: ModelConfig | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> Checkpoint:
    """Minibatch SGD on the joint loss; returns the best-validation checkpoint."""
    train_utts, dev_utts = corpus.split("train"), corpus.split("dev")
    if not train_utts or not dev_utts:
        raise ValueError("training needs non-empty train and dev splits")
    if model_cfg is None:
        model_cfg = default_model_config(corpus.phones, cfg.frontend, cfg.seed)
    if model_cfg.frontend != cfg.frontend:
        model_cfg = dataclasses.replace(model_cfg, frontend=cfg.frontend)
    train_set = prepare_samples(train_utts, model_cfg)
    dev_set = prepare_samples(dev_utts, model_cfg)

    model = MddModel(model_cfg)
    set_input_stats(model, train_set)
    batches = bucket(train_set, cfg.batch_size)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7]))

    history = [{"epoch": 0, "train_loss": evaluate_loss(model, train_set, cfg.alpha, cfg.batch_size),
                "dev_loss": evaluate_loss(model, dev_set, cfg.alpha, cfg.batch_size)}]
    best_val = history[0]["dev_loss"]
    best_state = copy.deepcopy(model.state_dict())
    best_epoch = 0
    for epoch in range(1, cfg.epochs + 1):
        start = time.perf_counter()
        model.train()
        total, n = 0.0, 0
        for i in rng.permutation(len(batches)):
            chunk = batches[i]
            res = joint_loss(model, make_batch(chunk, model.dtype), cfg.alpha)
            res.loss.backward()
            sgd_step(model, cfg.lr, cfg.clip_norm)
            total += res.loss.item() * len(chunk)
            n += len(chunk)
        model.eval()
        dev_loss = evaluate_loss(model, dev_set, cfg.alpha, cfg.batch_size)
        record = {"epoch": epoch, "train_loss": total / n, "dev_loss": dev_loss,
                  "seconds": time.perf_counter() - start}
        history.append(record)
        log.info("epoch %d train %.4f dev %.4f (%.1fs)", epoch, record["train_loss"], dev_loss, record["seconds"])
        if on_epoch is not None:
            on_epoch(record)
        if dev_loss < best_val:
            best_val, best_epoch = dev_loss, epoch
            best_state = copy.deepcopy(model.state_dict())
    state = {k: v.detach().numpy().copy() for k, v in best_state.items()}
    return Checkpoint(model_cfg, cfg, state, best_epoch, best_val, history)


# --- gradient checking ------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    checked: dict[str, int]

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values()) if self.max_rel_error else 0.0


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """|a - b| / max(|a|, |b|, floor); the floor keeps near-zero entries from dividing by noise."""
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def grad_check(
    module: nn.Module,
    loss_fn: Callable[[], torch.Tensor],
    epsilon: float = 1e-5,
    max_per_tensor: int | None = None,
    seed: int = 0,
    only: Sequence[str] | None = None,
    floor: float = 1e-8,
) -> GradCheckReport:
    """Compare autograd gradients with central differences, tensor by tensor.

    ``max_per_tensor`` caps how many (seeded, randomly chosen) entries of
    each tensor are perturbed. ``floor`` is the denominator floor of
    :func:`rel_error`.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    params = [(n, p) for n, p in module.named_parameters() if p.requires_grad]
    if only is not None:
        params = [(n, p) for n, p in params if n in set(only)]
    if any(p.dtype != torch.float64 for _, p in params):
        raise ValueError("gradient checks need a float64 module")
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise ValueError("loss is not finite; refusing to check gradients")
    grads = torch.autograd.grad(loss, [p for _, p in params], allow_unused=True)
    rng = np.random.default_rng(seed)
    report, counts = {}, {}
    with torch.no_grad():
        for (name, p), g in zip(params, grads):
            analytic = np.zeros(p.numel()) if g is None else g.reshape(-1).numpy().copy()
            idx = np.arange(p.numel())
            if max_per_tensor is not None and p.numel() > max_per_tensor:
                idx = np.sort(rng.choice(p.numel(), max_per_tensor, replace=False))
            flat = p.view(-1)
            numeric = np.empty(idx.size)
            for k, i in enumerate(idx):
                orig = float(flat[i])
                flat[i] = orig + epsilon
                up = float(loss_fn())
                flat[i] = orig - epsilon
                down = float(loss_fn())
                flat[i] = orig
                numeric[k] = (up - down) / (2 * epsilon)
            err = rel_error(analytic[idx], numeric, floor)
            report[name] = float(err.max()) if err.size else 0.0
            counts[name] = int(idx.size)
    return GradCheckReport(report, counts)


def tiny_model_config(n_phones: int = 3, seed: int = 0) -> ModelConfig:
    """Dimensions small enough for exhaustive finite differences."""
    sinc = FrontendConfig(
        filter_count=3,
        kernel_length=15,
        conv_layer_filters=(4, 4),
        conv_kernel_sizes=(3, 3),
        pooling=(20, 1, 1),
        sample_rate_hz=16000,
    )
    phones = tuple(f"p{i}" for i in range(n_phones))
    return ModelConfig(
        phones, frontend="sinc", sinc=sinc, enc_hidden=3, downsample=3, att_dim=4,
        att_conv_channels=2, att_conv_width=3, dec_hidden=4, emb_dim=3, seed=seed, init_scale=1.0,
    )


def tiny_sample(cfg: ModelConfig, n_frames: int = 12, target_len: int = 3, seed: int = 0) -> Batch:
    """A random waveform giving ``n_frames`` frontend frames and a random target."""
    rng = np.random.default_rng(seed)
    sc = cfg.sinc
    n = sc.kernel_length - 1 + n_frames * math.prod(sc.pooling)
    hop = math.prod(sc.pooling)
    # per-frame loudness changes give the encoder states something to attend to
    gain = np.repeat(10.0 ** rng.uniform(-2, 0, n // hop + 1), hop)[:n]
    wave = rng.uniform(-0.9, 0.9, n) * gain
    # no adjacent repeats, so the CTC branch is always feasible and contributes
    target = [int(rng.integers(1, cfg.vocab.n_phones + 1))]
    while len(target) < target_len:
        nxt = int(rng.integers(1, cfg.vocab.n_phones + 1))
        if nxt != target[-1]:
            target.append(nxt)
    return make_batch([Sample("tiny", wave, target)], torch.float64)


# Central differences on a loss of a few nats carry roughly u*|L|/eps ~ 1e-10 of
# roundoff. Some attention weights have gradients near 1e-7, so dividing by the
# entry itself measures that noise, not the gradient. Flooring the denominator
# at 1e-6 keeps a 1e-4 tolerance meaningful down to that noise level.
MODEL_GRAD_FLOOR = 1e-6


def model_grad_check(
    model: MddModel,
    batch: Batch,
    alpha: float = 0.5,
    epsilon: float = 1e-5,
    max_per_tensor: int | None = None,
    floor: float = MODEL_GRAD_FLOOR,
) -> GradCheckReport:
    return grad_check(
        model, lambda: joint_loss(model, batch, alpha).loss, epsilon, max_per_tensor, floor=floor
    )
