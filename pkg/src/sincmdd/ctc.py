"""Connectionist temporal classification in the log domain.

All routines take a ``(T, V)`` matrix of per-frame log-probabilities with the
blank symbol at column 0 and targets given as sequences of integer ids in
``1..V-1``.
"""
from __future__ import annotations

import functools
import itertools
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

BLANK = 0

# Stand-in for log(0). Finite so that sums and log-add-exp stay NaN-free; any
# value below LOG_ZERO / 2 is treated as an impossible event.
LOG_ZERO = -1.0e30


class CtcBoundsError(ValueError):
    """Raised when the brute-force oracle is asked to enumerate too many paths."""


def _is_log_zero(x: float) -> bool:
    return x < LOG_ZERO / 2


def _lse(*xs: np.ndarray) -> np.ndarray:
    out = xs[0]
    for x in xs[1:]:
        out = np.logaddexp(out, x)
    return out


def check_logprobs(logprobs: np.ndarray, atol: float = 1e-6) -> np.ndarray:
    lp = np.asarray(logprobs, dtype=np.float64)
    if lp.ndim != 2 or lp.shape[0] < 1 or lp.shape[1] < 2:
        raise ValueError(f"expected a (T>=1, V>=2) log-probability matrix, got shape {lp.shape}")
    norm = np.logaddexp.reduce(lp, axis=1)
    if np.max(np.abs(norm)) > atol:
        raise ValueError("rows of the log-probability matrix do not normalise to 1")
    return lp


def _check_target(target: Sequence[int], vocab_size: int) -> np.ndarray:
    y = np.asarray(list(target), dtype=np.int64)
    if y.size and (y.min() < 1 or y.max() >= vocab_size):
        raise ValueError(f"target ids must lie in 1..{vocab_size - 1}")
    return y


def extend_with_blanks(target: Sequence[int]) -> np.ndarray:
    """``[a, b]`` -> ``[blank, a, blank, b, blank]``."""
    ext = np.full(2 * len(target) + 1, BLANK, dtype=np.int64)
    ext[1::2] = np.asarray(list(target), dtype=np.int64)
    return ext


def min_frames(target: Sequence[int]) -> int:
    """Shortest input that can emit ``target``: one frame per label plus a blank between repeats."""
    target = list(target)
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


@dataclass(frozen=True)
class CtcTrellis:
    ext: np.ndarray
    log_alpha: np.ndarray
    log_beta: np.ndarray

    @property
    def forward_logprob(self) -> float:
        last = self.log_alpha[-1]
        return float(last[-1] if last.size == 1 else np.logaddexp(last[-1], last[-2]))

    @property
    def backward_logprob(self) -> float:
        first = self.log_beta[0]
        return float(first[0] if first.size == 1 else np.logaddexp(first[0], first[1]))


def ctc_trellis(logprobs: np.ndarray, target: Sequence[int]) -> CtcTrellis:
    lp = check_logprobs(logprobs)
    y = _check_target(target, lp.shape[1])
    T = lp.shape[0]
    ext = extend_with_blanks(y)
    S = ext.size
    emit = lp[:, ext]  # (T, S)

    # skip transition s-2 -> s allowed only onto a label that differs from the previous label
    skip = np.zeros(S, dtype=bool)
    if S > 2:
        skip[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])

    alpha = np.full((T, S), LOG_ZERO)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        stay = prev
        step = np.concatenate(([LOG_ZERO], prev[:-1]))
        jump = np.where(skip, np.concatenate(([LOG_ZERO, LOG_ZERO], prev[:-2]))[:S], LOG_ZERO)
        alpha[t] = _lse(stay, step, jump) + emit[t]

    beta = np.full((T, S), LOG_ZERO)
    beta[T - 1, S - 1] = emit[T - 1, S - 1]
    if S > 1:
        beta[T - 1, S - 2] = emit[T - 1, S - 2]
    skip_from = np.zeros(S, dtype=bool)  # s -> s+2 allowed
    skip_from[:-2] = skip[2:]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        stay = nxt
        step = np.concatenate((nxt[1:], [LOG_ZERO]))
        jump = np.where(skip_from, np.concatenate((nxt[2:], [LOG_ZERO, LOG_ZERO]))[:S], LOG_ZERO)
        beta[t] = _lse(stay, step, jump) + emit[t]

    np.maximum(alpha, LOG_ZERO, out=alpha)
    np.maximum(beta, LOG_ZERO, out=beta)
    return CtcTrellis(ext=ext, log_alpha=alpha, log_beta=beta)


class CtcLoss(NamedTuple):
    loss: float
    grad: np.ndarray  # d loss / d logits, where logprobs = log_softmax(logits)
    feasible: bool


def ctc_loss(logprobs: np.ndarray, target: Sequence[int]) -> CtcLoss:
    """Negative log-likelihood of ``target`` and its gradient w.r.t. the pre-softmax logits.

    An infeasible target (input too short) gives ``loss = inf``, a zero
    gradient and ``feasible = False`` instead of raising.
    """
    lp = check_logprobs(logprobs)
    trellis = ctc_trellis(lp, target)
    logp = trellis.forward_logprob
    if _is_log_zero(logp):
        return CtcLoss(float("inf"), np.zeros_like(lp), False)

    # per-frame state occupancy, folded onto vocabulary columns
    occ = trellis.log_alpha + trellis.log_beta - lp[:, trellis.ext] - logp
    gamma = np.zeros_like(lp)
    np.add.at(gamma.T, trellis.ext, np.exp(occ).T)
    grad = np.exp(lp) - gamma
    return CtcLoss(-logp, grad, True)


@functools.lru_cache(maxsize=64)
def _collapsed_paths(vocab_size: int, frames: int) -> tuple[np.ndarray, tuple[tuple[int, ...], ...]]:
    paths = np.array(list(itertools.product(range(vocab_size), repeat=frames)), dtype=np.int64)
    labels = tuple(collapse(p) for p in paths)
    return paths, labels


def collapse(path: Sequence[int]) -> tuple[int, ...]:
    """Merge consecutive repeats, then drop blanks."""
    out = []
    prev = None
    for k in path:
        k = int(k)
        if k != prev and k != BLANK:
            out.append(k)
        prev = k
    return tuple(out)


def _enumerate(lp: np.ndarray) -> tuple[np.ndarray, tuple[tuple[int, ...], ...]]:
    T, V = lp.shape
    if T > 8 or V - 1 > 4:
        raise CtcBoundsError(f"brute force limited to T <= 8 and 4 labels, got T={T}, labels={V - 1}")
    paths, labels = _collapsed_paths(V, T)
    path_logp = lp[np.arange(T), paths].sum(axis=1)
    return np.exp(path_logp), labels


def ctc_brute_force(logprobs: np.ndarray, target: Sequence[int]) -> float:
    """CTC loss by summing over every frame-level path. Small inputs only."""
    lp = check_logprobs(logprobs)
    y = tuple(int(v) for v in _check_target(target, lp.shape[1]))
    probs, labels = _enumerate(lp)
    total = sum(p for p, lab in zip(probs, labels) if lab == y)
    return float("inf") if total == 0.0 else float(-np.log(total))


def ctc_brute_force_table(logprobs: np.ndarray) -> dict[tuple[int, ...], float]:
    """Probability of every label sequence reachable from ``logprobs``."""
    lp = check_logprobs(logprobs)
    probs, labels = _enumerate(lp)
    table: dict[tuple[int, ...], float] = {}
    for p, lab in zip(probs, labels):
        table[lab] = table.get(lab, 0.0) + float(p)
    return table


def ctc_greedy_decode(logprobs: np.ndarray) -> list[int]:
    lp = np.asarray(logprobs)
    return list(collapse(np.argmax(lp, axis=1)))


class CtcPrefixScorer:
    """Incremental CTC prefix probabilities for label-synchronous search.

    A state holds two length-T log arrays: paths ending at frame t that have
    emitted the prefix and end in a label (``r_n``) or in blank (``r_b``).
    """

    def __init__(self, logprobs: np.ndarray):
        self.lp = check_logprobs(logprobs)
        self.T = self.lp.shape[0]

    def initial_state(self) -> tuple[np.ndarray, np.ndarray]:
        r_n = np.full(self.T, LOG_ZERO)
        r_b = np.cumsum(self.lp[:, BLANK])
        return r_n, r_b

    def extend(self, state: tuple[np.ndarray, np.ndarray], last: int | None, label: int):
        """Return ``(new_state, log prefix probability)`` for ``prefix + [label]``."""
        r_n_prev, r_b_prev = state
        emit = self.lp[:, label]
        r_n = np.full(self.T, LOG_ZERO)
        r_b = np.full(self.T, LOG_ZERO)
        # an empty prefix can start emitting the label at frame 0
        r_n[0] = emit[0] if last is None else LOG_ZERO
        psi = r_n[0]
        if last == label:
            phi = r_b_prev
        else:
            phi = np.logaddexp(r_n_prev, r_b_prev)
        for t in range(1, self.T):
            r_n[t] = np.logaddexp(r_n[t - 1], phi[t - 1]) + emit[t]
            r_b[t] = np.logaddexp(r_b[t - 1], r_n[t - 1]) + self.lp[t, BLANK]
            psi = np.logaddexp(psi, phi[t - 1] + emit[t])
        np.maximum(r_n, LOG_ZERO, out=r_n)
        np.maximum(r_b, LOG_ZERO, out=r_b)
        return (r_n, r_b), float(max(psi, LOG_ZERO))

    def extend_all(self, state: tuple[np.ndarray, np.ndarray], last: int | None):
        """:meth:`extend` for every non-blank label at once.

        Returns ``(r_n, r_b, psi)`` with ``r_n``/``r_b`` of shape (T, V-1)
        and ``psi`` of shape (V-1,); column ``k`` belongs to label ``k + 1``.
        """
        r_n_prev, r_b_prev = state
        emit = self.lp[:, 1:]
        T, L = emit.shape
        phi = np.repeat(np.logaddexp(r_n_prev, r_b_prev)[:, None], L, axis=1)
        if last is not None:
            phi[:, last - 1] = r_b_prev
        r_n = np.full((T, L), LOG_ZERO)
        r_b = np.full((T, L), LOG_ZERO)
        if last is None:
            r_n[0] = emit[0]
        psi = r_n[0].copy()
        blank = self.lp[:, BLANK]
        for t in range(1, T):
            r_n[t] = np.logaddexp(r_n[t - 1], phi[t - 1]) + emit[t]
            r_b[t] = np.logaddexp(r_b[t - 1], r_n[t - 1]) + blank[t]
            psi = np.logaddexp(psi, phi[t - 1] + emit[t])
        np.maximum(r_n, LOG_ZERO, out=r_n)
        np.maximum(r_b, LOG_ZERO, out=r_b)
        return r_n, r_b, np.maximum(psi, LOG_ZERO)

    def final(self, state: tuple[np.ndarray, np.ndarray]) -> float:
        """Log-probability that the label sequence is exactly the prefix."""
        r_n, r_b = state
        return float(max(np.logaddexp(r_n[-1], r_b[-1]), LOG_ZERO))


def ctc_prefix_logprob(logprobs: np.ndarray, prefix: Sequence[int]) -> float:
    scorer = CtcPrefixScorer(logprobs)
    _check_target(prefix, scorer.lp.shape[1])
    state = scorer.initial_state()
    score = 0.0
    last = None
    for label in prefix:
        state, score = scorer.extend(state, last, int(label))
        last = int(label)
    return score
