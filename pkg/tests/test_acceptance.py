"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

The expensive end-to-end run happens twice (module fixture) and is shared by
the toy-run and determinism criteria.
"""
import itertools
import json
import math
import time

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from conftest import random_logprobs, record
from sincmdd.cli import main, run_grad_checks
from sincmdd.corpus import CorpusConfig, gen_corpus, load_corpus
from sincmdd.ctc import ctc_brute_force, ctc_loss
from sincmdd.decode import encode_one, greedy_attention_decode, joint_beam_decode
from sincmdd.frontend import (
    SincFilterbankParams,
    band_masks,
    materialize_filters,
    measured_frequency_response,
)
from sincmdd.mddeval import ConfusionCounts, align, apply_ops, f1_score, metrics
from sincmdd.seqmodel import MddModel
from sincmdd.train import joint_loss, tiny_model_config, tiny_sample


def dir_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


# 1 --------------------------------------------------------------------------

def test_criterion_1_ctc_oracle():
    start = time.perf_counter()
    worst, checked, mismatched_inf = 0.0, 0, 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        T = int(rng.integers(1, 7))
        n_labels = int(rng.integers(1, 4))
        lp = random_logprobs(rng, T, n_labels + 1)
        for L in range(4):
            for y in itertools.product(range(1, n_labels + 1), repeat=L):
                got, want = ctc_loss(lp, y).loss, ctc_brute_force(lp, y)
                checked += 1
                if math.isinf(want) or math.isinf(got):
                    mismatched_inf += not (math.isinf(want) and math.isinf(got))
                else:
                    worst = max(worst, abs(got - want))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-8 and mismatched_inf == 0 and elapsed < 60
    record(1, ok, f"{checked} targets, max |diff| {worst:.2e}, {elapsed:.1f}s")
    assert ok


# 2 --------------------------------------------------------------------------

def test_criterion_2_gradient_checks():
    start = time.perf_counter()
    results = run_grad_checks(seed=0)
    elapsed = time.perf_counter() - start
    ok = all(r["passed"] for r in results.values()) and elapsed < 300
    detail = ", ".join(f"{k} {r['max_rel_error']:.1e} (<{r['tol']:.0e})" for k, r in results.items())
    record(2, ok, f"{detail}, {elapsed:.1f}s")
    assert ok


# 3 --------------------------------------------------------------------------

def test_criterion_3_filter_correctness():
    p = SincFilterbankParams.from_cutoffs([300.0], [700.0], kernel_length=251, sample_rate_hz=16000)
    freqs, mag = measured_frequency_response(materialize_filters(p)[0], nfft=4096)
    passband, stopband = band_masks(freqs, 300, 700, 251, 16000)
    peak = mag[passband].max()
    peak_freq = freqs[np.argmax(mag)]
    ratio = mag[stopband].mean() / peak
    zero = SincFilterbankParams.from_cutoffs([500.0], [500.0], kernel_length=251)
    zero_exact = bool(np.all(materialize_filters(zero) == 0.0))
    ok = ratio < 0.1 and 300 <= peak_freq <= 700 and zero_exact
    record(3, ok, f"stopband/peak {ratio:.4f}, peak at {peak_freq:.1f} Hz, zero band exact: {zero_exact}")
    assert ok


# 4 --------------------------------------------------------------------------

# (system, recall, precision, reported F1)
PUBLISHED_PRF = [
    ("GOP", 52.88, 35.42, 42.42),
    ("CTC-ATT MFCC", 53.54, 53.64, 53.59),
    ("CTC-ATT FBANK", 52.43, 55.31, 53.83),
    ("CTC-ATT+CNN", 47.60, 55.15, 51.10),
    ("CTC-ATT+SincNet", 50.09, 55.31, 52.57),
]


def counts_for(precision, recall):
    # detected mispronunciations TN = 1; the other cells follow from the ratios
    tn = 1.0
    return ConfusionCounts(TN=tn, FN=tn * (100 / precision - 1), FP=tn * (100 / recall - 1))


def test_criterion_4_metric_arithmetic():
    errors = {}
    for name, recall, precision, f1 in PUBLISHED_PRF:
        m = metrics(counts_for(precision, recall))
        assert m.precision == pytest.approx(precision) and m.recall == pytest.approx(recall)
        errors[name] = max(abs(m.f1 - f1), abs(f1_score(precision, recall) - f1))
    ok = max(errors.values()) <= 0.01
    record(4, ok, "max |F1 - table| " + f"{max(errors.values()):.4f} over {len(errors)} systems")
    assert ok, errors


# 5 --------------------------------------------------------------------------

def test_criterion_5_joint_loss_endpoints():
    failures = []
    worst_mid = 0.0
    for seed in range(5):
        cfg = tiny_model_config(seed=seed)
        model = MddModel(cfg, dtype=torch.float64)
        batch = tiny_sample(cfg, seed=seed)
        with torch.no_grad():
            enc = model.encode(batch.inputs, batch.lengths)
            lp = F.log_softmax(enc.ctc_logits[0], dim=1).numpy()
            ctc = ctc_loss(lp, batch.targets[0]).loss
            att = float(model.attention_nll(enc, batch.targets)[0])
            at1 = float(joint_loss(model, batch, 1.0).loss)
            at0 = float(joint_loss(model, batch, 0.0).loss)
            mid = float(joint_loss(model, batch, 0.5).loss)
        if at1 != ctc:
            failures.append((seed, "alpha=1", at1, ctc))
        if at0 != att:
            failures.append((seed, "alpha=0", at0, att))
        rel = abs(mid - (ctc + att) / 2) / abs((ctc + att) / 2)
        worst_mid = max(worst_mid, rel)
        if rel > 4 * np.finfo(float).eps:
            failures.append((seed, "alpha=0.5", mid, (ctc + att) / 2))
    ok = not failures
    record(5, ok, f"alpha=1/0 exact on 5 models, alpha=0.5 rel diff {worst_mid:.1e}")
    assert ok, failures


# 6 & 8 & 10 ------------------------------------------------------------------

def oracle_run(root):
    """synth at p = 0.14, then score hypothesis = perceived phones."""
    corpus_dir = root / "corpus"
    p = ["--set", "corpus.train_error_rate=0.14", "--set", "corpus.test_error_rate=0.14", "--seed", "0"]
    assert main(["synth", "--out", str(corpus_dir), *p]) == 0
    report = root / "report.json"
    assert main(["eval-mdd", "--annotations", str(corpus_dir / "annotations.tsv"), "--oracle", "--out", str(report), *p]) == 0
    return json.loads(report.read_text())


@pytest.fixture(scope="module")
def oracle_runs(tmp_path_factory):
    roots = [tmp_path_factory.mktemp(f"oracle{i}") for i in range(2)]
    return roots, [oracle_run(r) for r in roots]


def test_criterion_6_mdd_hierarchy_oracle(oracle_runs):
    roots, (doc, _) = oracle_runs
    corpus = load_corpus(roots[0] / "corpus")
    injected = corpus.n_injected_errors
    # the in-memory generator agrees with what was written to disk
    assert gen_corpus(CorpusConfig(seed=0).with_error_rate(0.14)).n_injected_errors == injected
    ok = (
        injected > 0
        and doc["FP"] == doc["FN"] == doc["DE"] == 0
        and doc["recall"] == doc["precision"] == doc["dar"] == 100.0
        and doc["TN"] == doc["CD"] == injected
    )
    record(6, ok, f"TN = CD = {doc['TN']} of {injected} injected, FP/FN/DE = {doc['FP']}/{doc['FN']}/{doc['DE']}")
    assert ok


@pytest.fixture(scope="module")
def pipeline_runs(tmp_path_factory):
    runs = []
    for i in range(2):
        root = tmp_path_factory.mktemp(f"pipeline{i}")
        start = time.perf_counter()
        code = main(["pipeline", "--out", str(root), "--seed", "0"])
        runs.append((root, code, time.perf_counter() - start))
    return runs


def test_criterion_8_end_to_end(pipeline_runs):
    root, code, elapsed = pipeline_runs[0]
    doc = json.loads((root / "comparison.json").read_text())
    corpus = load_corpus(root / "corpus")
    sizes = tuple(len(corpus.split(s)) for s in ("train", "dev", "test"))
    pers = {fe: doc["rows"][fe]["per"] for fe in ("sinc", "fbank") if fe in doc["rows"]}
    ok = (
        code == 0
        and sizes == (500, 50, 50)
        and len(corpus.phones) == 6
        and set(pers) == {"sinc", "fbank"}
        and all(v < 20.0 for v in pers.values())
        and elapsed < 1800
        and "sinc_minus_fbank_per" in doc
    )
    record(8, ok, f"PER sinc {pers.get('sinc', float('nan')):.2f}%, fbank {pers.get('fbank', float('nan')):.2f}%, "
                  f"{elapsed:.0f}s")
    assert ok


def test_criterion_10_determinism(oracle_runs, pipeline_runs):
    (o1, o2), _ = oracle_runs
    (p1, _, _), (p2, _, _) = pipeline_runs
    a, b = dir_bytes(o1), dir_bytes(o2)
    c, d = dir_bytes(p1), dir_bytes(p2)
    differing = sorted({k for k in a.keys() | b.keys() if a.get(k) != b.get(k)}
                       | {k for k in c.keys() | d.keys() if c.get(k) != d.get(k)})
    checkpoints = [k for k in c if k.endswith("model.bin")]
    ok = not differing and len(checkpoints) == 2
    record(10, ok, f"{len(a) + len(c)} files compared ({len(checkpoints)} checkpoints), {len(differing)} differ")
    assert ok, differing[:10]


# 7 --------------------------------------------------------------------------

def reference_distance(a, b):
    """Plain bottom-up Levenshtein table."""
    prev = list(range(len(b) + 1))
    for i in range(1, len(a) + 1):
        cur = [i] + [0] * len(b)
        for j in range(1, len(b) + 1):
            cur[j] = min(prev[j - 1] + (a[i - 1] != b[j - 1]), prev[j] + 1, cur[j - 1] + 1)
        prev = cur
    return prev[-1]


def test_criterion_7_alignment_oracle():
    seqs = [s for n in range(6) for s in itertools.product("abc", repeat=n)]
    bad = 0
    for a in seqs:
        for b in seqs:
            dist, ops = align(a, b)
            r, h = apply_ops(a, b, ops)
            bad += dist != reference_distance(a, b) or r != list(a) or h != list(b)
    ok = bad == 0
    record(7, ok, f"{len(seqs) ** 2} pairs, {bad} disagreements")
    assert ok


# 9 --------------------------------------------------------------------------

def exhaustive_ctc_best(lp, n_phones, max_len):
    best, best_loss = None, math.inf
    for L in range(max_len + 1):
        for y in itertools.product(range(1, n_phones + 1), repeat=L):
            loss = ctc_brute_force(lp, list(y))
            if loss < best_loss:
                best, best_loss = y, loss
    return best


def test_criterion_9_decoding_reductions():
    greedy_bad = 0
    for seed in range(50):
        rng = np.random.default_rng(1000 + seed)
        cfg = tiny_model_config(n_phones=int(rng.integers(2, 6)), seed=seed)
        model = MddModel(cfg, dtype=torch.float64)
        x = tiny_sample(cfg, n_frames=int(rng.integers(6, 25)), seed=seed).inputs[0]
        greedy_bad += joint_beam_decode(model, x, alpha=0.0, beam_width=1).tokens != greedy_attention_decode(model, x)

    ctc_bad = 0
    for seed in range(50):
        rng = np.random.default_rng(2000 + seed)
        n_phones = int(rng.integers(1, 4))
        cfg = tiny_model_config(n_phones=n_phones, seed=seed)
        model = MddModel(cfg, dtype=torch.float64)
        x = tiny_sample(cfg, n_frames=int(rng.integers(3, 13)), target_len=1, seed=seed).inputs[0]
        lp = model.ctc_logprobs(encode_one(model, x), 0)
        assert lp.shape[0] <= 4
        # a beam wider than every prefix of length <= 3 is exhaustive
        got = joint_beam_decode(model, x, alpha=1.0, beam_width=n_phones**3 + 1, max_len=3).tokens
        ctc_bad += got != exhaustive_ctc_best(lp, n_phones, 3)
    ok = greedy_bad == 0 and ctc_bad == 0
    record(9, ok, f"greedy mismatches {greedy_bad}/50, CTC argmax mismatches {ctc_bad}/50")
    assert ok
