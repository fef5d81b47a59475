import dataclasses
import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from sincmdd.corpus import Waveform
from sincmdd.ctc import ctc_loss
from sincmdd.seqmodel import MddModel
from sincmdd.train import (
    Checkpoint,
    TrainConfig,
    combine,
    config_from_kv,
    config_to_kv,
    default_model_config,
    evaluate_loss,
    grad_check,
    joint_loss,
    make_batch,
    model_grad_check,
    parameter_grads,
    prepare_samples,
    read_kv,
    tiny_model_config,
    tiny_sample,
    train_loop,
    unflatten_config,
    write_kv,
)


def manual_attention_nll(model, enc, target):
    """Teacher-forced decoder loop written directly against decode_step/attend."""
    V = model.vocab
    state, weights, context = model.initial_decoder(enc)
    total = 0.0
    prev = V.sos
    for tok in list(target) + [V.eos]:
        state, logp = model.decode_step(state, torch.tensor([prev]), context)
        total = total - logp[0, V.dec_index(tok)]
        if tok != V.eos:
            att = model.attend(state, enc, weights)
            weights, context = att.weights, att.context
            prev = tok
    return total


@pytest.fixture
def tiny():
    cfg = tiny_model_config(seed=4)
    return MddModel(cfg, dtype=torch.float64), tiny_sample(cfg, seed=4)


def test_alpha_endpoints_are_exact(tiny):
    model, batch = tiny
    enc = model.encode(batch.inputs, batch.lengths)
    lp = F.log_softmax(enc.ctc_logits[0].detach(), dim=1).numpy()
    ctc = ctc_loss(lp, batch.targets[0]).loss
    att = float(manual_attention_nll(model, enc, batch.targets[0]).detach())
    value = lambda alpha: float(joint_loss(model, batch, alpha).loss.detach())
    assert value(1.0) == ctc
    assert value(0.0) == pytest.approx(att, rel=1e-14)
    assert value(0.0) == float(model.attention_nll(enc, batch.targets)[0].detach())
    assert value(0.5) == pytest.approx(0.5 * (ctc + att), rel=1e-14)


def test_combine_worked_example():
    ctc = torch.tensor([-math.log(0.8)], dtype=torch.float64)
    att = torch.tensor([-math.log(0.5)], dtype=torch.float64)
    assert float(combine(ctc, att, 0.5)) == pytest.approx(0.45815, abs=5e-6)


def test_joint_loss_lies_between_components(tiny):
    model, batch = tiny
    with torch.no_grad():
        res = joint_loss(model, batch, 0.5)
        lo, hi = sorted([float(res.ctc[0]), float(res.att[0])])
        for alpha in np.linspace(0, 1, 7):
            v = float(joint_loss(model, batch, float(alpha)).loss)
            assert lo - 1e-12 <= v <= hi + 1e-12


def test_gradient_is_convex_combination(tiny):
    model, batch = tiny
    g1 = parameter_grads(model, joint_loss(model, batch, 1.0).loss)
    g0 = parameter_grads(model, joint_loss(model, batch, 0.0).loss)
    gh = parameter_grads(model, joint_loss(model, batch, 0.3).loss)
    for name in gh:
        np.testing.assert_allclose(gh[name], 0.3 * g1[name] + 0.7 * g0[name], rtol=1e-9, atol=1e-12)


def test_infeasible_ctc_is_flagged_and_attention_still_trains():
    cfg = tiny_model_config(seed=0)
    model = MddModel(cfg, dtype=torch.float64)
    batch = tiny_sample(cfg, n_frames=3, seed=0)  # S = 1 frame, target of 3 labels
    res = joint_loss(model, batch, 0.5)
    assert res.ctc_feasible == [False]
    assert math.isfinite(res.loss.item())
    assert res.loss.item() == pytest.approx(0.5 * res.att[0].item())
    grads = parameter_grads(model, res.loss)
    assert np.abs(grads["decoder.out.weight"]).max() > 0


def test_alpha_out_of_range(tiny):
    model, batch = tiny
    with pytest.raises(ValueError):
        joint_loss(model, batch, 1.5)
    with pytest.raises(ValueError):
        TrainConfig(alpha=-0.1)
    with pytest.raises(ValueError):
        TrainConfig(lr=0)


def test_full_tiny_model_gradients(tiny):
    model, batch = tiny
    report = model_grad_check(model, batch)
    assert report.worst < 1e-4, report.max_rel_error


def test_grad_check_linear_loss_is_exact():
    lin = torch.nn.Linear(3, 1, dtype=torch.float64)
    x = torch.tensor([[0.3, -1.2, 2.0]], dtype=torch.float64)
    report = grad_check(lin, lambda: lin(x).sum())
    assert report.worst < 1e-9


def test_grad_check_refusals():
    lin = torch.nn.Linear(2, 1, dtype=torch.float64)
    with pytest.raises(ValueError):
        grad_check(lin, lambda: lin.weight.sum(), epsilon=0)
    with pytest.raises(ValueError):
        grad_check(lin, lambda: lin.weight.sum() / 0.0)
    with pytest.raises(ValueError):
        grad_check(torch.nn.Linear(2, 1), lambda: torch.tensor(1.0))


def test_config_kv_round_trip(tmp_path):
    mc = tiny_model_config(seed=3)
    tc = TrainConfig(alpha=0.25, lr=0.1, epochs=2, frontend="sinc")
    write_kv(tmp_path / "c.txt", config_to_kv(mc, tc))
    assert config_from_kv(read_kv(tmp_path / "c.txt")) == (mc, tc)


def test_unknown_config_key_rejected():
    with pytest.raises(KeyError):
        unflatten_config(TrainConfig(), {"train.momentum": "0.9"}, "train.")


def test_zero_length_utterance_rejected(small_corpus):
    u = small_corpus.split("train")[0]
    with pytest.raises(ValueError):
        dataclasses.replace(u, wave=Waveform(np.zeros(0)))
    # a waveform that slipped past construction is still refused before batching
    wave = Waveform(np.ones(4))
    object.__setattr__(wave, "samples", np.zeros(0))
    empty = dataclasses.replace(u, wave=wave)
    with pytest.raises(ValueError):
        prepare_samples([empty], default_model_config(small_corpus.phones, "sinc"))


@pytest.fixture(scope="module")
def trained(small_corpus):
    cfg = TrainConfig(epochs=3, seed=1, frontend="sinc")
    return train_loop(small_corpus, cfg)


def test_training_reduces_loss(trained):
    assert trained.history[3]["train_loss"] < trained.history[0]["train_loss"]


def test_training_is_deterministic(small_corpus, trained):
    again = train_loop(small_corpus, TrainConfig(epochs=3, seed=1, frontend="sinc"))
    losses = lambda ck: [(h["train_loss"], h["dev_loss"]) for h in ck.history]
    assert losses(again) == losses(trained)
    for name in trained.state:
        assert np.array_equal(trained.state[name], again.state[name]), name


def test_checkpoint_round_trip(tmp_path, small_corpus, trained):
    trained.save(tmp_path / "ck")
    loaded = Checkpoint.load(tmp_path / "ck")
    assert loaded.model_cfg == trained.model_cfg and loaded.train_cfg == trained.train_cfg
    assert loaded.epoch == trained.epoch and loaded.best_val == trained.best_val
    for name in trained.state:
        assert np.array_equal(loaded.state[name], trained.state[name]), name
    dev = prepare_samples(small_corpus.split("dev"), trained.model_cfg)
    a = evaluate_loss(trained.build_model(), dev, 0.5, 8)
    b = evaluate_loss(loaded.build_model(), dev, 0.5, 8)
    assert a == b
    assert (tmp_path / "ck" / "history.tsv").read_text().startswith("epoch\ttrain_loss\tdev_loss\n")


def test_make_batch_pads_with_zeros(small_corpus):
    mc = default_model_config(small_corpus.phones, "fbank")
    samples = prepare_samples(small_corpus.split("train")[:3], mc)
    batch = make_batch(samples)
    short = int(batch.lengths.min())
    i = int(batch.lengths.argmin())
    assert torch.all(batch.inputs[i, short:] == 0)
