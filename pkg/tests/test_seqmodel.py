import numpy as np
import pytest
import torch

from sincmdd.seqmodel import (
    MddModel,
    ModelConfig,
    ParamFileError,
    PhoneVocab,
    VocabError,
    load_params,
    output_length,
    read_param_file,
    save_params,
    write_param_file,
)
from sincmdd.train import tiny_model_config, tiny_sample


def test_vocab_layout():
    v = PhoneVocab(("aa", "iy", "uw"))
    assert (v.BLANK, v.eos, v.sos) == (0, 4, 5)
    assert v.encode(["iy", "aa"]) == [2, 1]
    assert v.decode([3]) == ["uw"]
    assert v.dec_index(v.eos) == v.dec_size - 1
    with pytest.raises(VocabError):
        v.encode(["xx"])
    with pytest.raises(VocabError):
        v.decode([0])
    with pytest.raises(VocabError):
        v.check_target([v.eos])
    with pytest.raises(VocabError):
        PhoneVocab(("aa", "aa"))
    with pytest.raises(VocabError):
        PhoneVocab(("<eos>",))


def test_output_length_is_ceil():
    assert [output_length(t, 3) for t in (1, 3, 4, 12)] == [1, 1, 2, 4]
    assert output_length(torch.tensor([5, 6]), 2).tolist() == [3, 3]


@pytest.fixture
def tiny():
    cfg = tiny_model_config(seed=0)
    return MddModel(cfg, dtype=torch.float64), tiny_sample(cfg, seed=0)


def test_encoder_shapes(tiny):
    model, batch = tiny
    enc = model.encode(batch.inputs, batch.lengths)
    assert enc.H.shape == (1, 4, model.cfg.enc_dim)
    assert enc.ctc_logits.shape == (1, 4, model.vocab.ctc_size)
    lp = model.ctc_logprobs(enc, 0)
    np.testing.assert_allclose(np.exp(lp).sum(1), 1.0)


def test_attention_weights_are_distributions(tiny):
    model, batch = tiny
    enc = model.encode(batch.inputs, batch.lengths)
    state, weights, context = model.initial_decoder(enc)
    torch.testing.assert_close(weights.sum(1), torch.ones(1, dtype=torch.float64))
    torch.testing.assert_close(context, enc.H.mean(1))
    state, logp = model.decode_step(state, torch.tensor([model.vocab.sos]), context)
    assert logp.shape == (1, model.vocab.dec_size)
    att = model.attend(state, enc, weights)
    assert torch.all(att.weights >= 0)
    torch.testing.assert_close(att.weights.sum(1), torch.ones(1, dtype=torch.float64))


def test_attention_ignores_padding():
    cfg = tiny_model_config(seed=1)
    model = MddModel(cfg, dtype=torch.float64)
    long = tiny_sample(cfg, n_frames=12, seed=1)
    short_wave = long.inputs[:, : long.inputs.shape[1] - 6 * 20]
    batch_inputs = long.inputs.clone()
    batch_inputs[:, short_wave.shape[1] :] = 0
    lengths = torch.tensor([short_wave.shape[1]])
    enc = model.encode(torch.cat([batch_inputs, long.inputs]), torch.tensor([short_wave.shape[1], long.inputs.shape[1]]))
    _, weights, _ = model.initial_decoder(enc)
    s_short = int(enc.lengths[0])
    assert s_short < enc.H.shape[1]
    assert torch.all(weights[0, s_short:] == 0)
    alone = model.encode(short_wave, lengths)
    torch.testing.assert_close(enc.H[0, :s_short], alone.H[0])


def test_decode_step_rejects_blank_and_eos(tiny):
    model, batch = tiny
    enc = model.encode(batch.inputs, batch.lengths)
    state, _, context = model.initial_decoder(enc)
    for bad in (0, model.vocab.eos):
        with pytest.raises(VocabError):
            model.decode_step(state, torch.tensor([bad]), context)


def test_attention_mismatch_raises(tiny):
    model, batch = tiny
    enc = model.encode(batch.inputs, batch.lengths)
    state, weights, _ = model.initial_decoder(enc)
    with pytest.raises(ValueError):
        model.attend(state, enc, weights[:, :2])


def test_attention_nll_sums_steps(tiny):
    model, batch = tiny
    enc = model.encode(batch.inputs, batch.lengths)
    steps = model.attention_step_logprobs(enc, batch.targets)
    assert steps.shape == (1, len(batch.targets[0]) + 1)
    torch.testing.assert_close(model.attention_nll(enc, batch.targets), -steps.sum(1))


def test_param_file_round_trip(tmp_path):
    cfg = tiny_model_config(seed=2)
    a = MddModel(cfg)
    save_params(a, tmp_path / "m.bin", {"epoch": 3.0})
    b = MddModel(tiny_model_config(seed=9))
    assert load_params(b, tmp_path / "m.bin") == {"epoch": 3.0}
    for (name, x), (_, y) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(x, y), name


def test_param_file_errors(tmp_path):
    (tmp_path / "junk.bin").write_bytes(b"nope")
    with pytest.raises(ParamFileError):
        read_param_file(tmp_path / "junk.bin")
    write_param_file(tmp_path / "t.bin", {"w": np.ones((2, 3))})
    data = (tmp_path / "t.bin").read_bytes()
    (tmp_path / "cut.bin").write_bytes(data[:-8])
    with pytest.raises(ParamFileError):
        read_param_file(tmp_path / "cut.bin")
    with pytest.raises(ParamFileError):
        load_params(MddModel(tiny_model_config()), tmp_path / "t.bin")


def test_param_file_layout(tmp_path):
    write_param_file(tmp_path / "t.bin", {"w": np.arange(2.0)}, {"s": 1.5})
    data = (tmp_path / "t.bin").read_bytes()
    assert data[:8] == b"SINCMDD\x00"
    assert int.from_bytes(data[8:12], "little") == 1
    tensors, scalars = read_param_file(tmp_path / "t.bin")
    assert scalars == {"s": 1.5}
    np.testing.assert_array_equal(tensors["w"], [0.0, 1.0])


def test_model_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(("a",), frontend="mfcc")
    with pytest.raises(ValueError):
        ModelConfig(("a",), att_conv_width=4)


def test_fbank_model_runs():
    cfg = ModelConfig(("a", "b"), frontend="fbank", fbank_dim=5, enc_hidden=3, att_dim=4, dec_hidden=4, emb_dim=2)
    model = MddModel(cfg, dtype=torch.float64)
    x = torch.randn(2, 9, 5, dtype=torch.float64)
    enc = model.encode(x, torch.tensor([9, 6]))
    assert enc.lengths.tolist() == [5, 3]
