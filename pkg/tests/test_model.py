from __future__ import annotations

import math

import numpy as np
import pytest

from asrlab.errors import ConfigError, DataError
from asrlab.features import FeatureConfig
from asrlab.model import (
    ModelCheckpoint,
    ModelConfig,
    Vocab,
    count_parameters,
    encode,
    greedy_decode,
    init_checkpoint,
    joint,
    load_checkpoint,
    lstm_forward,
    predict,
    save_checkpoint,
)

from .oracles import scalar_lstm_steps


def tiny_checkpoint(seed=0, layers=2, hidden=3, joint_hidden=4, stack=1, mel=5) -> ModelCheckpoint:
    cfg = ModelConfig(encoder_layers=layers, hidden=hidden, joint_hidden=joint_hidden,
                      stack_factor=stack, mel_bins=mel)
    return init_checkpoint(cfg, Vocab.graphemes(), FeatureConfig(), seed=seed)


def test_vocab_blank_first_and_roundtrip():
    v = Vocab.graphemes()
    assert v.symbols[0] == "" and len(v) == 29
    text = "the quick brown fox's"
    assert v.decode(v.encode(text)) == text
    with pytest.raises(DataError):
        v.encode("Uppercase")


def test_zero_weights_zero_input_gives_zero_activations():
    ckpt = tiny_checkpoint()
    for group in ckpt.params.values():
        for name in group:
            group[name] = np.zeros_like(group[name])
    x = np.zeros((4, ckpt.config.input_dim))
    assert np.all(encode(x, ckpt) == 0.0)


def test_encode_shape_law():
    ckpt = tiny_checkpoint(hidden=16, mel=4, stack=2)
    out = encode(np.random.default_rng(0).normal(size=(5, 8)), ckpt)
    assert out.shape == (5, 16)


def test_encode_rejects_width_mismatch():
    ckpt = tiny_checkpoint()
    with pytest.raises(DataError):
        encode(np.zeros((3, ckpt.config.input_dim + 1)), ckpt)


def test_lstm_matches_scalar_oracle():
    wx = np.array([[0.3, -0.2, 0.5, 0.1]])
    wh = np.array([[-0.4, 0.25, 0.2, -0.1]])
    b = np.array([0.05, -0.02, 0.1, 0.0])
    xs = [0.7, -1.2]
    h, _ = lstm_forward(np.array(xs).reshape(1, 2, 1), {"wx": wx, "wh": wh, "b": b})
    want = scalar_lstm_steps(xs, wx[0], wh[0], b)
    assert h[0, :, 0] == pytest.approx(want, abs=1e-12)


def test_predict_start_row_and_purity():
    ckpt = tiny_checkpoint()
    p0 = predict([], ckpt)
    assert p0.shape == (1, ckpt.config.hidden)
    labels = [3, 1, 7]
    a = predict(labels, ckpt)
    b = predict(labels, ckpt)
    assert a.shape == (4, ckpt.config.hidden)
    assert np.array_equal(a, b)
    # Row 0 ignores the labels (tolerance: BLAS kernels differ by shape).
    assert a[0] == pytest.approx(p0[0], abs=1e-12)
    with pytest.raises(DataError):
        predict([0, 2], ckpt)  # blank not a valid history label


def test_predict_single_step_matches_scalar_oracle():
    vocab = Vocab(symbols=("", "a"))
    cfg = ModelConfig(encoder_layers=2, hidden=1, joint_hidden=1, stack_factor=1, mel_bins=1)
    ckpt = init_checkpoint(cfg, vocab, FeatureConfig(), seed=1)
    dec = ckpt.params["dec"]
    dec["embed"] = np.array([[0.9], [-0.3]])
    dec["wx"] = np.array([[0.2, -0.1, 0.4, 0.3]])
    dec["wh"] = np.array([[0.1, 0.2, -0.2, 0.05]])
    dec["b"] = np.array([0.0, 0.1, -0.05, 0.2])
    out = predict([1], ckpt)
    want = scalar_lstm_steps([0.9, -0.3], dec["wx"][0], dec["wh"][0], dec["b"])
    assert out[:, 0] == pytest.approx(want, abs=1e-12)


def test_joint_uniform_under_zero_weights():
    ckpt = tiny_checkpoint()
    for name in ckpt.params["joint"]:
        ckpt.params["joint"][name] = np.zeros_like(ckpt.params["joint"][name])
    enc = np.random.default_rng(0).normal(size=(3, ckpt.config.hidden))
    pred = np.random.default_rng(1).normal(size=(2, ckpt.config.hidden))
    _, log_probs = joint(enc, pred, ckpt)
    assert log_probs == pytest.approx(np.full((3, 2, 29), -math.log(29)), abs=1e-12)


def test_joint_log_softmax_normalized():
    ckpt = tiny_checkpoint(seed=5)
    rng = np.random.default_rng(2)
    enc = rng.normal(size=(4, ckpt.config.hidden))
    pred = rng.normal(size=(3, ckpt.config.hidden))
    logits, log_probs = joint(enc, pred, ckpt)
    assert logits.shape == (4, 3, 29)
    lse = np.log(np.exp(log_probs).sum(axis=-1))
    assert np.max(np.abs(lse)) <= 1e-6


def test_joint_hand_computed_1x1x2():
    vocab = Vocab(symbols=("", "a"))
    cfg = ModelConfig(encoder_layers=2, hidden=1, joint_hidden=1, stack_factor=1, mel_bins=1)
    ckpt = init_checkpoint(cfg, vocab, FeatureConfig(), seed=0)
    jp = ckpt.params["joint"]
    jp["proj_w"] = np.array([[0.7], [-0.4]])
    jp["proj_b"] = np.array([0.1])
    jp["out_w"] = np.array([[0.5, -0.25]])
    jp["out_b"] = np.array([0.02, -0.03])
    e, p = 0.6, -0.8
    logits, log_probs = joint(np.array([[e]]), np.array([[p]]), ckpt)
    a = math.tanh(0.7 * e + (-0.4) * p + 0.1)
    want = np.array([0.5 * a + 0.02, -0.25 * a - 0.03])
    assert logits[0, 0] == pytest.approx(want, abs=1e-12)
    lse = math.log(math.exp(want[0]) + math.exp(want[1]))
    assert log_probs[0, 0] == pytest.approx(want - lse, abs=1e-12)


def test_greedy_decode_blank_bias_gives_empty():
    ckpt = tiny_checkpoint()
    ckpt.params["joint"]["out_b"] = np.zeros(29)
    ckpt.params["joint"]["out_b"][0] = 50.0
    out = greedy_decode(ckpt, np.zeros((6, ckpt.config.input_dim)))
    assert out == ""


def test_greedy_decode_guards_and_termination():
    ckpt = tiny_checkpoint()
    with pytest.raises(ConfigError):
        greedy_decode(ckpt, np.zeros((3, ckpt.config.input_dim)), max_symbols_per_frame=0)
    # Bias a non-blank symbol so every frame emits to the cap.
    ckpt.params["joint"]["out_b"] = np.zeros(29)
    ckpt.params["joint"]["out_b"][5] = 50.0
    out = greedy_decode(ckpt, np.zeros((3, ckpt.config.input_dim)), max_symbols_per_frame=4)
    assert len(out) == 3 * 4


def test_parameter_count_matches_analytic_formula():
    cfg = ModelConfig()
    ckpt = init_checkpoint(cfg, Vocab.graphemes(), FeatureConfig(), seed=0)
    l, h, hj, v, d = cfg.encoder_layers, cfg.hidden, cfg.joint_hidden, 29, cfg.input_dim
    want = (
        4 * h * (d + h + 1)
        + (l - 1) * 4 * h * (2 * h + 1)
        + v * h + 4 * h * (2 * h + 1)
        + 2 * h * hj + hj + hj * v + v
    )
    assert count_parameters(ckpt.params) == want == 189149


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    ckpt = tiny_checkpoint(seed=9)
    ckpt.step = 1234
    p1 = tmp_path / "a.rntc"
    p2 = tmp_path / "b.rntc"
    save_checkpoint(ckpt, p1)
    loaded = load_checkpoint(p1)
    save_checkpoint(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert loaded.step == 1234
    assert loaded.vocab == ckpt.vocab
    assert loaded.config == ckpt.config
    for group in ckpt.params:
        for name in ckpt.params[group]:
            assert np.array_equal(
                loaded.params[group][name],
                ckpt.params[group][name].astype(np.float32).astype(np.float64),
            )
