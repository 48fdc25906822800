import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dysarthria_fewshot.errors import BackwardWithoutForward, InvalidConfig, ShapeMismatch
from dysarthria_fewshot.model import (
    EncoderConfig,
    as_batch,
    backward,
    count_parameters,
    count_trainable,
    expected_parameter_count,
    forward,
    freeze_all,
    init_encoder,
)
from dysarthria_fewshot.train import cross_entropy

from gradcheck import check, randomize, sample_indices
from reference_model import encoder_logits

TOY = EncoderConfig(n_mels=6, max_frames=8, d_model=8, n_heads=2, n_layers=2, d_mlp=16, seed=3)


def _params64(model):
    return {n: p.detach().double().numpy() for n, p in model.named_parameters()}


def test_default_config_matches_whisper_layout():
    cfg = EncoderConfig()
    assert (cfg.n_mels, cfg.max_frames, cfg.d_mlp, cfg.n_positions) == (80, 3000, 256, 1500)


@pytest.mark.parametrize(
    "kwargs",
    [dict(d_model=10, n_heads=4), dict(max_frames=7), dict(n_classes=1), dict(d_model=2, n_heads=1), dict(dropout=1.0)],
)
def test_invalid_configs(kwargs):
    with pytest.raises(InvalidConfig):
        EncoderConfig(**kwargs)


def test_config_roundtrip():
    assert EncoderConfig.from_dict(TOY.to_dict()) == TOY


@pytest.mark.parametrize("cfg", [TOY, EncoderConfig(), EncoderConfig(n_classes=5, n_layers=0, d_model=16, n_heads=4)])
def test_parameter_count_closed_form(cfg):
    model = init_encoder(cfg)
    assert count_parameters(model) == expected_parameter_count(cfg)
    assert count_trainable(model) == count_parameters(model)


def test_init_deterministic_and_seed_sensitive():
    a, b = init_encoder(TOY), init_encoder(TOY)
    for (n, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(p, q), n
    c = init_encoder(EncoderConfig(**{**TOY.to_dict(), "seed": 4}))
    assert not torch.equal(a.conv1.weight, c.conv1.weight)


def test_init_statistics():
    model = init_encoder(EncoderConfig(d_model=64, n_layers=2))
    w = torch.cat([model.conv1.weight.flatten(), model.blocks[0].mlp[0].weight.flatten()]).detach()
    assert abs(float(w.std()) - 0.02) < 0.001
    assert float(model.blocks[0].attn.query.bias.detach().abs().max()) == 0.0
    assert torch.equal(model.ln_post.weight, torch.ones(64))
    assert float(model.head.weight.detach().abs().max()) == 0.0


def test_zero_head_gives_zero_logits():
    model = init_encoder(EncoderConfig(n_mels=6, max_frames=8, d_model=8, n_heads=2))
    x = torch.randn(3, 6, 8) * 5
    logits = forward(model, x)
    assert logits.shape == (3, 2)
    assert float(logits.detach().abs().max()) == 0.0


@given(
    d_heads=st.sampled_from([(4, 1), (8, 2), (12, 3), (16, 4)]),
    n_layers=st.integers(0, 2),
    half_frames=st.integers(1, 6),
    n_classes=st.integers(2, 5),
    batch=st.integers(1, 3),
)
@settings(max_examples=25, deadline=None)
def test_shape_law(d_heads, n_layers, half_frames, n_classes, batch):
    d, h = d_heads
    cfg = EncoderConfig(n_mels=5, max_frames=2 * half_frames, d_model=d, n_heads=h, n_layers=n_layers, n_classes=n_classes)
    model = init_encoder(cfg)
    x = torch.randn(batch, 5, 2 * half_frames)
    with torch.no_grad():
        assert model.encode(x).shape == (batch, half_frames, d)
        assert forward(model, x).shape == (batch, n_classes)


def test_wrong_input_shape_rejected():
    model = init_encoder(TOY)
    with pytest.raises(ShapeMismatch):
        forward(model, np.zeros((6, 10), dtype=np.float32))
    with pytest.raises(ShapeMismatch):
        forward(model, np.zeros((1, 5, 8), dtype=np.float32))


def test_single_matrix_gets_batch_of_one():
    model = init_encoder(TOY)
    assert as_batch(np.zeros((6, 8), dtype=np.float32), model).shape == (1, 6, 8)


def test_forward_matches_numpy_oracle():
    cfg = EncoderConfig(n_mels=5, max_frames=8, d_model=8, n_heads=1, n_layers=1, d_mlp=12, seed=1)
    model = randomize(init_encoder(cfg), seed=2)
    mel = np.random.default_rng(0).uniform(-1.5, 1.0, size=(5, 8)).astype(np.float32)
    got = forward(model, mel).detach().numpy()[0]
    want = encoder_logits(_params64(model), mel.astype(np.float64), 1, 1)
    np.testing.assert_allclose(got, want, atol=1e-5)


def test_forward_matches_numpy_oracle_multihead_two_blocks():
    model = randomize(init_encoder(TOY), seed=5)
    mel = np.random.default_rng(1).uniform(-1.5, 1.0, size=(6, 8))
    got = forward(model.double(), mel).detach().numpy()[0]
    want = encoder_logits(_params64(model), mel, TOY.n_layers, TOY.n_heads)
    np.testing.assert_allclose(got, want, atol=1e-10)


def test_mean_pool_permutation_invariant():
    hidden = torch.randn(2, 7, 8)
    perm = torch.randperm(7)
    torch.testing.assert_close(init_encoder(TOY).pool(hidden[:, perm]), init_encoder(TOY).pool(hidden))


def test_eval_forward_deterministic_despite_dropout():
    model = randomize(init_encoder(EncoderConfig(**{**TOY.to_dict(), "dropout": 0.5})), seed=1)
    x = torch.randn(2, 6, 8)
    a, b = forward(model, x, "eval"), forward(model, x, "eval")
    assert torch.equal(a, b)
    torch.manual_seed(0)
    assert not torch.equal(forward(model, x, "train"), a)


def test_backward_without_forward():
    model = init_encoder(TOY)
    with pytest.raises(BackwardWithoutForward):
        backward(model, torch.zeros(1, 2))
    logits = forward(model, torch.randn(1, 6, 8))
    backward(model, torch.ones_like(logits))
    with pytest.raises(BackwardWithoutForward):
        backward(model, torch.ones_like(logits))


def test_backward_gradient_shape_checked():
    model = init_encoder(TOY)
    forward(model, torch.randn(2, 6, 8))
    with pytest.raises(ShapeMismatch):
        backward(model, torch.zeros(3, 2))


def test_no_record_under_no_grad():
    model = init_encoder(TOY)
    with torch.no_grad():
        forward(model, torch.randn(1, 6, 8))
    with pytest.raises(BackwardWithoutForward):
        backward(model, torch.zeros(1, 2))


def test_zero_head_blocks_deep_gradients():
    model = init_encoder(TOY)
    x = torch.randn(4, 6, 8)
    grads = backward(model, cross_entropy(forward(model, x, "train"), [0, 1, 1, 0]).grad)
    for name, g in grads.items():
        if name.startswith("head."):
            continue
        assert float(g.detach().abs().max()) == 0.0, name
    assert float(grads["head.weight"].detach().abs().max()) > 0


def test_backward_returns_only_trainable():
    model = init_encoder(TOY)
    freeze_all(model)
    model.head.weight.requires_grad_(True)
    assert count_trainable(model) == TOY.d_model * TOY.n_classes
    logits = forward(model, torch.randn(1, 6, 8))
    assert set(backward(model, torch.ones_like(logits))) == {"head.weight"}


def test_all_gradients_finite():
    model = randomize(init_encoder(TOY), seed=9)
    logits = forward(model, torch.randn(3, 6, 8) * 3)
    for g in backward(model, cross_entropy(logits, [0, 1, 0]).grad).values():
        assert torch.isfinite(g).all()


GROUPS = {
    "conv_stem": ["conv1.", "conv2."],
    "attention": [".attn.query.", ".attn.key.", ".attn.value.", ".attn.out."],
    "mlp": [".mlp."],
    "norm": ["_ln.", "ln_post."],
    "head": ["head."],
}


def test_finite_difference_gradients():
    model = randomize(init_encoder(TOY), seed=11).double()
    x = torch.from_numpy(np.random.default_rng(2).uniform(-1.5, 1.0, size=(3, 6, 8)))
    rows = check(model, x, [0, 1, 1], sample_indices(model, GROUPS, per_group=12, seed=4))
    assert len(rows) >= 50
    worst = max(rows, key=lambda r: r[-1])
    assert worst[-1] < 1e-3, worst
