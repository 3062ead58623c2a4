import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from geohet._validation import NumericError, ShapeError
from geohet.encoder import (DualAttentionBlock, Encoder, EncoderConfig, count_ops, linear_attention,
                            linear_attention_core, phi, quadratic_attention)


def rand(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


def test_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(eps=0.0)
    with pytest.raises(ValueError):
        EncoderConfig(eps=1e-2)
    with pytest.raises(ValueError):
        EncoderConfig(d_model=7)
    assert EncoderConfig(d_model=6).ffn_hidden == 12


# -- linear attention

def test_single_token_returns_value():
    q, k, v = rand(1, 4, seed=1), rand(1, 4, seed=2), rand(1, 3, seed=3)
    out = linear_attention_core(q, k, v, eps=1e-300)
    assert torch.allclose(out, v, atol=1e-15, rtol=0)
    assert torch.allclose(linear_attention_core(q, k, v, eps=1e-6), v, rtol=1e-5)


@pytest.mark.parametrize("seed", range(20))
def test_linear_matches_quadratic_oracle(seed):
    q, k, v = rand(8, 16, seed=seed), rand(8, 16, seed=seed + 100), rand(8, 16, seed=seed + 200)
    diff = (linear_attention_core(q, k, v, 1e-6) - quadratic_attention(q, k, v, 1e-6)).abs().max()
    assert diff <= 1e-10


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 32), st.integers(1, 8), st.integers(0, 10_000))
def test_linear_matches_oracle_any_n(n, d, seed):
    q, k, v = rand(n, d, seed=seed), rand(n, d, seed=seed + 1), rand(n, d, seed=seed + 2)
    assert (linear_attention_core(q, k, v, 1e-6) - quadratic_attention(q, k, v, 1e-6)).abs().max() <= 1e-10


@settings(max_examples=50, deadline=None)
@given(st.floats(-700, 700))
def test_phi_positive(x):
    assert phi(torch.tensor([x], dtype=torch.float64)).item() > 0


def test_non_finite_fails_fast():
    q = rand(4, 3)
    k = rand(4, 3)
    v = rand(4, 3)
    v[2, 1] = float("nan")
    with pytest.raises(NumericError):
        linear_attention_core(q, k, v, 1e-6)


def test_feature_axis_treats_channels_as_tokens():
    x = rand(5, 6)
    w = [rand(6, 6, seed=s) for s in (1, 2, 3)]
    q, k, v = (x @ m for m in w)
    expected = quadratic_attention(q.T, k.T, v.T, 1e-6).T
    assert torch.allclose(linear_attention(x, *w, axis="feature"), expected, atol=1e-12)
    with pytest.raises(ValueError):
        linear_attention(x, *w, axis="diagonal")


def test_op_count_linear_in_token_count():
    d = 16
    w = [rand(d, d, seed=s) for s in (1, 2, 3)]
    with count_ops() as c8:
        linear_attention(rand(8, d), *w, axis="temporal")
    with count_ops() as c16:
        linear_attention(rand(16, d), *w, axis="temporal")
    assert c16["linear_attention_macs"] == 2 * c8["linear_attention_macs"]
    # feature axis: tokens are the d channels, so doubling d_model doubles the cost
    w2 = [rand(2 * d, 2 * d, seed=s) for s in (1, 2, 3)]
    with count_ops() as f1:
        linear_attention(rand(8, d), *w, axis="feature")
    with count_ops() as f2:
        linear_attention(rand(8, 2 * d), *w2, axis="feature")
    assert f2["linear_attention_macs"] == 2 * f1["linear_attention_macs"]


def test_block_op_count_growth_in_window_length():
    # the feature pass works on length-L channel tokens, so its share grows as L^2
    block = DualAttentionBlock(32, 64)
    with count_ops() as c8:
        block(rand(1, 8, 32))
    with count_ops() as c16:
        block(rand(1, 16, 32))
    assert c8["calls"] == c16["calls"] == 2
    ratio = c16["linear_attention_macs"] / c8["linear_attention_macs"]
    assert 2.0 < ratio < 2.5


# -- dual-attention block

def test_zero_block_is_identity():
    block = DualAttentionBlock(8, 16)
    with torch.no_grad():
        for p in block.parameters():
            p.zero_()
    x = rand(3, 5, 8)
    assert torch.equal(block(x), x)


@pytest.mark.parametrize("L,d", [(1, 2), (4, 8), (9, 6)])
def test_block_shape(L, d):
    assert DualAttentionBlock(d, 2 * d)(rand(2, L, d)).shape == (2, L, d)


def test_block_gradcheck():
    block = DualAttentionBlock(8, 16, generator=torch.Generator().manual_seed(0))
    x = rand(4, 8)
    params = tuple(block.parameters())
    names = [n for n, _ in block.named_parameters()]

    def f(*ps):
        return torch.func.functional_call(block, dict(zip(names, ps)), (x,))

    assert torch.autograd.gradcheck(f, params, eps=1e-6, atol=1e-7, rtol=1e-4)


# -- encoder

def test_embed_zero_features():
    enc = Encoder(EncoderConfig(L=4, D=3, d_model=8, n_blocks=1))
    assert torch.equal(enc.embed_input(torch.zeros(2, 4, 3, dtype=torch.float64)), torch.zeros(2, 4, 8,
                                                                                               dtype=torch.float64))


def test_embed_single_step_no_rotation():
    enc = Encoder(EncoderConfig(L=1, D=3, d_model=4, n_blocks=0))
    x = rand(2, 1, 3)
    assert torch.allclose(enc.embed_input(x), x @ enc.w_embed, atol=0)


def test_embed_identity_weights():
    enc = Encoder(EncoderConfig(L=3, D=4, d_model=4, n_blocks=0))
    with torch.no_grad():
        enc.w_embed.copy_(torch.eye(4))
    x = rand(3, 4)
    assert torch.equal(enc.embed_input(x)[0], x[0])


def test_embed_shape_error():
    enc = Encoder(EncoderConfig(L=4, D=3, d_model=8))
    with pytest.raises(ShapeError):
        enc.embed_input(torch.zeros(4, 2, dtype=torch.float64))


def test_no_blocks_is_embedding():
    enc = Encoder(EncoderConfig(L=4, D=3, d_model=8, n_blocks=0))
    x = rand(2, 4, 3)
    assert torch.equal(enc(x), enc.embed_input(x))


def test_location_invariance_bitwise(toy):
    model, ds, _ = toy
    x = torch.tensor(ds.features[:6])
    a = model.encoder(x)
    b = model.encoder(x.clone())  # coordinates never reach the encoder
    assert torch.equal(a, b)
    # identical windows in different batch slots give identical tokens
    twin = torch.stack([x[0], x[0]])
    out = model.encoder(twin)
    assert torch.equal(out[0], out[1])


def test_all_encoder_params_receive_gradient():
    enc = Encoder(EncoderConfig(L=5, D=3, d_model=8, n_blocks=2), torch.Generator().manual_seed(1))
    enc(rand(6, 5, 3)).pow(2).sum().backward()
    for name, p in enc.named_parameters():
        assert p.grad is not None and p.grad.abs().max() > 0, name
