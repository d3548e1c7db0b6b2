import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from proofkit import autograd as ag
from proofkit.autograd import ConfigError, Tensor
from proofkit.encoder import (
    ContextVectors, EncoderConfig, InputError, attention_weights, cnn_ngram_features,
    encode_batch, encode_sequence, encoder_block, init_encoder, pad_batch, scaled_dot_attention,
)

from oracles import fd_grad, rel_err


def tiny(**kw):
    base = dict(vocab_size=12, kernel_sizes=[1, 2, 3], filters_per_kernel=3, d_model=8,
                n_layers=1, n_heads=2, d_k=4, d_ff=10, max_len=10)
    base.update(kw)
    return EncoderConfig(**base)


def params_for(cfg, seed=0):
    return init_encoder(cfg, np.random.default_rng(seed))


# config

@pytest.mark.parametrize("kw", [dict(n_heads=3), dict(d_model=0, d_k=0), dict(kernel_sizes=[]),
                                dict(kernel_sizes=[0]), dict(max_len=0)])
def test_config_errors(kw):
    with pytest.raises(ConfigError):
        tiny(**kw)


# n-gram features

def test_cnn_shape():
    cfg = tiny()
    p = params_for(cfg)
    emb = Tensor(np.random.default_rng(1).normal(size=(7, 8)))
    assert cnn_ngram_features(emb, cfg, p).shape == (7, 8)


def test_cnn_kernel_one_is_local():
    cfg = tiny(kernel_sizes=[1], filters_per_kernel=8)
    p = params_for(cfg)
    p["cnn.proj.w"] = Tensor(np.eye(8), requires_grad=True)
    emb = np.random.default_rng(2).normal(size=(6, 8))
    base = cnn_ngram_features(Tensor(emb), cfg, p).data
    emb2 = emb.copy()
    emb2[3] += 5.0
    moved = cnn_ngram_features(Tensor(emb2), cfg, p).data
    np.testing.assert_array_equal(np.delete(base, 3, axis=0), np.delete(moved, 3, axis=0))
    assert not np.allclose(base[3], moved[3])


def test_cnn_kernel_shape_mismatch():
    cfg = tiny()
    p = params_for(cfg)
    p["cnn.k2"] = Tensor(np.zeros((2, 7, 3)))
    with pytest.raises(ConfigError):
        cnn_ngram_features(Tensor(np.zeros((4, 8))), cfg, p)


def test_gradient_reaches_embeddings():
    cfg = tiny()
    p = params_for(cfg)
    out = encode_sequence([4, 5, 6, 7], cfg, p)
    ag.backward(ag.tsum(out.values * out.values))
    assert np.abs(p["emb.tok"].grad).sum() > 0
    assert np.all(p["emb.tok"].grad[8:] == 0)


# attention

def test_attention_hand_case():
    Q = Tensor(np.array([[1.0]]))
    K = Tensor(np.array([[1.0], [0.0]]))
    V = Tensor(np.eye(2))
    e = math.e
    np.testing.assert_allclose(scaled_dot_attention(Q, K, V).data, [[e / (e + 1), 1 / (e + 1)]], rtol=1e-12)


def test_attention_equal_keys_mean():
    rng = np.random.default_rng(3)
    K = Tensor(np.tile(rng.normal(size=(1, 4)), (5, 1)))
    V = Tensor(rng.normal(size=(5, 3)))
    out = scaled_dot_attention(Tensor(rng.normal(size=(2, 4))), K, V)
    np.testing.assert_allclose(out.data, np.tile(V.data.mean(0), (2, 1)), atol=1e-12)


def test_attention_single_unmasked_key():
    rng = np.random.default_rng(4)
    V = rng.normal(size=(4, 3))
    mask = np.array([True, False, True, True])
    out = scaled_dot_attention(Tensor(rng.normal(size=(2, 5))), Tensor(rng.normal(size=(4, 5))),
                               Tensor(V), mask)
    np.testing.assert_allclose(out.data, np.tile(V[1], (2, 1)), atol=1e-12)


def test_attention_fully_masked_rejected():
    with pytest.raises(ValueError):
        attention_weights(Tensor(np.ones((1, 2))), Tensor(np.ones((3, 2))), np.ones(3, dtype=bool))


def test_attention_width_mismatch():
    with pytest.raises(ag.ShapeError):
        attention_weights(Tensor(np.ones((1, 2))), Tensor(np.ones((3, 4))))


@given(st.integers(0, 10_000), st.integers(1, 6))
def test_attention_rows_sum_to_one(seed, n_keys):
    rng = np.random.default_rng(seed)
    mask = rng.random(n_keys) < 0.5
    mask[rng.integers(n_keys)] = False
    w = attention_weights(Tensor(rng.normal(size=(3, 4)) * 5), Tensor(rng.normal(size=(n_keys, 4)) * 5), mask).data
    np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-9)
    assert np.all(w[:, mask] < 1e-6)


# blocks

def test_block_shape_and_norm():
    cfg = tiny()
    p = params_for(cfg)
    x = ContextVectors(Tensor(np.random.default_rng(5).normal(size=(6, 8))), np.zeros(6, dtype=bool))
    out = encoder_block(x, p, 0, cfg)
    assert out.values.shape == (6, 8)
    # gain 1, shift 0 at init so the output is the raw normalised row
    np.testing.assert_allclose(out.values.data.mean(-1), 0.0, atol=1e-6)
    np.testing.assert_allclose(out.values.data.var(-1), 1.0, atol=1e-6)


def test_block_identity_with_zero_projections():
    cfg = tiny()
    p = params_for(cfg)
    for name in ("wo", "bo", "ff2.w", "ff2.b"):
        p["enc0." + name] = Tensor(np.zeros_like(p["enc0." + name].data))
    x = np.random.default_rng(6).normal(size=(5, 8))
    x = (x - x.mean(-1, keepdims=True)) / x.std(-1, keepdims=True)  # already normalised rows
    out = encoder_block(ContextVectors(Tensor(x), np.zeros(5, dtype=bool)), p, 0, cfg)
    np.testing.assert_allclose(out.values.data, x, atol=1e-7)


# full encoder

@pytest.mark.parametrize("L", [1, 2, 5, 10])
def test_encode_shape(L):
    cfg = tiny()
    out = encode_sequence(list(range(4, 4 + L)) if L <= 8 else [5] * L, cfg, params_for(cfg))
    assert out.values.shape == (L, 8)
    assert not out.pad_mask.any()


def test_overlong_input_names_max_len():
    cfg = tiny()
    with pytest.raises(InputError, match="max_len=10"):
        encode_sequence([4] * 11, cfg, params_for(cfg))


def test_bad_ids():
    cfg = tiny()
    with pytest.raises(InputError):
        encode_sequence([99], cfg, params_for(cfg))
    with pytest.raises(InputError):
        encode_sequence([], cfg, params_for(cfg))


def test_permutation_equivariance_kernel_one():
    cfg = tiny(kernel_sizes=[1], n_layers=2)
    p = params_for(cfg)
    p["emb.pos"] = Tensor(np.zeros_like(p["emb.pos"].data))
    ids = np.array([4, 7, 5, 9, 6])
    perm = np.array([3, 0, 4, 1, 2])
    a = encode_sequence(ids, cfg, p).values.data
    b = encode_sequence(ids[perm], cfg, p).values.data
    np.testing.assert_allclose(b, a[perm], atol=1e-10)


def test_pad_ids_do_not_leak():
    cfg = tiny()
    p = params_for(cfg)
    ids, mask = pad_batch([[4, 5, 6], [7, 8, 9, 10, 11]])
    a = encode_batch(ids, mask, cfg, p).values.data
    ids2 = ids.copy()
    ids2[0, 3:] = [11, 3]
    b = encode_batch(ids2, mask, cfg, p).values.data
    np.testing.assert_array_equal(a[0, :3], b[0, :3])


def test_batch_matches_single():
    cfg = tiny()
    p = params_for(cfg)
    seqs = [[4, 5, 6], [7, 8, 9, 10, 11], [6]]
    ids, mask = pad_batch(seqs)
    batched = encode_batch(ids, mask, cfg, p).values.data
    for b, s in enumerate(seqs):
        single = encode_sequence(s, cfg, p).values.data
        np.testing.assert_allclose(batched[b, :len(s)], single, atol=1e-12)


def test_deterministic_bitwise():
    cfg = tiny()
    p = params_for(cfg)
    a = encode_sequence([4, 5, 6, 7], cfg, p).values.data
    b = encode_sequence([4, 5, 6, 7], cfg, p).values.data
    assert a.tobytes() == b.tobytes()


def test_dropout_only_with_rng():
    cfg = tiny()
    p = params_for(cfg)
    ids, mask = pad_batch([[4, 5, 6]])
    clean = encode_batch(ids, mask, cfg, p).values.data
    assert np.array_equal(clean, encode_batch(ids, mask, cfg, p, dropout=0.5).values.data)
    noisy = encode_batch(ids, mask, cfg, p, dropout=0.5, rng=np.random.default_rng(0)).values.data
    assert not np.allclose(clean, noisy)


def test_end_to_end_gradient_check():
    cfg = EncoderConfig(vocab_size=9, kernel_sizes=[1, 2], filters_per_kernel=3, d_model=8,
                        n_layers=1, n_heads=2, d_k=4, d_ff=6, max_len=4)
    p = params_for(cfg, seed=7)
    # with unit gains the summed post-norm output is constant, so randomise them
    rng = np.random.default_rng(8)
    for name in ("enc0.ln1.g", "enc0.ln2.g", "enc0.ln2.b"):
        p[name].data[:] = rng.normal(size=p[name].shape)
    ids = [4, 6, 5, 8]

    def loss_value():
        with ag.no_grad():
            return float(encode_sequence(ids, cfg, p).values.data.sum())

    for t in p.values():
        t.grad = np.zeros_like(t.data)
    ag.backward(ag.tsum(encode_sequence(ids, cfg, p).values))
    for name in ("emb.tok", "emb.pos", "cnn.k2", "cnn.proj.w", "enc0.wq", "enc0.wv", "enc0.ff1.w",
                 "enc0.ln1.g", "enc0.ln2.b"):
        num = fd_grad(loss_value, p[name].data, eps=1e-6)
        assert rel_err(p[name].grad, num) < 1e-4, name
