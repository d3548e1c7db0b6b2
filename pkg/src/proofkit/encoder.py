"""CNN n-gram bank followed by bidirectional transformer encoder blocks.

All functions accept a single sentence ``(L, d)`` or a padded batch
``(B, L, d)``. Padded positions have their embeddings zeroed before the
convolution, so a short sentence inside a batch sees exactly the zero padding
it would see on its own, and they are masked out as attention keys.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import ConfigError, Tensor


class InputError(ValueError):
    """Token sequence does not fit the encoder."""


@dataclass
class EncoderConfig:
    vocab_size: int = 64
    kernel_sizes: list[int] = field(default_factory=lambda: [1, 2, 3, 4, 5])
    filters_per_kernel: int = 16
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_k: int = 16
    d_ff: int = 128
    max_len: int = 64

    def __post_init__(self):
        self.kernel_sizes = [int(k) for k in self.kernel_sizes]
        self.validate()

    def validate(self) -> None:
        dims = [self.vocab_size, self.filters_per_kernel, self.d_model, self.n_heads,
                self.d_k, self.d_ff, self.max_len]
        if any(d <= 0 for d in dims) or self.n_layers < 0:
            raise ConfigError(f"encoder dimensions must be positive: {self}")
        if not self.kernel_sizes or any(k < 1 for k in self.kernel_sizes):
            raise ConfigError(f"kernel sizes must be >= 1: {self.kernel_sizes}")
        if self.n_heads * self.d_k != self.d_model:
            raise ConfigError(f"n_heads * d_k = {self.n_heads * self.d_k} != d_model = {self.d_model}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ContextVectors:
    values: Tensor          # (L, d) or (B, L, d)
    pad_mask: np.ndarray    # (L,) or (B, L); True marks padding

    @property
    def lengths(self) -> np.ndarray:
        return (~self.pad_mask).sum(axis=-1)


def init_encoder(config: EncoderConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    d = config.d_model
    p: dict[str, Tensor] = {}
    p["emb.tok"] = ag.seeded_init((config.vocab_size, d), config.vocab_size, d, rng)
    p["emb.pos"] = ag.seeded_init((config.max_len, d), config.max_len, d, rng)
    f = config.filters_per_kernel
    for k in config.kernel_sizes:
        p[f"cnn.k{k}"] = ag.seeded_init((k, d, f), k * d, f, rng)
    total = f * len(config.kernel_sizes)
    p["cnn.proj.w"] = ag.seeded_init((total, d), total, d, rng)
    p["cnn.proj.b"] = ag.zeros((d,))
    for layer in range(config.n_layers):
        pre = f"enc{layer}."
        for name in ("wq", "wk", "wv", "wo"):
            p[pre + name] = ag.seeded_init((d, d), d, d, rng)
        for name in ("bq", "bk", "bv", "bo"):
            p[pre + name] = ag.zeros((d,))
        p[pre + "ln1.g"] = Tensor(np.ones(d), requires_grad=True)
        p[pre + "ln1.b"] = ag.zeros((d,))
        p[pre + "ff1.w"] = ag.seeded_init((d, config.d_ff), d, config.d_ff, rng)
        p[pre + "ff1.b"] = ag.zeros((config.d_ff,))
        p[pre + "ff2.w"] = ag.seeded_init((config.d_ff, d), config.d_ff, d, rng)
        p[pre + "ff2.b"] = ag.zeros((d,))
        p[pre + "ln2.g"] = Tensor(np.ones(d), requires_grad=True)
        p[pre + "ln2.b"] = ag.zeros((d,))
    return p


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def cnn_ngram_features(embedded: Tensor, config: EncoderConfig, params: dict[str, Tensor]) -> Tensor:
    """Convolve with every kernel width, concatenate, project to ``d_model``, tanh."""
    kernels = []
    for k in config.kernel_sizes:
        w = params[f"cnn.k{k}"]
        if w.shape != (k, embedded.shape[-1], config.filters_per_kernel):
            raise ConfigError(f"kernel k={k} has shape {w.shape}, expected "
                              f"{(k, embedded.shape[-1], config.filters_per_kernel)}")
        kernels.append((k, w))
    maps = ag.conv1d_bank(embedded, kernels)
    return ag.tanh(ag.linear(maps, params["cnn.proj.w"], params["cnn.proj.b"]))


def _key_mask(pad_mask: np.ndarray) -> np.ndarray:
    if np.any(pad_mask.all(axis=-1)):
        raise ValueError("attention needs at least one unmasked key per query set")
    return np.where(pad_mask, ag.MASK_VALUE, 0.0)


def attention_weights(Q: Tensor, K: Tensor, pad_mask: np.ndarray | None = None) -> Tensor:
    """``softmax(Q K^T / sqrt(d_k))`` with padded keys pushed to -1e9."""
    if Q.shape[-1] != K.shape[-1]:
        raise ag.ShapeError(f"query width {Q.shape[-1]} != key width {K.shape[-1]}")
    scores = ag.matmul(Q, ag.swapaxes(K, -1, -2)) * (1.0 / math.sqrt(Q.shape[-1]))
    if pad_mask is not None:
        mask = _key_mask(np.asarray(pad_mask, dtype=bool))
        # broadcast over the query axis (and any head axis)
        mask = mask[..., None, :]
        while mask.ndim < scores.ndim:
            mask = mask[:, None]
        scores = scores + mask
    return ag.softmax(scores, axis=-1)


def scaled_dot_attention(Q: Tensor, K: Tensor, V: Tensor, mask=None) -> Tensor:
    return ag.matmul(attention_weights(Q, K, mask), V)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    *lead, L, d = x.shape
    x = ag.reshape(x, (*lead, L, n_heads, d // n_heads))
    return ag.swapaxes(x, -3, -2)


def _merge_heads(x: Tensor) -> Tensor:
    x = ag.swapaxes(x, -3, -2)
    *lead, L, h, dk = x.shape
    return ag.reshape(x, (*lead, L, h * dk))


def multi_head_attention(x: Tensor, pad_mask: np.ndarray, params: dict[str, Tensor], prefix: str,
                         n_heads: int) -> Tensor:
    q = _split_heads(ag.linear(x, params[prefix + "wq"], params[prefix + "bq"]), n_heads)
    k = _split_heads(ag.linear(x, params[prefix + "wk"], params[prefix + "bk"]), n_heads)
    v = _split_heads(ag.linear(x, params[prefix + "wv"], params[prefix + "bv"]), n_heads)
    heads = scaled_dot_attention(q, k, v, pad_mask)
    return ag.linear(_merge_heads(heads), params[prefix + "wo"], params[prefix + "bo"])


def _norm(x: Tensor, params, name: str) -> Tensor:
    return ag.layer_norm(x) * params[name + ".g"] + params[name + ".b"]


def encoder_block(x: ContextVectors, params: dict[str, Tensor], layer: int,
                  config: EncoderConfig, dropout: float = 0.0, rng=None) -> ContextVectors:
    """Post-norm transformer block: attention + residual + norm, FFN + residual + norm."""
    pre = f"enc{layer}."
    h = x.values
    att = multi_head_attention(h, x.pad_mask, params, pre, config.n_heads)
    h = _norm(h + ag.dropout(att, dropout, rng), params, pre + "ln1")
    ff = ag.linear(ag.relu(ag.linear(h, params[pre + "ff1.w"], params[pre + "ff1.b"])),
                   params[pre + "ff2.w"], params[pre + "ff2.b"])
    h = _norm(h + ag.dropout(ff, dropout, rng), params, pre + "ln2")
    return ContextVectors(h, x.pad_mask)


def pad_batch(seqs, pad_id: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad id lists to a rectangle; returns ``(ids, pad_mask)``."""
    L = max(len(s) for s in seqs)
    ids = np.full((len(seqs), L), pad_id, dtype=np.int64)
    mask = np.ones((len(seqs), L), dtype=bool)
    for b, s in enumerate(seqs):
        ids[b, :len(s)] = s
        mask[b, :len(s)] = False
    return ids, mask


def encode_batch(ids: np.ndarray, pad_mask: np.ndarray, config: EncoderConfig,
                 params: dict[str, Tensor], dropout: float = 0.0, rng=None) -> ContextVectors:
    ids = np.asarray(ids, dtype=np.int64)
    L = ids.shape[-1]
    if L > config.max_len:
        raise InputError(f"sequence length {L} exceeds max_len={config.max_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise InputError(f"token id outside [0, {config.vocab_size})")
    keep = (~pad_mask).astype(float)[..., None]
    emb = ag.embedding(params["emb.tok"], ids) + params["emb.pos"][:L]
    emb = ag.dropout(emb, dropout, rng) * keep
    h = ContextVectors(cnn_ngram_features(emb, config, params), pad_mask)
    for layer in range(config.n_layers):
        h = encoder_block(h, params, layer, config, dropout, rng)
    return h


def encode_sequence(ids, config: EncoderConfig, params: dict[str, Tensor]) -> ContextVectors:
    """Encode one id sequence to ``(L, d_model)`` context vectors."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise InputError("encode_sequence needs a non-empty 1-D id sequence")
    if ids.size > config.max_len:
        raise InputError(f"sequence length {ids.size} exceeds max_len={config.max_len}")
    out = encode_batch(ids[None], np.zeros((1, ids.size), dtype=bool), config, params)
    return ContextVectors(out.values[0], out.pad_mask[0])
