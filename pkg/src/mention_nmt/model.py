"""Baseline transformer encoder-decoder.

Post-norm residual blocks, sinusoidal positions, tied target embedding
and output projection.  Forward methods take plain integer id arrays
plus float 0/1 masks (1 = real token) and return engine tensors, so the
same code path serves training (with a dropout stream) and inference
(``drop=None``).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T


class VocabError(ValueError):
    """Token id outside the configured vocabulary."""


@dataclass
class ModelConfig:
    enc_layers: int = 6
    dec_layers: int = 6
    d_model: int = 512
    d_ffn: int = 2048
    heads: int = 8
    dropout: float = 0.1
    src_vocab_size: int = 0
    tgt_vocab_size: int = 0
    label_smoothing: float = 0.1
    dtype: str = "float32"

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by {self.heads} heads")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# small shapes so the full pipeline runs on CPU in minutes
TINY_PRESET = {"enc_layers": 2, "dec_layers": 2, "d_model": 64, "d_ffn": 128, "heads": 4}


_PE_CACHE = {}


def positional_encoding(length, d_model, dtype):
    key = (length, d_model, np.dtype(dtype).str)
    hit = _PE_CACHE.get(key)
    if hit is None:
        pos = np.arange(length)[:, None]
        div = np.exp(np.arange(0, d_model, 2) * (-math.log(10000.0) / d_model))
        pe = np.zeros((length, d_model))
        pe[:, 0::2] = np.sin(pos * div)
        pe[:, 1::2] = np.cos(pos * div)
        hit = _PE_CACHE[key] = pe.astype(dtype)
    return hit


def causal_mask(length, dtype):
    return np.tril(np.ones((length, length), dtype=dtype))


def xavier_uniform(rng, fan_in, fan_out, dtype):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


def init_attention_params(params, prefix, rng, d_model, dtype):
    for name in ("wq", "wk", "wv", "wo"):
        params[f"{prefix}.{name}"] = T.Tensor(xavier_uniform(rng, d_model, d_model, dtype))
    for name in ("bq", "bk", "bv", "bo"):
        params[f"{prefix}.{name}"] = T.Tensor(np.zeros(d_model, dtype=dtype))


def init_ffn_params(params, prefix, rng, d_in, d_hidden, d_out, dtype):
    params[f"{prefix}.w1"] = T.Tensor(xavier_uniform(rng, d_in, d_hidden, dtype))
    params[f"{prefix}.b1"] = T.Tensor(np.zeros(d_hidden, dtype=dtype))
    params[f"{prefix}.w2"] = T.Tensor(xavier_uniform(rng, d_hidden, d_out, dtype))
    params[f"{prefix}.b2"] = T.Tensor(np.zeros(d_out, dtype=dtype))


def multi_head_attention(params, prefix, x_q, x_kv, mask, heads,
                         zero_mode=False, collect=None):
    """Multi-head scaled dot-product attention.

    ``mask`` is a constant 0/1 array broadcastable to the per-head score
    shape [B, H, Tq, Tk]; masked keys get exactly zero probability.
    """
    b, tq, d = x_q.shape
    tk = x_kv.shape[1]
    dk = d // heads
    q = T.linear(x_q, params[f"{prefix}.wq"], params[f"{prefix}.bq"])
    k = T.linear(x_kv, params[f"{prefix}.wk"], params[f"{prefix}.bk"])
    v = T.linear(x_kv, params[f"{prefix}.wv"], params[f"{prefix}.bv"])
    q = T.transpose(T.reshape(q, (b, tq, heads, dk)), (0, 2, 1, 3))
    k = T.transpose(T.reshape(k, (b, tk, heads, dk)), (0, 2, 1, 3))
    v = T.transpose(T.reshape(v, (b, tk, heads, dk)), (0, 2, 1, 3))
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dk))
    probs = T.softmax_masked(scores, mask, axis=-1, zero_mode=zero_mode)
    if collect is not None:
        collect[prefix] = probs.data
    ctx = T.reshape(T.transpose(T.matmul(probs, v), (0, 2, 1, 3)), (b, tq, d))
    return T.linear(ctx, params[f"{prefix}.wo"], params[f"{prefix}.bo"])


def feed_forward(params, prefix, x):
    hidden = T.relu(T.linear(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    return T.linear(hidden, params[f"{prefix}.w2"], params[f"{prefix}.b2"])


class Transformer:
    """Encoder-decoder over a params dict keyed by dotted array names."""

    arch = "baseline"

    def __init__(self, config, params=None, seed=0):
        self.config = config
        if config.src_vocab_size <= 0 or config.tgt_vocab_size <= 0:
            raise ValueError("vocab sizes must be set before building a model")
        self.params = params if params is not None else self._init_params(seed)

    def _init_params(self, seed):
        cfg = self.config
        dt = cfg.np_dtype
        rng = np.random.default_rng(seed)
        p = {}
        scale = cfg.d_model ** -0.5
        p["src_embed.weight"] = T.Tensor(
            rng.normal(0.0, scale, size=(cfg.src_vocab_size, cfg.d_model)).astype(dt))
        p["tgt_embed.weight"] = T.Tensor(
            rng.normal(0.0, scale, size=(cfg.tgt_vocab_size, cfg.d_model)).astype(dt))
        for i in range(cfg.enc_layers):
            init_attention_params(p, f"encoder.{i}.self_attn", rng, cfg.d_model, dt)
            self._init_ln(p, f"encoder.{i}.self_attn_ln", dt)
            init_ffn_params(p, f"encoder.{i}.ffn", rng, cfg.d_model, cfg.d_ffn, cfg.d_model, dt)
            self._init_ln(p, f"encoder.{i}.ffn_ln", dt)
        for i in range(cfg.dec_layers):
            init_attention_params(p, f"decoder.{i}.self_attn", rng, cfg.d_model, dt)
            self._init_ln(p, f"decoder.{i}.self_attn_ln", dt)
            init_attention_params(p, f"decoder.{i}.cross_attn", rng, cfg.d_model, dt)
            self._init_ln(p, f"decoder.{i}.cross_attn_ln", dt)
            init_ffn_params(p, f"decoder.{i}.ffn", rng, cfg.d_model, cfg.d_ffn, cfg.d_model, dt)
            self._init_ln(p, f"decoder.{i}.ffn_ln", dt)
        return p

    def _init_ln(self, params, prefix, dtype):
        params[f"{prefix}.gain"] = T.Tensor(np.ones(self.config.d_model, dtype=dtype))
        params[f"{prefix}.bias"] = T.Tensor(np.zeros(self.config.d_model, dtype=dtype))

    def _sublayer(self, x, out, ln_prefix, drop):
        if drop is not None and self.config.dropout > 0:
            out = T.dropout(out, self.config.dropout, drop)
        return T.layer_norm(
            T.add(x, out),
            self.params[f"{ln_prefix}.gain"],
            self.params[f"{ln_prefix}.bias"],
        )

    def _embed(self, table, ids, drop):
        cfg = self.config
        if ids.size and ids.max() >= table.shape[0]:
            raise VocabError(
                f"token id {int(ids.max())} outside vocabulary of {table.shape[0]}")
        x = T.mul(T.embedding(table, ids), math.sqrt(cfg.d_model))
        x = T.add(x, positional_encoding(ids.shape[1], cfg.d_model, cfg.np_dtype)[: ids.shape[1]])
        if drop is not None and cfg.dropout > 0:
            x = T.dropout(x, cfg.dropout, drop)
        return x

    def encode(self, src_ids, src_mask, drop=None, collect=None):
        """Source hidden states [B, S, d_model]; PAD keys masked out."""
        cfg = self.config
        x = self._embed(self.params["src_embed.weight"], src_ids, drop)
        attn_mask = src_mask[:, None, None, :]
        for i in range(cfg.enc_layers):
            a = multi_head_attention(
                self.params, f"encoder.{i}.self_attn", x, x, attn_mask, cfg.heads,
                collect=collect)
            x = self._sublayer(x, a, f"encoder.{i}.self_attn_ln", drop)
            f = feed_forward(self.params, f"encoder.{i}.ffn", x)
            x = self._sublayer(x, f, f"encoder.{i}.ffn_ln", drop)
        return x

    def decode_hidden(self, tgt_in, enc_out, src_mask, tgt_mask, drop=None, collect=None):
        """Final decoder-layer FFN output [B, T, d_model] (pre-projection)."""
        cfg = self.config
        x = self._embed(self.params["tgt_embed.weight"], tgt_in, drop)
        t = tgt_in.shape[1]
        self_mask = causal_mask(t, cfg.np_dtype)[None, None] * tgt_mask[:, None, None, :]
        cross_mask = src_mask[:, None, None, :]
        for i in range(cfg.dec_layers):
            a = multi_head_attention(
                self.params, f"decoder.{i}.self_attn", x, x, self_mask, cfg.heads,
                collect=collect)
            x = self._sublayer(x, a, f"decoder.{i}.self_attn_ln", drop)
            c = multi_head_attention(
                self.params, f"decoder.{i}.cross_attn", x, enc_out, cross_mask, cfg.heads,
                collect=collect)
            x = self._sublayer(x, c, f"decoder.{i}.cross_attn_ln", drop)
            f = feed_forward(self.params, f"decoder.{i}.ffn", x)
            x = self._sublayer(x, f, f"decoder.{i}.ffn_ln", drop)
        return x

    def project_output(self, hidden):
        """Token log-probabilities via the tied target embedding."""
        logits = T.matmul(hidden, T.transpose(self.params["tgt_embed.weight"], (1, 0)))
        return T.log_softmax(logits, axis=-1)

    def forward(self, batch, drop=None, collect=None):
        """Log-probabilities plus any auxiliary heads, as a dict."""
        enc = self.encode(batch.src_ids, batch.src_mask, drop, collect)
        h = self.decode_hidden(batch.tgt_in, enc, batch.src_mask, batch.tgt_mask, drop, collect)
        return {"log_probs": self.project_output(h), "enc_out": enc, "h_ffn": h}
