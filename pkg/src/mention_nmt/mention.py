"""Mention attention extension over the baseline transformer.

Adds one extra block above the decoder stack: cross-attention whose
keys/values are restricted to source positions flagged as mentions,
then a second feed-forward sublayer, both with residual + layernorm.
Two per-position classifiers (affine, ReLU, affine, sigmoid) predict
mention tags from the top encoder states and from the decoder FFN
output; they are trained jointly with translation and the source-side
one supplies the mask at inference time.

Batch rows whose mention mask is all zero bypass the added block
entirely, so such rows compute exactly the baseline path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import (
    Transformer,
    feed_forward,
    init_attention_params,
    init_ffn_params,
    multi_head_attention,
    xavier_uniform,
)
from .textproc import MENTION, AlignmentError


class ContractError(ValueError):
    """A required input for the requested mode is missing."""


# dotted prefixes of every array the extension adds on top of the baseline
MENTION_PARAM_GROUPS = (
    "mention.attn",
    "mention.attn_ln",
    "mention.ffn",
    "mention.ffn_ln",
    "mention.src_cls",
    "mention.tgt_cls",
)


@dataclass(frozen=True)
class ClassifierOutput:
    """Per-position mention scores: raw logits plus sigmoid probabilities."""

    logits: T.Tensor
    probs: T.Tensor


def build_mask_from_tags(tag_rows, pad_mask):
    """Binary [B, S] mask: 1 where the tag is mention and the slot is real.

    ``tag_rows`` holds one tag-string list per sentence and must cover
    each row's non-pad length exactly.
    """
    pad_mask = np.asarray(pad_mask)
    if len(tag_rows) != pad_mask.shape[0]:
        raise AlignmentError(
            f"{len(tag_rows)} tag rows for {pad_mask.shape[0]} batch rows")
    mask = np.zeros_like(pad_mask)
    for i, tags in enumerate(tag_rows):
        real = int(pad_mask[i].sum())
        if len(tags) != real:
            raise AlignmentError(
                f"row {i}: {len(tags)} tags for {real} non-pad positions")
        mask[i, :real] = [1.0 if t == MENTION else 0.0 for t in tags]
    return mask


def classify_mentions(params, prefix, h):
    """Position-wise mention scores from hidden states ``h`` [B, S, d]."""
    hidden = T.relu(T.linear(h, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    logits = T.linear(hidden, params[f"{prefix}.w2"], params[f"{prefix}.b2"])
    logits = T.reshape(logits, logits.shape[:-1])
    return ClassifierOutput(logits=logits, probs=T.sigmoid(logits))


def joint_loss(log_probs, tgt_out, tgt_mask,
               src_cls=None, tgt_cls=None,
               src_gold=None, tgt_gold=None, src_mask=None,
               weights=(1.0, 0.1, 0.1), label_smoothing=0.0):
    """Weighted sum of translation CE and the two classifier BCEs.

    Returns ``(loss, components)`` where components holds the raw
    (unweighted) values of each active term.  PAD positions are
    excluded from every average.  A nonzero classifier weight without
    the matching outputs/targets is a contract violation.
    """
    w_mt, w_src, w_tgt = weights
    l_mt = T.cross_entropy(log_probs, tgt_out, tgt_mask, label_smoothing)
    loss = T.mul(l_mt, w_mt) if w_mt != 1.0 else l_mt
    components = {"L_mt": l_mt.item(), "L_src": 0.0, "L_tgt": 0.0}
    if w_src:
        if src_cls is None or src_gold is None or src_mask is None:
            raise ContractError("source classifier loss requested without gold tags")
        l_src = T.binary_cross_entropy_with_logits(src_cls.logits, src_gold, src_mask)
        components["L_src"] = l_src.item()
        loss = T.add(loss, T.mul(l_src, w_src))
    if w_tgt:
        if tgt_cls is None or tgt_gold is None:
            raise ContractError("target classifier loss requested without gold tags")
        l_tgt = T.binary_cross_entropy_with_logits(tgt_cls.logits, tgt_gold, tgt_mask)
        components["L_tgt"] = l_tgt.item()
        loss = T.add(loss, T.mul(l_tgt, w_tgt))
    components["total"] = loss.item()
    return loss, components


class MentionTransformer(Transformer):
    """Baseline transformer plus the mention block and classifiers."""

    arch = "mention"

    def _init_params(self, seed):
        params = super()._init_params(seed)
        self.init_mention_params(params, seed)
        return params

    def init_mention_params(self, params, seed):
        """Add freshly initialized extension arrays to ``params``."""
        cfg = self.config
        dt = cfg.np_dtype
        rng = np.random.default_rng([seed, 1])
        init_attention_params(params, "mention.attn", rng, cfg.d_model, dt)
        self._init_ln(params, "mention.attn_ln", dt)
        init_ffn_params(params, "mention.ffn", rng, cfg.d_model, cfg.d_ffn, cfg.d_model, dt)
        self._init_ln(params, "mention.ffn_ln", dt)
        for cls in ("mention.src_cls", "mention.tgt_cls"):
            params[f"{cls}.w1"] = T.Tensor(xavier_uniform(rng, cfg.d_model, cfg.d_model, dt))
            params[f"{cls}.b1"] = T.Tensor(np.zeros(cfg.d_model, dtype=dt))
            params[f"{cls}.w2"] = T.Tensor(xavier_uniform(rng, cfg.d_model, 1, dt))
            params[f"{cls}.b2"] = T.Tensor(np.zeros(1, dtype=dt))

    def mention_attention(self, h_ffn, enc_out, mention_mask, drop=None, collect=None):
        """The added block: masked cross-attention + FFN, gated per row.

        Keys/values outside ``mention_mask`` get exactly zero attention.
        Rows with an all-zero mask return ``h_ffn`` unchanged.
        """
        cfg = self.config
        mention_mask = np.asarray(mention_mask, dtype=cfg.np_dtype)
        mask4 = mention_mask[:, None, None, :]
        a = multi_head_attention(self.params, "mention.attn", h_ffn, enc_out, mask4,
                                 cfg.heads, zero_mode=True, collect=collect)
        h1 = self._sublayer(h_ffn, a, "mention.attn_ln", drop)
        f = feed_forward(self.params, "mention.ffn", h1)
        h2 = self._sublayer(h1, f, "mention.ffn_ln", drop)
        gate = (mention_mask.sum(-1) > 0).astype(cfg.np_dtype)[:, None, None]
        if np.all(gate == 1.0):
            return h2
        return T.add(T.mul(h2, gate), T.mul(h_ffn, 1.0 - gate))

    def predict_mask(self, enc_out, pad_mask, threshold=0.5):
        """Source mention mask from the source classifier, PAD forced to 0."""
        with T.no_grad():
            out = classify_mentions(self.params, "mention.src_cls", enc_out)
        pad_mask = np.asarray(pad_mask)
        return (out.probs.data >= threshold).astype(pad_mask.dtype) * pad_mask

    def forward(self, batch, drop=None, collect=None):
        """Extended forward pass; ``batch.src_mention`` supplies the mask."""
        if getattr(batch, "src_mention", None) is None:
            raise ContractError("extended forward needs batch.src_mention")
        enc = self.encode(batch.src_ids, batch.src_mask, drop, collect)
        h_ffn = self.decode_hidden(batch.tgt_in, enc, batch.src_mask, batch.tgt_mask,
                                   drop, collect)
        h_mention = self.mention_attention(h_ffn, enc, batch.src_mention, drop, collect)
        return {
            "log_probs": self.project_output(h_mention),
            "enc_out": enc,
            "h_ffn": h_ffn,
            "h_mention": h_mention,
            "src_cls": classify_mentions(self.params, "mention.src_cls", enc),
            "tgt_cls": classify_mentions(self.params, "mention.tgt_cls", h_ffn),
        }
