"""Greedy/beam translation and teacher-forced sequence scoring.

Decoding is cache-free: each step re-runs the decoder on the whole
prefix, which is plenty fast at desk scale and keeps the step exactly
equal to a fresh forward pass.  For the mention architecture the
source mention mask is computed once per sentence (predicted by the
source classifier, or built from gold tags) and reused at every step.

Beam candidates are ranked by total log-probability and the final
hypothesis by length-normalized score ``logp / len**alpha``; ties
break deterministically toward lower token ids, so beam=1 is exactly
greedy argmax.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .mention import ContractError, build_mask_from_tags
from .textproc import BOS_ID, EOS_ID, NO_MENTION, PAD_ID

log = logging.getLogger(__name__)

LENGTH_NORM_ALPHA = 0.6


@dataclass
class Translation:
    ids: list                 # generated token ids, EOS stripped
    tokens: list              # subword strings
    log_prob: float           # sum of step log-probs (includes EOS if emitted)
    score: float              # length-normalized log_prob
    truncated: bool           # hit max_len before EOS
    mask_mode: str            # "predicted" | "gold" | "none"
    mention_mask: list | None  # per real source position, when applicable


@dataclass
class _Hyp:
    ids: list = field(default_factory=list)
    log_prob: float = 0.0

    def normalized(self, alpha=LENGTH_NORM_ALPHA):
        return self.log_prob / max(len(self.ids), 1) ** alpha


def resolve_mention_mask(model, enc, src_mask, mask_mode, gold_tags=None,
                         threshold=0.5):
    """The per-source mention mask for one encoded batch, or None.

    ``mask_mode``: "predicted" uses the source classifier, "gold"
    builds the mask from provided tags, "none" disables the block
    (baseline models always resolve to None).
    """
    if model.arch != "mention" or mask_mode == "none":
        return None
    if mask_mode == "predicted":
        return model.predict_mask(enc, src_mask, threshold=threshold)
    if mask_mode == "gold":
        if gold_tags is None:
            raise ContractError("gold-mask decoding requested without tags")
        return build_mask_from_tags(gold_tags, src_mask)
    raise ValueError(f"unknown mask mode {mask_mode!r}")


def _step_log_probs(model, enc_data, src_mask, prefix_rows, mention_mask):
    """Next-token log-probs [rows, V] for each BOS-prefixed row."""
    n = len(prefix_rows)
    t = len(prefix_rows[0])
    tgt_in = np.array(prefix_rows, dtype=np.int64).reshape(n, t)
    tgt_mask = np.ones((n, t), dtype=enc_data.dtype)
    enc = T.Tensor(np.repeat(enc_data, n, axis=0))
    smask = np.repeat(src_mask, n, axis=0)
    h = model.decode_hidden(tgt_in, enc, smask, tgt_mask)
    if mention_mask is not None:
        h = model.mention_attention(h, enc, np.repeat(mention_mask, n, axis=0))
    return model.project_output(h).data[:, -1]


def translate_sentence(model, src_ids, beam=4, max_len=64, mask_mode="predicted",
                       gold_tags=None, threshold=0.5, alpha=LENGTH_NORM_ALPHA):
    """Decode one source id sequence (EOS already appended)."""
    if beam < 1:
        raise ValueError("beam must be >= 1")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    with T.no_grad():
        src = np.array([src_ids], dtype=np.int64)
        src_mask = np.ones_like(src, dtype=model.config.np_dtype)
        enc = model.encode(src, src_mask)
        mask = resolve_mention_mask(
            model, enc, src_mask, mask_mode if model.arch == "mention" else "none",
            gold_tags=gold_tags, threshold=threshold)
        enc_data = enc.data

        live = [_Hyp()]
        finished = []
        for _ in range(max_len):
            rows = [[BOS_ID] + h.ids for h in live]
            lp = _step_log_probs(model, enc_data, src_mask, rows, mask)
            cand = []
            for i, h in enumerate(live):
                for tok in range(lp.shape[1]):
                    if tok in (PAD_ID, BOS_ID):  # never emitted
                        continue
                    cand.append((h.log_prob + lp[i, tok], i, tok))
            cand.sort(key=lambda c: (-c[0], c[1], c[2]))
            # top `beam` candidates survive; those ending in EOS are done
            # and release their slot for the rest of the search
            next_live = []
            for score, i, tok in cand[:beam]:
                h = _Hyp(live[i].ids + [tok], score)
                if tok == EOS_ID:
                    finished.append(h)
                else:
                    next_live.append(h)
            live = next_live
            if not live:
                break

        truncated = not finished
        pool = finished if finished else live
        best = max(enumerate(pool), key=lambda ih: (ih[1].normalized(alpha), -ih[0]))[1]
        ids = best.ids[:-1] if best.ids and best.ids[-1] == EOS_ID else best.ids
        mask_row = None
        if mask is not None:
            mask_row = [int(v) for v in mask[0, : len(src_ids)]]
        return Translation(
            ids=ids, tokens=[], log_prob=best.log_prob,
            score=best.normalized(alpha), truncated=truncated,
            mask_mode="none" if mask is None else mask_mode,
            mention_mask=mask_row)


def translate_corpus(model, sentences, src_vocab, tgt_vocab, beam=4, max_len=64,
                     mask_mode="predicted", gold_tag_rows=None, threshold=0.5):
    """Translate subword token rows into Translation records."""
    results = []
    for i, tokens in enumerate(sentences):
        ids = src_vocab.encode(tokens) + [EOS_ID]
        gold = None
        if gold_tag_rows is not None:
            # tag files carry one tag per subword; cover the appended EOS
            gold = [list(gold_tag_rows[i]) + [NO_MENTION]]
        tr = translate_sentence(model, ids, beam=beam, max_len=max_len,
                                mask_mode=mask_mode, gold_tags=gold,
                                threshold=threshold)
        tr.tokens = tgt_vocab.decode(tr.ids)
        if tr.truncated:
            log.warning("sentence %d hit max_len %d without EOS", i + 1, max_len)
        results.append(tr)
    return results


def score_sequence(model, src_ids, tgt_ids, mask_mode="predicted",
                   gold_tags=None, threshold=0.5):
    """Teacher-forced log P(tgt | src): sum over tokens plus final EOS.

    No dropout, no label smoothing; the BOS/EOS wrapping happens here.
    """
    with T.no_grad():
        src = np.array([src_ids], dtype=np.int64)
        src_mask = np.ones_like(src, dtype=model.config.np_dtype)
        tgt_in = np.array([[BOS_ID] + list(tgt_ids)], dtype=np.int64)
        tgt_out = list(tgt_ids) + [EOS_ID]
        tgt_mask = np.ones_like(tgt_in, dtype=model.config.np_dtype)
        enc = model.encode(src, src_mask)
        mask = resolve_mention_mask(
            model, enc, src_mask, mask_mode if model.arch == "mention" else "none",
            gold_tags=gold_tags, threshold=threshold)
        h = model.decode_hidden(tgt_in, enc, src_mask, tgt_mask)
        if mask is not None:
            h = model.mention_attention(h, enc, mask)
        lp = model.project_output(h).data[0]
        return float(sum(lp[t, tok] for t, tok in enumerate(tgt_out)))


def score_pairs(model, pairs, src_vocab, tgt_vocab, mask_mode="predicted",
                gold_tag_rows=None, threshold=0.5):
    """Score (src tokens, tgt tokens) pairs; OOV targets go through UNK.

    Returns a list of {"index", "log_prob", "oov_target"} records.
    """
    out = []
    for i, (src_tokens, tgt_tokens) in enumerate(pairs):
        oov = [t for t in tgt_tokens if t not in tgt_vocab.sym_to_id]
        if oov:
            log.warning("pair %d: %d OOV target tokens scored as UNK: %s",
                        i + 1, len(oov), " ".join(oov[:5]))
        src_ids = src_vocab.encode(src_tokens) + [EOS_ID]
        tgt_ids = tgt_vocab.encode(tgt_tokens)
        gold = None
        if gold_tag_rows is not None:
            gold = [list(gold_tag_rows[i]) + [NO_MENTION]]
        lp = score_sequence(model, src_ids, tgt_ids, mask_mode=mask_mode,
                            gold_tags=gold, threshold=threshold)
        out.append({"index": i, "log_prob": lp, "oov_target": len(oov)})
    return out
