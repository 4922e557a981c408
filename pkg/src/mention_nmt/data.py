"""Dataset loading and token-count batching.

A prepared data directory holds, per split:

    {split}.src.bpe   source corpus, BPE subwords, one sentence per line
    {split}.tgt.bpe   target corpus, same format
    {split}.src.tags  subword-level mention tags (TSV, blank-line separated)
    {split}.tgt.tags  same for the target side

Tag files must have been produced by tag mapping + propagation, so each
subword carries a mention/none tag.  Source sequences get EOS appended
(tag none); decoder input is BOS-prefixed, decoder output EOS-suffixed.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .textproc import (
    BOS_ID,
    EOS_ID,
    MENTION,
    AlignmentError,
    read_corpus,
    read_tag_file,
)


@dataclass
class Example:
    index: int
    src_ids: list          # includes trailing EOS
    tgt_ids: list          # bare tokens, no BOS/EOS
    src_mention: list      # 0/1 per src_ids entry (EOS is 0)
    tgt_mention: list      # 0/1 per tgt_ids entry

    @property
    def width(self):
        return max(len(self.src_ids), len(self.tgt_ids) + 1)


@dataclass
class Batch:
    src_ids: np.ndarray     # [B, S] int
    src_mask: np.ndarray    # [B, S] 0/1 model-dtype
    tgt_in: np.ndarray      # [B, T] int, BOS-prefixed
    tgt_out: np.ndarray     # [B, T] int, EOS-suffixed
    tgt_mask: np.ndarray    # [B, T]
    src_mention: np.ndarray | None   # [B, S] gold mention mask
    tgt_mention_in: np.ndarray | None  # [B, T] aligned with tgt_in (BOS slot 0)
    index: list             # corpus line numbers, for diagnostics

    @property
    def rows(self):
        return self.src_ids.shape[0]


def _tags_to_binary(rows, corpus, side, path):
    out = []
    for i, (sent, (tokens, tags)) in enumerate(zip(corpus, rows)):
        if tokens != sent:
            raise AlignmentError(
                f"{path}: sentence {i + 1} tokens do not match the {side} corpus")
        out.append([1.0 if tag == MENTION else 0.0 for tag in tags])
    return out


def load_split(data_dir, split, src_vocab, tgt_vocab, tagged=True):
    """Examples for one split; ``tagged=False`` skips the tag files."""
    src = read_corpus(os.path.join(data_dir, f"{split}.src.bpe"))
    tgt = read_corpus(os.path.join(data_dir, f"{split}.tgt.bpe"))
    if len(src) != len(tgt):
        raise AlignmentError(
            f"{split}: {len(src)} source lines but {len(tgt)} target lines")
    if tagged:
        src_tag_path = os.path.join(data_dir, f"{split}.src.tags")
        tgt_tag_path = os.path.join(data_dir, f"{split}.tgt.tags")
        src_tag_rows = read_tag_file(src_tag_path)
        tgt_tag_rows = read_tag_file(tgt_tag_path)
        if len(src_tag_rows) != len(src) or len(tgt_tag_rows) != len(tgt):
            raise AlignmentError(f"{split}: tag files do not cover the corpus")
        src_mention = _tags_to_binary(src_tag_rows, src, "source", src_tag_path)
        tgt_mention = _tags_to_binary(tgt_tag_rows, tgt, "target", tgt_tag_path)
    examples = []
    for i in range(len(src)):
        sm = src_mention[i] + [0.0] if tagged else [0.0] * (len(src[i]) + 1)
        tm = tgt_mention[i] if tagged else [0.0] * len(tgt[i])
        examples.append(Example(
            index=i,
            src_ids=src_vocab.encode(src[i]) + [EOS_ID],
            tgt_ids=tgt_vocab.encode(tgt[i]),
            src_mention=sm,
            tgt_mention=tm,
        ))
    return examples


def pad_batch(examples, dtype=np.float32, with_mentions=True):
    """Pack examples into padded arrays (PAD id 0, mask 0 on padding)."""
    rows = len(examples)
    s = max(len(e.src_ids) for e in examples)
    t = max(len(e.tgt_ids) for e in examples) + 1
    src_ids = np.zeros((rows, s), dtype=np.int64)
    src_mask = np.zeros((rows, s), dtype=dtype)
    tgt_in = np.zeros((rows, t), dtype=np.int64)
    tgt_out = np.zeros((rows, t), dtype=np.int64)
    tgt_mask = np.zeros((rows, t), dtype=dtype)
    src_mention = np.zeros((rows, s), dtype=dtype) if with_mentions else None
    tgt_mention_in = np.zeros((rows, t), dtype=dtype) if with_mentions else None
    for i, e in enumerate(examples):
        n, m = len(e.src_ids), len(e.tgt_ids) + 1
        src_ids[i, :n] = e.src_ids
        src_mask[i, :n] = 1.0
        tgt_in[i, 0] = BOS_ID
        tgt_in[i, 1:m] = e.tgt_ids
        tgt_out[i, : m - 1] = e.tgt_ids
        tgt_out[i, m - 1] = EOS_ID
        tgt_mask[i, :m] = 1.0
        if with_mentions:
            src_mention[i, :n] = e.src_mention
            tgt_mention_in[i, 1:m] = e.tgt_mention
    return Batch(src_ids, src_mask, tgt_in, tgt_out, tgt_mask,
                 src_mention, tgt_mention_in, [e.index for e in examples])


def make_batches(examples, token_batch_size, seed, epoch, dtype=np.float32,
                 with_mentions=True, shuffle=True):
    """Length-bucketed batches capped by padded token count.

    Sentences are packed in length order so padding stays small; the
    resulting batch order is then shuffled by a stream keyed on
    (seed, epoch), making every epoch's order a pure function of the
    seed.
    """
    if not examples:
        return []
    order = sorted(examples, key=lambda e: (e.width, len(e.src_ids), e.index))
    groups = []
    current = []
    width = 0
    for e in order:
        w = max(width, e.width)
        if current and (len(current) + 1) * w > token_batch_size:
            groups.append(current)
            current, width = [e], e.width
        else:
            current.append(e)
            width = w
    if current:
        groups.append(current)
    if shuffle:
        rng = T.philox_stream(seed, epoch)
        groups = [groups[i] for i in rng.permutation(len(groups))]
    return [pad_batch(g, dtype=dtype, with_mentions=with_mentions) for g in groups]
