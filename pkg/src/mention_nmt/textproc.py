"""Subword and tag preprocessing.

File formats used throughout the pipeline:

- parallel corpus: UTF-8 plain text, one sentence per line, tokens
  separated by single spaces, source and target in separate files
- tag file: TSV with one ``token<TAB>tag`` pair per line and a blank
  line between sentences; must align 1:1 with the corpus tokens
- BPE model: one merge pair per line, space separated, learned order

Subwords carry the ``@@`` continuation convention: every subword of a
word except the last one ends in ``@@``, so joining subwords and
stripping the markers reproduces the original tokens exactly.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field

log = logging.getLogger(__name__)

# reserved vocabulary slots, fixed across all models
PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")

MENTION = "mention"
NO_MENTION = "none"

# universal POS categories treated as mentions
MENTION_POS = {"NOUN", "PRON", "PROPN", "SYM", "NUM"}
UPOS = MENTION_POS | {
    "ADJ", "ADP", "ADV", "AUX", "CCONJ", "DET", "INTJ",
    "PART", "PUNCT", "SCONJ", "VERB", "X",
}

_WORD_END = "</w>"
_CONT = "@@"


class AlignmentError(ValueError):
    """Token/tag streams that are supposed to be parallel are not."""


@dataclass
class TaggedSentence:
    """Subword ids with a parallel mention tag per subword.

    ``word_boundaries`` holds the number of subwords in each original
    token, in order; it partitions the subword sequence.
    """

    subwords: list
    tags: list
    word_boundaries: list

    def __post_init__(self):
        if len(self.subwords) != len(self.tags):
            raise AlignmentError(
                f"{len(self.subwords)} subwords vs {len(self.tags)} tags"
            )
        if sum(self.word_boundaries) != len(self.subwords):
            raise AlignmentError("word boundaries do not partition the subwords")


def map_pos_to_mention(pos_tags):
    """Collapse universal POS tags to the binary mention/none scheme."""
    out = []
    for tag in pos_tags:
        if tag in MENTION_POS:
            out.append(MENTION)
        else:
            if tag not in UPOS:
                log.warning("unknown POS tag %r mapped to %r", tag, NO_MENTION)
            out.append(NO_MENTION)
    return out


def propagate_tags(word_tags, word_boundaries):
    """Expand word-level tags so all subwords of a word share its tag."""
    if len(word_tags) != len(word_boundaries):
        raise AlignmentError(
            f"{len(word_tags)} word tags vs {len(word_boundaries)} words"
        )
    out = []
    for tag, n in zip(word_tags, word_boundaries):
        out.extend([tag] * n)
    return out


@dataclass
class BpeModel:
    """Ordered merge list; application order equals learned order."""

    merges: list
    _ranks: dict = field(default_factory=dict, repr=False)
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if len(set(self.merges)) != len(self.merges):
            raise ValueError("duplicate merge pair in BPE model")
        self._ranks = {pair: i for i, pair in enumerate(self.merges)}

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for a, b in self.merges:
                f.write(f"{a} {b}\n")

    @classmethod
    def load(cls, path):
        merges = []
        with open(path, encoding="utf-8") as f:
            for line in f:
                line = line.rstrip("\n")
                if not line:
                    continue
                a, b = line.split(" ")
                merges.append((a, b))
        return cls(merges)

    def segment_word(self, word):
        """Split one token into subwords, ``@@`` markers attached."""
        hit = self._cache.get(word)
        if hit is not None:
            return hit
        symbols = _word_symbols(word)
        while len(symbols) > 1:
            best = None
            best_rank = len(self.merges)
            for pair in zip(symbols, symbols[1:]):
                rank = self._ranks.get(pair)
                if rank is not None and rank < best_rank:
                    best, best_rank = pair, rank
            if best is None:
                break
            symbols = _merge_pair(symbols, best)
        rendered = _render(symbols)
        self._cache[word] = rendered
        return rendered


def _word_symbols(word):
    chars = list(word)
    chars[-1] = chars[-1] + _WORD_END
    return chars


def _merge_pair(symbols, pair):
    out = []
    i = 0
    while i < len(symbols):
        if i < len(symbols) - 1 and (symbols[i], symbols[i + 1]) == pair:
            out.append(symbols[i] + symbols[i + 1])
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return out


def _render(symbols):
    return [
        s[: -len(_WORD_END)] if s.endswith(_WORD_END) else s + _CONT
        for s in symbols
    ]


def bpe_learn(corpus, num_merges):
    """Learn greedy highest-frequency pair merges over a token corpus.

    ``corpus`` is an iterable of token lists.  Ties on pair frequency
    break lexicographically so learned models are deterministic.
    """
    word_freq = Counter()
    for sent in corpus:
        word_freq.update(sent)
    if not word_freq:
        raise ValueError("cannot learn BPE merges from an empty corpus")

    words = [(_word_symbols(w), freq) for w, freq in sorted(word_freq.items())]
    merges = []
    for _ in range(num_merges):
        pairs = Counter()
        for symbols, freq in words:
            for pair in zip(symbols, symbols[1:]):
                pairs[pair] += freq
        if not pairs:
            break
        best = min(pairs.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        merges.append(best)
        words = [(_merge_pair(symbols, best), freq) for symbols, freq in words]
    return BpeModel(merges)


def bpe_apply(sentence, model):
    """Segment a token list; returns (subwords, word_boundaries)."""
    subwords = []
    boundaries = []
    for word in sentence:
        if not word:
            continue
        pieces = model.segment_word(word)
        subwords.extend(pieces)
        boundaries.append(len(pieces))
    return subwords, boundaries


def merge_subwords(subwords):
    """Invert bpe_apply: join ``@@``-continued subwords back into tokens."""
    words = []
    current = ""
    for piece in subwords:
        if piece.endswith(_CONT):
            current += piece[: -len(_CONT)]
        else:
            words.append(current + piece)
            current = ""
    if current:
        # dangling continuation at sentence end; keep what we have
        words.append(current)
    return words


def boundaries_from_subwords(subwords):
    """Recover word group sizes from the ``@@`` continuation markers."""
    sizes = []
    run = 0
    for piece in subwords:
        run += 1
        if not piece.endswith(_CONT):
            sizes.append(run)
            run = 0
    if run:
        sizes.append(run)
    return sizes


class Vocab:
    """Bidirectional subword/id map with fixed reserved entries."""

    def __init__(self, symbols):
        self.id_to_sym = list(RESERVED) + [s for s in symbols if s not in RESERVED]
        self.sym_to_id = {s: i for i, s in enumerate(self.id_to_sym)}
        if len(self.sym_to_id) != len(self.id_to_sym):
            raise ValueError("duplicate symbol in vocabulary")

    @classmethod
    def build(cls, corpus, max_size=None):
        """Frequency-ranked vocabulary (ties lexicographic) from a corpus
        of subword token lists."""
        freq = Counter()
        for sent in corpus:
            freq.update(sent)
        ranked = sorted(freq.items(), key=lambda kv: (-kv[1], kv[0]))
        symbols = [s for s, _ in ranked]
        if max_size is not None:
            symbols = symbols[: max(0, max_size - len(RESERVED))]
        return cls(symbols)

    def __len__(self):
        return len(self.id_to_sym)

    def encode(self, tokens):
        return [self.sym_to_id.get(t, UNK_ID) for t in tokens]

    def decode(self, ids):
        return [self.id_to_sym[i] for i in ids]


def read_corpus(path):
    with open(path, encoding="utf-8") as f:
        return [line.split() for line in f.read().splitlines()]


def write_corpus(path, sentences):
    with open(path, "w", encoding="utf-8") as f:
        for sent in sentences:
            f.write(" ".join(sent) + "\n")


def read_tag_file(path):
    """Parse the TSV tag format into (tokens, tags) per sentence."""
    sentences = []
    tokens, tags = [], []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f.read().splitlines(), 1):
            if not line.strip():
                if tokens:
                    sentences.append((tokens, tags))
                    tokens, tags = [], []
                continue
            try:
                tok, tag = line.split("\t")
            except ValueError as e:
                raise AlignmentError(f"{path}:{lineno}: expected token<TAB>tag") from e
            tokens.append(tok)
            tags.append(tag)
    if tokens:
        sentences.append((tokens, tags))
    return sentences


def write_tag_file(path, sentences):
    """Write (tokens, tags) pairs in the TSV tag format."""
    with open(path, "w", encoding="utf-8") as f:
        for tokens, tags in sentences:
            if len(tokens) != len(tags):
                raise AlignmentError(f"{len(tokens)} tokens vs {len(tags)} tags")
            for tok, tag in zip(tokens, tags):
                f.write(f"{tok}\t{tag}\n")
            f.write("\n")
