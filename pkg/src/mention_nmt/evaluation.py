"""Translation quality metrics and reports.

Implements corpus BLEU (4-gram, brevity penalty, optional add-one
smoothing), pronoun translation accuracy (APT) driven by word-alignment
files, contrastive evaluation with antecedent-distance buckets, and the
mention-classifier agreement report.  All metrics are pure functions of
their inputs; model-dependent scoring is injected as a callable so it
can be replaced by an oracle in tests.
"""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field

from . import tensor as T
from .decoding import score_sequence
from .mention import classify_mentions
from .textproc import EOS_ID, UNK_ID

log = logging.getLogger(__name__)

#: pronouns whose translation APT tracks by default
TRACKED_PRONOUNS = ("he", "she", "it", "they")
#: subset whose target form depends on the antecedent, reported separately
AMBIGUOUS_PRONOUNS = ("it", "they")

BUCKET_LABELS = ("0", "1", ">1")


class EvalError(ValueError):
    """Malformed metric input (corpora, alignments, contrastive sets)."""


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------

def _ngrams(tokens, n):
    return Counter(tuple(tokens[i: i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates, references, smooth=False):
    """Corpus BLEU in [0, 100]: geometric mean of modified 1..4-gram
    precisions times the brevity penalty.

    ``smooth`` applies add-one smoothing ((m+1)/(t+1)) to every n-gram
    precision; without it any zero precision yields 0.0.
    """
    if len(candidates) != len(references):
        raise EvalError(
            f"corpus size mismatch: {len(candidates)} candidates vs "
            f"{len(references)} references")
    if not candidates:
        raise EvalError("empty corpus")

    matches = [0] * 4
    totals = [0] * 4
    cand_len = 0
    ref_len = 0
    for cand, ref in zip(candidates, references):
        cand_len += len(cand)
        ref_len += len(ref)
        for n in range(1, 5):
            cand_counts = _ngrams(cand, n)
            ref_counts = _ngrams(ref, n)
            totals[n - 1] += sum(cand_counts.values())
            matches[n - 1] += sum(
                min(c, ref_counts[g]) for g, c in cand_counts.items())

    if cand_len == 0:
        return 0.0
    log_prec = 0.0
    for m, t in zip(matches, totals):
        if smooth:
            p = (m + 1) / (t + 1)
        else:
            if m == 0:
                return 0.0
            p = m / t
        log_prec += math.log(p) / 4
    bp = 1.0 if cand_len > ref_len else math.exp(1 - ref_len / cand_len)
    return 100.0 * bp * math.exp(log_prec)


# ---------------------------------------------------------------------------
# Word alignments
# ---------------------------------------------------------------------------

def parse_alignment_line(line, lineno="?"):
    pairs = []
    for part in line.split():
        src, sep, tgt = part.partition("-")
        if sep != "-" or not src.isdigit() or not tgt.isdigit():
            raise EvalError(f"malformed alignment pair '{part}' on line {lineno}")
        pairs.append((int(src), int(tgt)))
    return pairs


def read_alignment_file(path):
    """One line per sentence of space-separated 0-based "srcIdx-tgtIdx" pairs."""
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            out.append(parse_alignment_line(line.strip(), lineno))
    return out


def write_alignment_file(path, alignments):
    with open(path, "w", encoding="utf-8") as f:
        for pairs in alignments:
            f.write(" ".join(f"{i}-{j}" for i, j in pairs) + "\n")


# ---------------------------------------------------------------------------
# APT
# ---------------------------------------------------------------------------

def _zero_counts():
    return {"identical": 0, "different": 0, "missing": 0}


@dataclass
class AptReport:
    """Pronoun translation accuracy.

    ``per_pronoun`` maps each tracked pronoun (lowercased) to its
    {identical, different, missing} counts; the three counts sum to the
    number of scored occurrences of that pronoun.  Occurrences whose
    source position has no reference alignment cannot be judged and are
    counted in ``excluded_no_ref`` instead.  ``multi_aligned`` counts
    occurrences aligned to more than one word on either side (judged by
    the any-match rule, flagged here for transparency).
    """

    per_pronoun: dict = field(default_factory=dict)
    excluded_no_ref: int = 0
    multi_aligned: int = 0

    def _counts(self, pronouns):
        total = _zero_counts()
        for pron in pronouns:
            for key, val in self.per_pronoun.get(pron, {}).items():
                total[key] += val
        return total

    def _score(self, pronouns):
        counts = self._counts(pronouns)
        n = sum(counts.values())
        score = counts["identical"] / n if n else None
        return counts, n, score

    @property
    def apt_all(self):
        return self._score(self.per_pronoun.keys())[2]

    @property
    def n_all(self):
        return self._score(self.per_pronoun.keys())[1]

    @property
    def apt_ambiguous(self):
        return self._score(AMBIGUOUS_PRONOUNS)[2]

    @property
    def n_ambiguous(self):
        return self._score(AMBIGUOUS_PRONOUNS)[1]

    def to_dict(self):
        counts_all, n_all, score_all = self._score(self.per_pronoun.keys())
        counts_amb, n_amb, score_amb = self._score(AMBIGUOUS_PRONOUNS)
        return {
            "per_pronoun": {p: dict(c) for p, c in sorted(self.per_pronoun.items())},
            "all": {"counts": counts_all, "n": n_all, "score": score_all,
                    "undefined": n_all == 0},
            "ambiguous": {"counts": counts_amb, "n": n_amb, "score": score_amb,
                          "undefined": n_amb == 0,
                          "pronouns": list(AMBIGUOUS_PRONOUNS)},
            "excluded_no_ref": self.excluded_no_ref,
            "multi_aligned": self.multi_aligned,
        }


def _aligned_words(position, pairs, tokens, side_name, sent_no):
    words = []
    for i, j in pairs:
        if i == position:
            if j >= len(tokens):
                raise EvalError(
                    f"alignment index {i}-{j} out of range on the "
                    f"{side_name} side of sentence {sent_no}")
            words.append(tokens[j])
    return words


def apt(src_corpus, cand_corpus, ref_corpus, ref_alignments, cand_alignments,
        tracked=TRACKED_PRONOUNS, lexicon=None):
    """Classify every tracked source pronoun occurrence by comparing its
    candidate-aligned word(s) with its reference-aligned word(s).

    identical: some candidate word equals some reference word
    (case-insensitive), or — with an equivalence ``lexicon`` mapping
    source pronoun to acceptable target forms — both sides fall in the
    pronoun's acceptable set.  missing: no candidate alignment.
    different: otherwise.  APT = identical / scored occurrences.
    """
    n = len(src_corpus)
    for name, corpus in (("candidate corpus", cand_corpus),
                         ("reference corpus", ref_corpus),
                         ("reference alignments", ref_alignments),
                         ("candidate alignments", cand_alignments)):
        if len(corpus) != n:
            raise EvalError(
                f"{name} has {len(corpus)} lines, expected {n}")

    tracked = {p.lower() for p in tracked}
    lex = {}
    if lexicon:
        lex = {p.lower(): {w.lower() for w in forms}
               for p, forms in lexicon.items()}

    report = AptReport()
    for sent_no, (src, cand, ref, ref_pairs, cand_pairs) in enumerate(
            zip(src_corpus, cand_corpus, ref_corpus,
                ref_alignments, cand_alignments)):
        for pos, word in enumerate(src):
            pron = word.lower()
            if pron not in tracked:
                continue
            ref_words = _aligned_words(pos, ref_pairs, ref, "reference", sent_no)
            cand_words = _aligned_words(pos, cand_pairs, cand, "candidate", sent_no)
            if not ref_words:
                report.excluded_no_ref += 1
                continue
            if len(ref_words) > 1 or len(cand_words) > 1:
                report.multi_aligned += 1
            counts = report.per_pronoun.setdefault(pron, _zero_counts())
            if not cand_words:
                counts["missing"] += 1
                continue
            ref_low = {w.lower() for w in ref_words}
            cand_low = {w.lower() for w in cand_words}
            acceptable = lex.get(pron, set())
            if cand_low & ref_low:
                counts["identical"] += 1
            elif cand_low & acceptable and ref_low & acceptable:
                counts["identical"] += 1
            else:
                counts["different"] += 1
    return report


# ---------------------------------------------------------------------------
# Contrastive evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ContrastiveSet:
    """A reference translation paired with incorrect variants; the model
    is judged correct iff it scores the reference strictly higher than
    every variant."""

    src: tuple
    ref: tuple
    contrastive: tuple  # each variant a token tuple
    distance: int       # sentences between pronoun and antecedent
    pronoun: str

    def __post_init__(self):
        if self.distance < 0:
            raise EvalError("distance must be >= 0")


def bucket_of(distance):
    if distance <= 1:
        return str(distance)
    return ">1"


def read_contrastive_file(path):
    """JSONL with fields {src, ref, contrastive: [str], distance, pronoun};
    sentences are whitespace-tokenized strings."""
    sets = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                sets.append(ContrastiveSet(
                    src=tuple(obj["src"].split()),
                    ref=tuple(obj["ref"].split()),
                    contrastive=tuple(tuple(v.split()) for v in obj["contrastive"]),
                    distance=int(obj["distance"]),
                    pronoun=obj["pronoun"],
                ))
            except (KeyError, TypeError, json.JSONDecodeError) as exc:
                raise EvalError(f"bad contrastive set on line {lineno}: {exc}")
    return sets


def write_contrastive_file(path, sets):
    with open(path, "w", encoding="utf-8") as f:
        for s in sets:
            f.write(json.dumps({
                "src": " ".join(s.src),
                "ref": " ".join(s.ref),
                "contrastive": [" ".join(v) for v in s.contrastive],
                "distance": s.distance,
                "pronoun": s.pronoun,
            }, sort_keys=True) + "\n")


@dataclass
class ContrastiveReport:
    n: int
    correct: int
    buckets: dict          # label -> {"n": int, "correct": int, "accuracy": float|None}
    skipped: int
    decisions: list        # per evaluated set: {"index", "bucket", "correct"}

    @property
    def accuracy(self):
        return self.correct / self.n if self.n else None

    def to_dict(self):
        return {
            "n": self.n, "correct": self.correct, "accuracy": self.accuracy,
            "buckets": self.buckets, "skipped": self.skipped,
            "decisions": self.decisions,
        }


def make_model_scorer(model, src_vocab, tgt_vocab):
    """Teacher-forced sequence scorer over whitespace tokens; OOV target
    tokens fall back to the unknown id."""

    def scorer(src_tokens, tgt_tokens):
        src_ids = src_vocab.encode(list(src_tokens)) + [EOS_ID]
        tgt_ids = [tgt_vocab.sym_to_id.get(t, UNK_ID) for t in tgt_tokens]
        return score_sequence(model, src_ids, tgt_ids)

    return scorer


def contrastive_eval(sets, scorer):
    """Score each set's reference and variants; a set is correct iff the
    reference outscores EVERY variant strictly (ties are incorrect).
    Sets without variants are skipped with a warning."""
    buckets = {lab: {"n": 0, "correct": 0} for lab in BUCKET_LABELS}
    decisions = []
    skipped = 0
    total = 0
    total_correct = 0
    for index, s in enumerate(sets):
        if not s.contrastive:
            log.warning("contrastive set %d has no variants; skipped", index)
            skipped += 1
            continue
        ref_score = scorer(s.src, s.ref)
        correct = all(ref_score > scorer(s.src, v) for v in s.contrastive)
        label = bucket_of(s.distance)
        buckets[label]["n"] += 1
        buckets[label]["correct"] += int(correct)
        total += 1
        total_correct += int(correct)
        decisions.append({"index": index, "bucket": label, "correct": correct})
    for lab, b in buckets.items():
        b["accuracy"] = b["correct"] / b["n"] if b["n"] else None
    return ContrastiveReport(n=total, correct=total_correct, buckets=buckets,
                             skipped=skipped, decisions=decisions)


# ---------------------------------------------------------------------------
# Mention-classifier agreement
# ---------------------------------------------------------------------------

def classifier_agreement(model, batches, threshold=0.5):
    """Fraction of non-pad positions where the predicted mention mask
    matches the gold tags, for the source classifier (encoder states)
    and the target classifier (pre-mention decoder states)."""
    src_agree = src_n = tgt_agree = tgt_n = 0
    with T.no_grad():
        for batch in batches:
            enc = model.encode(batch.src_ids, batch.src_mask)
            pred = model.predict_mask(enc, batch.src_mask, threshold=threshold)
            keep = batch.src_mask > 0
            src_agree += int((pred[keep] == batch.src_mention[keep]).sum())
            src_n += int(keep.sum())

            h = model.decode_hidden(batch.tgt_in, enc, batch.src_mask,
                                    batch.tgt_mask)
            out = classify_mentions(model.params, "mention.tgt_cls", h)
            tpred = (out.probs.data >= threshold).astype(
                batch.tgt_mention_in.dtype)
            tkeep = batch.tgt_mask > 0
            tgt_agree += int((tpred[tkeep] == batch.tgt_mention_in[tkeep]).sum())
            tgt_n += int(tkeep.sum())
    return {
        "source": {"agree": src_agree, "n": src_n,
                   "agreement": src_agree / src_n if src_n else None},
        "target": {"agree": tgt_agree, "n": tgt_n,
                   "agreement": tgt_agree / tgt_n if tgt_n else None},
    }


# ---------------------------------------------------------------------------
# Report table
# ---------------------------------------------------------------------------

REPORT_COLUMNS = ("System", "BLEU", "APT all", "APT ambig.",
                  "Contrastive", "d=0", "d=1", "d>1")


def _fmt(value):
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.4f}" if value <= 1.0 else f"{value:.2f}"
    return str(value)


def format_report_table(rows):
    """Aligned-column text table: one row per system with BLEU, APT over
    all/ambiguous pronouns, and contrastive accuracy overall plus by
    antecedent distance."""
    table = [list(REPORT_COLUMNS)]
    for row in rows:
        table.append([
            _fmt(row.get("system")), _fmt(row.get("bleu")),
            _fmt(row.get("apt_all")), _fmt(row.get("apt_ambiguous")),
            _fmt(row.get("accuracy")), _fmt(row.get("acc_0")),
            _fmt(row.get("acc_1")), _fmt(row.get("acc_gt1")),
        ])
    widths = [max(len(r[c]) for r in table) for c in range(len(table[0]))]
    lines = []
    for i, row in enumerate(table):
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
