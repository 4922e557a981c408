"""Synthetic ambiguous-pronoun translation task.

The source language translates word-for-word into the target language
with one exception: the pronouns "it" and "they" have several target
forms (er/sie/es and sie/zij) and the correct form is determined by the
latent class of the pronoun's antecedent noun.  Training units are
segments of one to three sentences joined by "." tokens, so the
antecedent can sit 0, 1, or 2+ sentences before the pronoun — the
distance buckets used by the contrastive evaluation.  Because segments
never introduce a competing antecedent between the true one and the
pronoun, a nearest-compatible-noun rule resolves every pronoun exactly,
which gives the rule-based oracle translator and makes every generated
set answerable from the source segment alone.

The generator emits, per split, plain word corpora and gold POS tag
files (the standard pipeline then maps POS to mention tags and
propagates them over subwords), plus exact word alignments for the test
split, a contrastive JSONL file, and the lexicon that drives the
word aligner for candidate translations.
"""

import json
from pathlib import Path

from .evaluation import ContrastiveSet, write_alignment_file, write_contrastive_file
from .tensor import philox_stream
from .textproc import write_corpus, write_tag_file

THING_NOUNS = {
    "masc": ("bolt", "cart", "drum", "fork", "hinge", "knob",
             "magnet", "nail", "rivet", "spool", "wrench", "plug"),
    "fem": ("crate", "flute", "lamp", "ramp", "sled", "vane",
            "chute", "gauge"),
    "neut": ("anvil", "beam", "cog", "dial", "gear", "lens"),
    "plur_sie": ("scissors", "tongs", "pliers", "shears"),
    "plur_zij": ("goggles", "bellows", "clamps", "skates"),
}
PERSON_NOUNS = {
    "he": ("man", "boy", "uncle", "smith"),
    "she": ("woman", "girl", "aunt", "nurse"),
}

SINGULAR_CLASSES = ("masc", "fem", "neut")   # antecedents of "it"
PLURAL_CLASSES = ("plur_sie", "plur_zij")    # antecedents of "they"

#: class -> (source pronoun, correct target pronoun form)
CLASS_PRONOUN = {
    "masc": ("it", "er"),
    "fem": ("it", "sie"),
    "neut": ("it", "es"),
    "plur_sie": ("they", "sie"),
    "plur_zij": ("they", "zij"),
}
PRONOUN_FORMS = {"it": ("er", "sie", "es"), "they": ("sie", "zij"),
                 "he": ("er",), "she": ("sie",)}
#: skewed priors keep the no-antecedent marginal stable across runs
CLASS_PRIOR = {"masc": 0.5, "fem": 0.3, "neut": 0.2,
               "plur_sie": 0.7, "plur_zij": 0.3}

VERBS_INTRANS = ("hums", "rattles", "shines", "spins", "squeaks",
                 "wobbles", "clicks", "drifts")
VERBS_TRANS = ("lifts", "holds", "pulls", "turns")
VERBS_PRON = ("breaks", "falls", "glows", "jams", "melts", "slips")
ADJECTIVES = ("old", "new", "red", "blue", "heavy", "small")
ADVERBS = ("today", "loudly", "slowly", "again", "often", "twice")
CONJUNCTIONS = ("and", "because")

FUNCTION_WORDS = {"the": "de", "a": "een", "and": "und",
                  "because": "weil", ".": ".",
                  "he": "er", "she": "sie"}


def _suffix_translation(word, pos):
    return word + {"NOUN": "e", "VERB": "t", "ADJ": "ig", "ADV": "lich"}[pos]


def _build_tables():
    src_pos = {}
    translations = {}  # deterministic form for every non-it/they word
    for nouns in THING_NOUNS.values():
        for w in nouns:
            src_pos[w] = "NOUN"
    for nouns in PERSON_NOUNS.values():
        for w in nouns:
            src_pos[w] = "NOUN"
    for w in VERBS_INTRANS + VERBS_TRANS + VERBS_PRON:
        src_pos[w] = "VERB"
    for w in ADJECTIVES:
        src_pos[w] = "ADJ"
    for w in ADVERBS:
        src_pos[w] = "ADV"
    for w, pos in (("the", "DET"), ("a", "DET"), ("and", "CCONJ"),
                   ("because", "SCONJ"), (".", "PUNCT"),
                   ("it", "PRON"), ("they", "PRON"),
                   ("he", "PRON"), ("she", "PRON")):
        src_pos[w] = pos
    for w, pos in src_pos.items():
        if w in FUNCTION_WORDS:
            translations[w] = FUNCTION_WORDS[w]
        elif w in ("it", "they"):
            continue  # ambiguous, handled via PRONOUN_FORMS
        else:
            translations[w] = _suffix_translation(w, pos)

    tgt_pos = {}
    for w, t in translations.items():
        tgt_pos[t] = src_pos[w]
    for form in ("er", "sie", "es", "zij"):
        tgt_pos[form] = "PRON"
    assert len(set(translations.values())) == len(translations), \
        "target word forms must be unique"
    return src_pos, translations, tgt_pos


SRC_POS, TRANSLATIONS, TGT_POS = _build_tables()

NOUN_CLASS = {w: cls for cls, nouns in THING_NOUNS.items() for w in nouns}
PERSON_OF = {w: p for p, nouns in PERSON_NOUNS.items() for w in nouns}


def build_lexicon():
    """Source word -> acceptable target forms, for the word aligner."""
    lex = {w: [t] for w, t in TRANSLATIONS.items()}
    lex["it"] = list(PRONOUN_FORMS["it"])
    lex["they"] = list(PRONOUN_FORMS["they"])
    return lex


def tag_words(tokens, side="src"):
    """Deterministic POS tagger for the toy languages."""
    table = SRC_POS if side == "src" else TGT_POS
    return [table.get(tok, "X") for tok in tokens]


def resolve_antecedent(tokens, pron_index):
    """Nearest preceding compatible noun's class, or None.

    "it" binds singular thing nouns, "they" binds plural thing nouns;
    person nouns never antecede either.
    """
    pron = tokens[pron_index]
    wanted = SINGULAR_CLASSES if pron == "it" else PLURAL_CLASSES
    for tok in reversed(tokens[:pron_index]):
        cls = NOUN_CLASS.get(tok)
        if cls in wanted:
            return cls
    return None


def translate_oracle(src_tokens):
    """Rule-based reference translator: word-for-word, with pronouns
    resolved by the nearest-compatible-antecedent rule (falling back to
    the majority class when no antecedent is present)."""
    out = []
    for i, tok in enumerate(src_tokens):
        if tok in ("it", "they"):
            cls = resolve_antecedent(src_tokens, i)
            if cls is None:
                cls = "masc" if tok == "it" else "plur_sie"
            out.append(CLASS_PRONOUN[cls][1])
        else:
            out.append(TRANSLATIONS[tok])
    return out


def oracle_scorer(src_tokens, tgt_tokens):
    """Scores 1 for the oracle translation of src and 0 for anything
    else; plugs into contrastive_eval as a perfect scorer."""
    return 1.0 if list(tgt_tokens) == translate_oracle(list(src_tokens)) else 0.0


def lexicon_align(src_tokens, tgt_tokens, lexicon):
    """Greedy leftmost word alignment: each target word is paired with
    the first unused source position that can translate to it."""
    used = set()
    pairs = []
    for j, tgt in enumerate(tgt_tokens):
        for i, src in enumerate(src_tokens):
            if i not in used and tgt in lexicon.get(src, ()):
                pairs.append((i, j))
                used.add(i)
                break
    return pairs


# ---------------------------------------------------------------------------
# Segment construction
# ---------------------------------------------------------------------------

def _choice(rng, seq):
    return seq[int(rng.integers(0, len(seq)))]


def _pick_class(rng, classes):
    weights = [CLASS_PRIOR[c] for c in classes]
    total = sum(weights)
    return classes[int(rng.choice(len(classes),
                                  p=[w / total for w in weights]))]


def _noun_phrase(rng, noun):
    plural = NOUN_CLASS.get(noun) in PLURAL_CLASSES
    det = "the" if plural else _choice(rng, ("the", "the", "a"))
    if rng.random() < 0.4:
        return [det, _choice(rng, ADJECTIVES), noun]
    return [det, noun]


def _filler_sentence(rng, nouns):
    """A pronoun-free sentence over the given noun inventory."""
    subject = _noun_phrase(rng, _choice(rng, nouns))
    if rng.random() < 0.35:
        return subject + [_choice(rng, VERBS_TRANS)] + \
            _noun_phrase(rng, _choice(rng, nouns))
    sent = subject + [_choice(rng, VERBS_INTRANS)]
    if rng.random() < 0.5:
        sent.append(_choice(rng, ADVERBS))
    return sent


def _pronoun_clause(rng, pron):
    clause = [pron, _choice(rng, VERBS_PRON)]
    if rng.random() < 0.5:
        clause.append(_choice(rng, ADVERBS))
    return clause


def _safe_fillers(pron):
    """Noun inventory that cannot steal the pronoun's antecedent."""
    if pron == "it":
        plural = [w for c in PLURAL_CLASSES for w in THING_NOUNS[c]]
        people = [w for ns in PERSON_NOUNS.values() for w in ns]
        return plural + people
    singular = [w for c in SINGULAR_CLASSES for w in THING_NOUNS[c]]
    people = [w for ns in PERSON_NOUNS.values() for w in ns]
    return singular + people


def _all_nouns():
    return [w for ns in THING_NOUNS.values() for w in ns] + \
        [w for ns in PERSON_NOUNS.values() for w in ns]


def build_pronoun_segment(rng, cls, distance, lead_filler=None):
    """Segment whose last sentence uses the pronoun of ``cls`` with its
    antecedent ``distance`` sentences earlier."""
    pron = CLASS_PRONOUN[cls][0]
    noun = _choice(rng, THING_NOUNS[cls])
    sentences = []
    if lead_filler is None:
        lead_filler = rng.random() < 0.2
    if lead_filler:
        sentences.append(_filler_sentence(rng, _all_nouns()))
    if distance == 0:
        ante = _noun_phrase(rng, noun) + [_choice(rng, VERBS_INTRANS)]
        sentences.append(ante + [_choice(rng, CONJUNCTIONS)]
                         + _pronoun_clause(rng, pron))
    else:
        sentences.append(_noun_phrase(rng, noun)
                         + [_choice(rng, VERBS_INTRANS)])
        for _ in range(distance - 1):
            sentences.append(_filler_sentence(rng, _safe_fillers(pron)))
        sentences.append(_pronoun_clause(rng, pron))
    tokens = []
    for i, sent in enumerate(sentences):
        if i:
            tokens.append(".")
        tokens.extend(sent)
    return tokens


def build_person_segment(rng):
    person = _choice(rng, ("he", "she"))
    noun = _choice(rng, PERSON_NOUNS[person])
    sent = ["the", noun, _choice(rng, VERBS_INTRANS),
            _choice(rng, CONJUNCTIONS)] + _pronoun_clause(rng, person)
    return sent


SEGMENT_MIX = (
    ("filler", 0.30), ("it_d0", 0.22), ("it_d1", 0.12), ("it_d2", 0.06),
    ("they_d0", 0.08), ("they_d1", 0.05), ("they_d2", 0.03),
    ("person", 0.14),
)


def build_training_segment(rng):
    kinds = [k for k, _ in SEGMENT_MIX]
    weights = [p for _, p in SEGMENT_MIX]
    probs = [w / sum(weights) for w in weights]
    kind = kinds[int(rng.choice(len(kinds), p=probs))]
    if kind == "filler":
        tokens = _filler_sentence(rng, _all_nouns())
        if rng.random() < 0.3:
            tokens += ["."] + _filler_sentence(rng, _all_nouns())
        return tokens
    if kind == "person":
        return build_person_segment(rng)
    pron, dist = kind.split("_d")
    classes = SINGULAR_CLASSES if pron == "it" else PLURAL_CLASSES
    return build_pronoun_segment(rng, _pick_class(rng, classes), int(dist))


# ---------------------------------------------------------------------------
# Task emission
# ---------------------------------------------------------------------------

def _exact_allocation(total, proportions):
    """Largest-remainder rounding so counts sum to total."""
    raw = [total * p for p in proportions]
    counts = [int(x) for x in raw]
    remainders = sorted(range(len(raw)), key=lambda i: raw[i] - counts[i],
                        reverse=True)
    for i in remainders[: total - sum(counts)]:
        counts[i] += 1
    return counts


def make_contrastive_sets(rng, count, distance_props=(0.5, 0.25, 0.25)):
    """Contrastive sets with an exact distance allocation (buckets
    0 / 1 / >1); variants replace the reference pronoun form with every
    other form of the same source pronoun."""
    per_bucket = _exact_allocation(count, distance_props)
    distances = [0] * per_bucket[0] + [1] * per_bucket[1] + \
        [int(_choice(rng, (2, 3))) for _ in range(per_bucket[2])]
    sets = []
    for dist in distances:
        pron = "it" if rng.random() < 0.75 else "they"
        classes = SINGULAR_CLASSES if pron == "it" else PLURAL_CLASSES
        cls = _pick_class(rng, classes)
        src = build_pronoun_segment(rng, cls, dist, lead_filler=False)
        ref = translate_oracle(src)
        correct = CLASS_PRONOUN[cls][1]
        assert ref[src.index(pron)] == correct  # generator self-check
        variants = []
        slot = src.index(pron)
        for form in PRONOUN_FORMS[pron]:
            if form != correct:
                variant = list(ref)
                variant[slot] = form
                variants.append(tuple(variant))
        sets.append(ContrastiveSet(src=tuple(src), ref=tuple(ref),
                                   contrastive=tuple(variants),
                                   distance=dist, pronoun=pron))
    return sets


def _emit_split(out_dir, split, rng, count):
    src_rows = [build_training_segment(rng) for _ in range(count)]
    tgt_rows = [translate_oracle(row) for row in src_rows]
    write_corpus(out_dir / f"{split}.src", src_rows)
    write_corpus(out_dir / f"{split}.tgt", tgt_rows)
    write_tag_file(out_dir / f"{split}.src.pos",
                   [(row, tag_words(row, "src")) for row in src_rows])
    write_tag_file(out_dir / f"{split}.tgt.pos",
                   [(row, tag_words(row, "tgt")) for row in tgt_rows])
    return src_rows, tgt_rows


def make_synthetic_task(out_dir, seed, sizes, distance_props=(0.5, 0.25, 0.25)):
    """Generate the full task under ``out_dir``.

    ``sizes`` maps split name to segment count for "train"/"dev"/"test"
    plus "contrastive" for the number of contrastive sets.  Returns a
    summary dict (also written as meta.json).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    splits = {}
    for counter, split in enumerate(("train", "dev", "test")):
        rng = philox_stream(seed, counter)
        splits[split] = _emit_split(out_dir, split, rng, sizes[split])

    test_src, test_tgt = splits["test"]
    write_alignment_file(out_dir / "test.align",
                         [[(i, i) for i in range(len(row))]
                          for row in test_src])

    sets = make_contrastive_sets(philox_stream(seed, 3), sizes["contrastive"],
                                 distance_props)
    write_contrastive_file(out_dir / "contrastive.jsonl", sets)

    lexicon = build_lexicon()
    with open(out_dir / "lexicon.json", "w", encoding="utf-8") as f:
        json.dump(lexicon, f, indent=1, sort_keys=True)
        f.write("\n")

    histogram = {"0": 0, "1": 0, ">1": 0}
    for s in sets:
        histogram["0" if s.distance == 0 else "1" if s.distance == 1 else ">1"] += 1
    meta = {
        "seed": seed,
        "sizes": dict(sizes),
        "distance_proportions": list(distance_props),
        "distance_histogram": histogram,
        "class_prior": CLASS_PRIOR,
        "segment_mix": {k: p for k, p in SEGMENT_MIX},
    }
    with open(out_dir / "meta.json", "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=1, sort_keys=True)
        f.write("\n")
    return meta
