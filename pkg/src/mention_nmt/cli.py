"""Command line front end.

One executable, ``mention-nmt``, exposes the whole pipeline as
file-composable subcommands: subword preprocessing, tag preparation,
synthetic data generation, training, translation, scoring, and the
evaluation metrics.  Training configuration is a flat JSON object with
precedence CLI flags > config file > defaults; ``--preset tiny`` applies
the desk-scale model size.  Every artifact-producing run writes a
manifest (config hash, seed, library versions) next to its output so
runs can be replayed bit-exactly.
"""

import argparse
import hashlib
import json
import platform
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint
from .data import load_split
from .decoding import score_pairs, translate_corpus
from .evaluation import (
    apt,
    bleu,
    contrastive_eval,
    format_report_table,
    make_model_scorer,
    read_alignment_file,
    read_contrastive_file,
    write_alignment_file,
)
from .mention import MentionTransformer
from .model import TINY_PRESET, ModelConfig, Transformer
from .synth import build_lexicon, lexicon_align, make_synthetic_task
from .textproc import (
    BpeModel,
    Vocab,
    bpe_apply,
    bpe_learn,
    boundaries_from_subwords,
    map_pos_to_mention,
    merge_subwords,
    propagate_tags,
    read_corpus,
    read_tag_file,
    write_corpus,
    write_tag_file,
)
from .train import TrainConfig, grad_check, train, warm_start

MODEL_KEYS = tuple(f.name for f in fields(ModelConfig))
TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig))


def config_hash(config):
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def write_run_manifest(path, command, config, seed=None):
    manifest = {
        "command": command,
        "config": config,
        "config_sha256": config_hash(config),
        "seed": seed,
        "versions": {
            "mention-nmt": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
        },
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, sort_keys=True, indent=1)
        f.write("\n")


def _print_json(obj):
    print(json.dumps(obj, sort_keys=True, indent=1))


# ---------------------------------------------------------------------------
# Preprocessing commands
# ---------------------------------------------------------------------------

def cmd_bpe_learn(args):
    model = bpe_learn(read_corpus(args.input), args.merges)
    model.save(args.out)
    print(f"learned {len(model.merges)} merges -> {args.out}")
    return 0


def cmd_bpe_apply(args):
    model = BpeModel.load(args.model)
    rows = [bpe_apply(sent, model)[0] for sent in read_corpus(args.input)]
    write_corpus(args.out, rows)
    print(f"segmented {len(rows)} sentences -> {args.out}")
    return 0


def cmd_tag_map(args):
    tagged = read_tag_file(args.pos_tags)
    out = [(tokens, map_pos_to_mention(tags)) for tokens, tags in tagged]
    write_tag_file(args.out, out)
    print(f"mapped {len(out)} sentences -> {args.out}")
    return 0


def cmd_tag_propagate(args):
    word_rows = read_tag_file(args.tags)
    subword_rows = read_corpus(args.bpe_boundaries)
    if len(word_rows) != len(subword_rows):
        raise ValueError(
            f"{len(word_rows)} tagged sentences vs "
            f"{len(subword_rows)} segmented sentences")
    out = []
    for (_, tags), subwords in zip(word_rows, subword_rows):
        sizes = boundaries_from_subwords(subwords)
        out.append((subwords, propagate_tags(tags, sizes)))
    write_tag_file(args.out, out)
    print(f"propagated tags for {len(out)} sentences -> {args.out}")
    return 0


def cmd_make_synth(args):
    sizes = {"train": args.train, "dev": args.dev, "test": args.test,
             "contrastive": args.contrastive}
    meta = make_synthetic_task(args.out, seed=args.seed, sizes=sizes)
    write_run_manifest(Path(args.out) / "run.json", "make-synth",
                       {"sizes": sizes}, seed=args.seed)
    _print_json(meta)
    return 0


def cmd_align(args):
    with open(args.lexicon, encoding="utf-8") as f:
        lexicon = json.load(f)
    src = read_corpus(args.src)
    tgt = read_corpus(args.tgt)
    if len(src) != len(tgt):
        raise ValueError(f"{len(src)} source vs {len(tgt)} target lines")
    write_alignment_file(args.out,
                         [lexicon_align(s, t, lexicon)
                          for s, t in zip(src, tgt)])
    print(f"aligned {len(src)} sentences -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def build_flat_config(args):
    """Flat configuration dict with precedence CLI > file > defaults."""
    flat = {f.name: f.default for f in fields(TrainConfig)}
    for f in fields(ModelConfig):
        # vocab sizes come from the data or checkpoint; "precision"
        # covers the array dtype
        if f.name not in ("src_vocab_size", "tgt_vocab_size", "dtype"):
            flat.setdefault(f.name, f.default)
    if getattr(args, "preset", None) == "tiny":
        flat.update(TINY_PRESET)
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as f:
            file_cfg = json.load(f)
        if not isinstance(file_cfg, dict):
            raise ValueError("config file must hold a flat JSON object")
        unknown = set(file_cfg) - set(flat) - {"src_vocab_size",
                                               "tgt_vocab_size"}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        flat.update(file_cfg)
    for key in flat:
        value = getattr(args, key, None)
        if value is not None:
            flat[key] = value
    return flat


def cmd_train(args):
    flat = build_flat_config(args)
    data_dir = Path(args.data)
    tagged = (data_dir / "train.src.tags").exists()
    if args.arch == "mention" and not tagged:
        raise ValueError(f"mention training needs tag files under {data_dir}")

    if args.init_from:
        init_model, src_vocab, tgt_vocab = load_checkpoint(args.init_from)
        base = init_model.config.to_dict()
        for key in ("enc_layers", "dec_layers", "d_model", "d_ffn", "heads",
                    "src_vocab_size", "tgt_vocab_size"):
            flat[key] = base[key]
    else:
        src_vocab = Vocab.build(read_corpus(data_dir / "train.src.bpe"),
                                max_size=flat.get("src_vocab_size"))
        tgt_vocab = Vocab.build(read_corpus(data_dir / "train.tgt.bpe"),
                                max_size=flat.get("tgt_vocab_size"))
        flat["src_vocab_size"] = len(src_vocab)
        flat["tgt_vocab_size"] = len(tgt_vocab)

    model_cfg = ModelConfig.from_dict({**flat, "dtype": flat["precision"]})
    train_cfg = TrainConfig.from_dict(flat)
    arch_cls = MentionTransformer if args.arch == "mention" else Transformer
    model = arch_cls(model_cfg, seed=train_cfg.seed)
    if args.init_from:
        copied = warm_start(model, args.init_from)
        print(f"warm start: copied {len(copied['copied'])} arrays, "
              f"{len(copied['fresh'])} fresh")

    train_examples = load_split(data_dir, "train", src_vocab, tgt_vocab,
                                tagged=tagged)
    dev_examples = load_split(data_dir, "dev", src_vocab, tgt_vocab,
                              tagged=tagged)
    save_dir = Path(args.save)
    save_dir.mkdir(parents=True, exist_ok=True)
    write_run_manifest(save_dir / "run.json", "train",
                       {**flat, "arch": args.arch,
                        "init_from": args.init_from},
                       seed=train_cfg.seed)
    history = train(model, train_examples, dev_examples, train_cfg, save_dir,
                    src_vocab, tgt_vocab,
                    log=None if args.quiet else _print_step)
    best = history["best"]
    print(f"best dev perplexity {best['dev_ppl']:.4f} "
          f"at epoch {best['epoch']} -> {save_dir / 'checkpoint_best'}")
    return 0


def _print_step(entry):
    if entry["step"] % 50 == 0:
        print(f"step {entry['step']:>6}  epoch {entry['epoch']:>3}  "
              f"loss {entry['total']:.4f}  lr {entry['lr']:.2e}")


# ---------------------------------------------------------------------------
# Translation and scoring
# ---------------------------------------------------------------------------

def cmd_translate(args):
    model, src_vocab, tgt_vocab = load_checkpoint(args.ckpt)
    rows = read_corpus(args.input)
    gold_rows = None
    if args.mask_mode == "gold":
        if not args.gold_tags:
            raise ValueError("--mask-mode gold requires --gold-tags")
        gold_rows = [tags for _, tags in read_tag_file(args.gold_tags)]
    results = translate_corpus(model, rows, src_vocab, tgt_vocab,
                               beam=args.beam, max_len=args.max_len,
                               mask_mode=args.mask_mode,
                               gold_tag_rows=gold_rows)
    out_rows = [merge_subwords(r.tokens) if args.merge_bpe else r.tokens
                for r in results]
    write_corpus(args.out, out_rows)
    write_run_manifest(
        str(args.out) + ".run.json", "translate",
        {"ckpt": args.ckpt, "beam": args.beam, "max_len": args.max_len,
         "mask_mode": args.mask_mode, "merge_bpe": args.merge_bpe})
    truncated = sum(r.truncated for r in results)
    print(f"translated {len(results)} sentences "
          f"({truncated} truncated) -> {args.out}")
    return 0


def cmd_score(args):
    model, src_vocab, tgt_vocab = load_checkpoint(args.ckpt)
    src = read_corpus(args.src)
    tgt = read_corpus(args.tgt)
    if len(src) != len(tgt):
        raise ValueError(f"{len(src)} source vs {len(tgt)} target lines")
    records = score_pairs(model, list(zip(src, tgt)), src_vocab, tgt_vocab,
                          mask_mode=args.mask_mode)
    with open(args.out, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    write_run_manifest(str(args.out) + ".run.json", "score",
                       {"ckpt": args.ckpt, "mask_mode": args.mask_mode})
    print(f"scored {len(records)} pairs -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def _write_report(out, payload, command, config):
    if out:
        with open(out, "w", encoding="utf-8") as f:
            json.dump(payload, f, sort_keys=True, indent=1)
            f.write("\n")
        write_run_manifest(str(out) + ".run.json", command, config)


def cmd_eval_bleu(args):
    score = bleu(read_corpus(args.cand), read_corpus(args.ref),
                 smooth=args.smooth)
    print(f"{score:.4f}")
    _write_report(args.out, {"bleu": score}, "eval-bleu",
                  {"cand": args.cand, "ref": args.ref, "smooth": args.smooth})
    return 0


def cmd_eval_apt(args):
    lexicon = None
    if args.lexicon:
        with open(args.lexicon, encoding="utf-8") as f:
            lexicon = json.load(f)
    report = apt(read_corpus(args.src), read_corpus(args.cand),
                 read_corpus(args.ref), read_alignment_file(args.align_ref),
                 read_alignment_file(args.align_cand), lexicon=lexicon)
    payload = report.to_dict()
    _print_json(payload)
    _write_report(args.out, payload, "eval-apt",
                  {"src": args.src, "cand": args.cand, "ref": args.ref,
                   "lexicon": args.lexicon})
    return 0


def _bpe_tokens(tokens, model):
    return bpe_apply(list(tokens), model)[0] if model else list(tokens)


def cmd_eval_contrastive(args):
    model, src_vocab, tgt_vocab = load_checkpoint(args.ckpt)
    sets = read_contrastive_file(args.sets)
    bpe_src = BpeModel.load(args.bpe_src) if args.bpe_src else None
    bpe_tgt = BpeModel.load(args.bpe_tgt) if args.bpe_tgt else None
    base_scorer = make_model_scorer(model, src_vocab, tgt_vocab)

    def scorer(src_tokens, tgt_tokens):
        return base_scorer(_bpe_tokens(src_tokens, bpe_src),
                           _bpe_tokens(tgt_tokens, bpe_tgt))

    report = contrastive_eval(sets, scorer)
    payload = report.to_dict()
    # keep stdout to the aggregate numbers; per-set decisions go to --out
    _print_json({k: v for k, v in payload.items() if k != "decisions"})
    _write_report(args.out, payload, "eval-contrastive",
                  {"ckpt": args.ckpt, "sets": args.sets,
                   "bpe_src": args.bpe_src, "bpe_tgt": args.bpe_tgt})
    return 0


def cmd_grad_check(args):
    result = grad_check(arch=args.arch, seed=args.seed,
                        tolerance=args.tolerance)
    print(f"max relative error {result['max_rel_err']:.3e} over "
          f"{len(result['probes'])} probes (tolerance {args.tolerance:g})")
    print("PASS" if result["passed"] else "FAIL")
    return 0 if result["passed"] else 1


def cmd_report(args):
    run_dir = Path(args.run)
    if not run_dir.is_dir():
        raise ValueError(f"not a directory: {run_dir}")
    rows = []
    for system_dir in sorted(p for p in run_dir.iterdir() if p.is_dir()):
        row = {"system": system_dir.name}
        found = False
        for name, extract in (
                ("bleu.json", lambda d: {"bleu": d["bleu"]}),
                ("apt.json", lambda d: {"apt_all": d["all"]["score"],
                                        "apt_ambiguous": d["ambiguous"]["score"]}),
                ("contrastive.json", lambda d: {
                    "accuracy": d["accuracy"],
                    "acc_0": d["buckets"]["0"]["accuracy"],
                    "acc_1": d["buckets"]["1"]["accuracy"],
                    "acc_gt1": d["buckets"][">1"]["accuracy"]})):
            path = system_dir / name
            if path.exists():
                with open(path, encoding="utf-8") as f:
                    row.update(extract(json.load(f)))
                found = True
        if found:
            rows.append(row)
    if not rows:
        raise ValueError(f"no evaluation artifacts under {run_dir}")
    print(format_report_table(rows), end="")
    return 0


# ---------------------------------------------------------------------------
# Argument surface
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="mention-nmt",
        description="Toy-scale NMT with mention-focused cross-attention.",
        epilog="Thread count follows the numpy BLAS environment "
               "(e.g. OMP_NUM_THREADS).")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bpe-learn", help="learn BPE merges from a corpus")
    p.add_argument("--input", required=True)
    p.add_argument("--merges", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bpe_learn)

    p = sub.add_parser("bpe-apply", help="segment a corpus with learned merges")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bpe_apply)

    p = sub.add_parser("tag-map", help="map POS tags to mention/none tags")
    p.add_argument("--pos-tags", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tag_map)

    p = sub.add_parser("tag-propagate",
                       help="expand word tags onto BPE subwords")
    p.add_argument("--tags", required=True)
    p.add_argument("--bpe-boundaries", required=True,
                   help="BPE-segmented corpus whose @@ markers give word "
                        "boundaries")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tag_propagate)

    p = sub.add_parser("make-synth", help="generate the synthetic task")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--train", type=int, required=True)
    p.add_argument("--dev", type=int, required=True)
    p.add_argument("--test", type=int, required=True)
    p.add_argument("--contrastive", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_synth)

    p = sub.add_parser("align", help="lexicon-based word alignment")
    p.add_argument("--src", required=True)
    p.add_argument("--tgt", required=True)
    p.add_argument("--lexicon", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="flat JSON config file")
    p.add_argument("--arch", choices=("baseline", "mention"),
                   default="baseline")
    p.add_argument("--init-from", help="checkpoint to warm start from")
    p.add_argument("--data", required=True)
    p.add_argument("--save", required=True)
    p.add_argument("--preset", choices=("tiny",))
    p.add_argument("--quiet", action="store_true")
    for key in ("seed", "max_epochs", "warmup_steps", "token_batch_size"):
        p.add_argument(f"--{key.replace('_', '-')}", type=int, dest=key)
    for key in ("lr0", "label_smoothing", "dropout",
                "weight_mt", "weight_src", "weight_tgt"):
        p.add_argument(f"--{key.replace('_', '-')}", type=float, dest=key)
    p.add_argument("--precision", choices=("float32", "float64"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", help="decode a source corpus")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--beam", type=int, default=4)
    p.add_argument("--max-len", type=int, default=64)
    p.add_argument("--mask-mode", choices=("predicted", "gold", "none"),
                   default="predicted")
    p.add_argument("--gold-tags", help="mention tag file for --mask-mode gold")
    p.add_argument("--merge-bpe", action="store_true",
                   help="join @@ subwords into words in the output")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("score", help="teacher-forced log-probabilities")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--src", required=True)
    p.add_argument("--tgt", required=True)
    p.add_argument("--mask-mode", choices=("predicted", "none"),
                   default="predicted")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval-bleu", help="corpus BLEU")
    p.add_argument("--cand", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--smooth", action="store_true")
    p.add_argument("--out", help="also write {'bleu': score} JSON here")
    p.set_defaults(func=cmd_eval_bleu)

    p = sub.add_parser("eval-apt", help="pronoun translation accuracy")
    p.add_argument("--src", required=True)
    p.add_argument("--cand", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--align-ref", required=True)
    p.add_argument("--align-cand", required=True)
    p.add_argument("--lexicon", help="equivalence lexicon JSON")
    p.add_argument("--out", help="also write the JSON report here")
    p.set_defaults(func=cmd_eval_apt)

    p = sub.add_parser("eval-contrastive", help="contrastive set accuracy")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--sets", required=True)
    p.add_argument("--bpe-src", help="apply this BPE model to source sides")
    p.add_argument("--bpe-tgt", help="apply this BPE model to target sides")
    p.add_argument("--out", help="also write the JSON report here")
    p.set_defaults(func=cmd_eval_contrastive)

    p = sub.add_parser("grad-check", help="finite-difference gradient check")
    p.add_argument("--arch", choices=("baseline", "mention"),
                   default="mention")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("report", help="Table-style summary of a run directory")
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
