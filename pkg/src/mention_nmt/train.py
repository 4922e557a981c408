"""Training loop: Adam, inverse-sqrt schedule, warm start, checkpointing.

Every run is a pure function of (seed, config, corpus): batch order,
dropout, and initialization all derive from counter-based streams, and
nothing time-dependent is written, so identical runs produce
bit-identical checkpoints and logs.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointError, read_arrays, read_manifest, save_checkpoint
from .data import make_batches
from .mention import joint_loss


class TrainingError(RuntimeError):
    """Training aborted (non-finite loss or unusable inputs)."""


@dataclass
class TrainConfig:
    lr0: float = 5e-4
    warmup_steps: int = 4000
    max_epochs: int = 20
    token_batch_size: int = 4000
    weight_mt: float = 1.0
    weight_src: float = 0.1
    weight_tgt: float = 0.1
    label_smoothing: float = 0.1
    seed: int = 1
    precision: str = "float32"

    def __post_init__(self):
        for name in ("lr0", "warmup_steps", "max_epochs", "token_batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"unsupported precision {self.precision!r}")

    @property
    def weights(self):
        return (self.weight_mt, self.weight_src, self.weight_tgt)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class CheckpointRecord:
    epoch: int
    step: int
    dev_ppl: float
    path: str


def lr_schedule(step, cfg):
    """Linear warmup to lr0, then inverse-sqrt decay."""
    if step < 1:
        raise ValueError(f"schedule is defined for steps >= 1, got {step}")
    return cfg.lr0 * min(step / cfg.warmup_steps, math.sqrt(cfg.warmup_steps / step))


class Adam:
    """Adam with bias correction over a named parameter dict."""

    def __init__(self, params, beta1=0.9, beta2=0.98, eps=1e-9):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr):
        """Apply one update from accumulated grads, then clear them."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad = None


def batch_loss(model, batch, weights, label_smoothing=0.0, drop=None):
    """Forward + joint loss for either architecture.

    The baseline model has no classifier heads, so its classifier
    weights must be zero; the mention model consumes the batch's gold
    mention arrays.
    """
    out = model.forward(batch, drop=drop)
    kwargs = {}
    if model.arch == "mention":
        kwargs = dict(src_cls=out["src_cls"], tgt_cls=out["tgt_cls"],
                      src_gold=batch.src_mention, tgt_gold=batch.tgt_mention_in,
                      src_mask=batch.src_mask)
    elif weights[1] or weights[2]:
        raise TrainingError("baseline arch cannot train classifier losses")
    return joint_loss(out["log_probs"], batch.tgt_out, batch.tgt_mask,
                      weights=weights, label_smoothing=label_smoothing, **kwargs)


def dev_perplexity(model, batches):
    """exp(mean per-token CE), dropout off, no label smoothing."""
    total_nll = 0.0
    total_tokens = 0.0
    with T.no_grad():
        for batch in batches:
            out = model.forward(batch)
            ce = T.cross_entropy(out["log_probs"], batch.tgt_out, batch.tgt_mask)
            tokens = float(batch.tgt_mask.sum())
            total_nll += ce.item() * tokens
            total_tokens += tokens
    if total_tokens == 0:
        raise TrainingError("dev perplexity over an empty dataset")
    return math.exp(total_nll / total_tokens)


def warm_start(model, ckpt_path):
    """Copy matching arrays from a checkpoint into ``model``.

    Arrays the checkpoint lacks keep their fresh initialization.
    Returns {"copied": [...], "fresh": [...]} sorted by name.
    """
    manifest = read_manifest(ckpt_path)
    arrays = read_arrays(ckpt_path, manifest)
    extra = sorted(set(arrays) - set(model.params))
    if extra:
        raise CheckpointError(
            f"checkpoint has arrays the target model lacks: {extra}")
    copied = []
    for name, arr in sorted(arrays.items()):
        target = model.params[name]
        if tuple(arr.shape) != tuple(target.data.shape):
            raise CheckpointError(
                f"shape mismatch for {name!r}: checkpoint {arr.shape}, "
                f"model {target.data.shape}")
        target.data = arr.astype(model.config.np_dtype, copy=False)
        copied.append(name)
    fresh = sorted(set(model.params) - set(arrays))
    return {"copied": copied, "fresh": fresh}


def grad_check(arch="mention", seed=0, tolerance=1e-4, probes=24, eps=1e-6):
    """Probe analytic gradients against central finite differences.

    Runs at 64-bit on a small model.  Probes are random parameter
    entries; for the mention arch one probe is forced into every
    extension group so all new arrays are covered.  Returns a dict with
    per-probe results and the max relative error.
    """
    from .mention import MENTION_PARAM_GROUPS, MentionTransformer
    from .model import ModelConfig, Transformer

    cfg = ModelConfig(enc_layers=1, dec_layers=1, d_model=8, d_ffn=16, heads=2,
                      dropout=0.0, src_vocab_size=17, tgt_vocab_size=19,
                      dtype="float64")
    cls = MentionTransformer if arch == "mention" else Transformer
    model = cls(cfg, seed=seed)
    rng = np.random.default_rng(seed)

    b, s, t = 3, 6, 5
    batch_ns = _random_batch(rng, cfg, b, s, t)
    weights = (1.0, 0.1, 0.1) if arch == "mention" else (1.0, 0.0, 0.0)

    def build():
        loss, _ = batch_loss(model, batch_ns, weights, label_smoothing=0.1)
        return loss

    loss = build()
    loss.backward()

    names = sorted(model.params)
    chosen = []
    if arch == "mention":
        for group in MENTION_PARAM_GROUPS:
            members = [n for n in names if n.startswith(group)]
            chosen.append(members[int(rng.integers(len(members)))])
    while len(chosen) < probes:
        chosen.append(names[int(rng.integers(len(names)))])

    results = []
    for name in chosen:
        p = model.params[name]
        flat = p.data.reshape(-1)
        idx = int(rng.integers(flat.size))
        keep = flat[idx]
        flat[idx] = keep + eps
        hi = build().item()
        flat[idx] = keep - eps
        lo = build().item()
        flat[idx] = keep
        numeric = (hi - lo) / (2 * eps)
        analytic = p.grad.reshape(-1)[idx]
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        results.append({"name": name, "index": idx, "analytic": analytic,
                        "numeric": numeric, "rel_err": rel})
    max_err = max(r["rel_err"] for r in results)
    return {"arch": arch, "seed": seed, "tolerance": tolerance,
            "probes": results, "max_rel_err": max_err,
            "passed": bool(max_err < tolerance)}


def _random_batch(rng, cfg, b, s, t):
    """Synthetic batch with pad tails and at least one mention per row."""
    from .data import Batch

    src_ids = rng.integers(4, cfg.src_vocab_size, size=(b, s))
    tgt_in = rng.integers(4, cfg.tgt_vocab_size, size=(b, t))
    tgt_out = rng.integers(4, cfg.tgt_vocab_size, size=(b, t))
    src_mask = np.ones((b, s), dtype=cfg.np_dtype)
    tgt_mask = np.ones((b, t), dtype=cfg.np_dtype)
    src_mask[0, -1] = 0.0
    tgt_mask[0, -1] = 0.0
    tgt_in[0, 0] = 1
    src_mention = (rng.random((b, s)) < 0.5).astype(cfg.np_dtype) * src_mask
    for i in range(b):
        if src_mention[i].sum() == 0:
            src_mention[i, 0] = 1.0
    tgt_mention = (rng.random((b, t)) < 0.4).astype(cfg.np_dtype) * tgt_mask
    tgt_mention[:, 0] = 0.0
    return Batch(src_ids, src_mask, tgt_in, tgt_out, tgt_mask,
                 src_mention, tgt_mention, list(range(b)))


def train(model, train_examples, dev_examples, cfg, save_dir,
          src_vocab, tgt_vocab, log=None):
    """Full optimization run with best-dev-perplexity selection.

    Writes one JSONL entry per step to ``save_dir``/train_log.jsonl,
    checkpoints under checkpoint_last/ and checkpoint_best/, and a
    history.json summary.  Returns the history dict.
    """
    os.makedirs(save_dir, exist_ok=True)
    opt = Adam(model.params)
    dtype = model.config.np_dtype
    weights = cfg.weights if model.arch == "mention" else (cfg.weight_mt, 0.0, 0.0)
    dev_batches = make_batches(dev_examples, cfg.token_batch_size, cfg.seed, 0,
                               dtype=dtype, shuffle=False)
    step = 0
    best = None
    history = {"epochs": [], "config": cfg.to_dict(), "arch": model.arch}
    log_path = os.path.join(save_dir, "train_log.jsonl")
    with open(log_path, "w", encoding="utf-8") as log_file:
        for epoch in range(1, cfg.max_epochs + 1):
            batches = make_batches(train_examples, cfg.token_batch_size,
                                   cfg.seed, epoch, dtype=dtype)
            if not batches:
                raise TrainingError("no training batches")
            epoch_loss = 0.0
            for batch in batches:
                step += 1
                lr = lr_schedule(step, cfg)
                drop = T.philox_stream(cfg.seed, step)
                try:
                    loss, comps = batch_loss(model, batch, weights,
                                             cfg.label_smoothing, drop=drop)
                except FloatingPointError as e:
                    raise TrainingError(
                        f"non-finite value at step {step} "
                        f"(batch lines {batch.index[:5]}...): {e}") from e
                if not math.isfinite(comps["total"]):
                    raise TrainingError(
                        f"non-finite loss {comps['total']} at step {step} "
                        f"(batch lines {batch.index[:5]}...)")
                loss.backward()
                opt.step(lr)
                epoch_loss += comps["total"]
                entry = {"step": step, "epoch": epoch, "lr": lr,
                         "L_mt": comps["L_mt"], "L_src": comps["L_src"],
                         "L_tgt": comps["L_tgt"], "total": comps["total"]}
                log_file.write(json.dumps(entry, sort_keys=True) + "\n")
                if log:
                    log(entry)
            dev_ppl = dev_perplexity(model, dev_batches)
            last_dir = os.path.join(save_dir, "checkpoint_last")
            save_checkpoint(last_dir, model, src_vocab, tgt_vocab)
            record = {"epoch": epoch, "step": step, "dev_ppl": dev_ppl,
                      "train_loss": epoch_loss / len(batches)}
            if best is None or dev_ppl < best.dev_ppl:
                best_dir = os.path.join(save_dir, "checkpoint_best")
                save_checkpoint(best_dir, model, src_vocab, tgt_vocab)
                best = CheckpointRecord(epoch, step, dev_ppl, best_dir)
            history["epochs"].append(record)
            history["best"] = {"epoch": best.epoch, "step": best.step,
                               "dev_ppl": best.dev_ppl, "path": "checkpoint_best"}
    with open(os.path.join(save_dir, "history.json"), "w", encoding="utf-8") as f:
        json.dump(history, f, sort_keys=True, indent=1)
        f.write("\n")
    return history
