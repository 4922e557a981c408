"""Checkpoint container: a directory holding manifest.json + params.bin.

The manifest records the architecture name, the model config, both
vocabularies, and an ordered array table (name, shape, dtype).
params.bin is the concatenation of the raw little-endian bytes of each
array in table order.  Nothing run-dependent (timestamps, hostnames)
is written, so identical runs produce byte-identical checkpoints.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .mention import MentionTransformer
from .model import ModelConfig, Transformer
from .textproc import Vocab

FORMAT_VERSION = 1

ARCHS = {"baseline": Transformer, "mention": MentionTransformer}


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint contents."""


def _le_dtype(dtype):
    dt = np.dtype(dtype)
    return dt.newbyteorder("<") if dt.byteorder == ">" else dt


def save_checkpoint(path, model, src_vocab, tgt_vocab):
    """Write ``model`` and its vocabularies under directory ``path``."""
    os.makedirs(path, exist_ok=True)
    names = sorted(model.params)
    table = []
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(model.params[name].data, dtype=_le_dtype(
            model.params[name].data.dtype))
        table.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str})
        blobs.append(arr.tobytes())
    manifest = {
        "format_version": FORMAT_VERSION,
        "arch": model.arch,
        "config": model.config.to_dict(),
        "arrays": table,
        "src_vocab": src_vocab.id_to_sym,
        "tgt_vocab": tgt_vocab.id_to_sym,
    }
    with open(os.path.join(path, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, sort_keys=True, indent=1)
        f.write("\n")
    with open(os.path.join(path, "params.bin"), "wb") as f:
        for blob in blobs:
            f.write(blob)


def read_manifest(path):
    try:
        with open(os.path.join(path, "manifest.json"), encoding="utf-8") as f:
            manifest = json.load(f)
    except FileNotFoundError as e:
        raise CheckpointError(f"no manifest under {path!r}") from e
    except json.JSONDecodeError as e:
        raise CheckpointError(f"unreadable manifest under {path!r}: {e}") from e
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format_version {version!r}")
    for key in ("arch", "config", "arrays", "src_vocab", "tgt_vocab"):
        if key not in manifest:
            raise CheckpointError(f"manifest missing {key!r}")
    return manifest


def read_arrays(path, manifest=None):
    """Arrays from params.bin keyed by name, validated against the table."""
    manifest = manifest if manifest is not None else read_manifest(path)
    with open(os.path.join(path, "params.bin"), "rb") as f:
        raw = f.read()
    arrays = {}
    offset = 0
    for entry in manifest["arrays"]:
        dt = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
        nbytes = count * dt.itemsize
        chunk = raw[offset: offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"params.bin truncated at array {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(chunk, dtype=dt).reshape(entry["shape"]).copy()
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(
            f"params.bin has {len(raw) - offset} trailing bytes beyond the manifest table")
    return arrays


def load_checkpoint(path):
    """Rebuild (model, src_vocab, tgt_vocab) from a checkpoint directory."""
    manifest = read_manifest(path)
    arch = manifest["arch"]
    if arch not in ARCHS:
        raise CheckpointError(f"unknown arch {arch!r}")
    config = ModelConfig.from_dict(manifest["config"])
    model = ARCHS[arch](config, seed=0)
    arrays = read_arrays(path, manifest)
    expected = set(model.params)
    got = set(arrays)
    if expected != got:
        missing = sorted(expected - got)
        extra = sorted(got - expected)
        raise CheckpointError(
            f"array set mismatch for arch {arch!r}: missing {missing}, extra {extra}")
    for name, arr in arrays.items():
        tensor = model.params[name]
        if tuple(arr.shape) != tuple(tensor.data.shape):
            raise CheckpointError(
                f"array {name!r} has shape {arr.shape}, expected {tensor.data.shape}")
        tensor.data = arr.astype(config.np_dtype, copy=False)
    src_vocab = Vocab(manifest["src_vocab"])
    tgt_vocab = Vocab(manifest["tgt_vocab"])
    return model, src_vocab, tgt_vocab
