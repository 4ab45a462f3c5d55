"""Checkpoint directories: JSON manifest + one little-endian float32 blob + tokenizer files.

Layout::

    <dir>/manifest.json    format version, configs, fingerprint, array table
    <dir>/weights.bin      arrays concatenated in manifest order
    <dir>/tokenizer/       tokenizer.json, vocab.txt (+ subword.tsv)

Nothing time- or host-dependent is written, so equal models give equal bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .awd_lstm import Classifier, LanguageModel, ModelConfig
from .errors import CheckpointError
from .tokenizers import Tokenizer, load_tokenizer

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
BLOB = "weights.bin"
KINDS = ("lm", "classifier")


@dataclass
class Checkpoint:
    kind: str
    model: LanguageModel | Classifier
    tokenizer: Tokenizer
    fingerprint: int
    train_config: dict | None = None


def _arrays(model) -> list[tuple[str, np.ndarray]]:
    items = [(k, v.data) for k, v in model.params.items()]
    items += list(getattr(model, "buffers", {}).items())
    return sorted(items)


def save_checkpoint(model: LanguageModel | Classifier, tokenizer: Tokenizer, path,
                    train_config: dict | None = None) -> Path:
    """Write ``model`` atomically to directory ``path`` (replacing an existing one)."""
    path = Path(path)
    kind = "classifier" if isinstance(model, Classifier) else "lm"
    table, chunks, offset = [], [], 0
    for name, arr in _arrays(model):
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        table.append({"name": name, "shape": list(arr.shape), "offset": offset, "length": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "model_config": model.config.to_dict(),
        "train_config": train_config,
        "tokenizer_fingerprint": f"{tokenizer.fingerprint():016x}",
        "labels": list(model.labels) if kind == "classifier" else None,
        "blob": BLOB,
        "blob_length": len(blob),
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
        "arrays": table,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    try:
        (tmp / BLOB).write_bytes(blob)
        (tmp / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        tokenizer.save(tmp / "tokenizer")
        if path.exists():
            old = Path(tempfile.mkdtemp(prefix=f".{path.name}.old.", dir=path.parent))
            os.replace(path, old / "ckpt")
            os.replace(tmp, path)
            shutil.rmtree(old)
        else:
            os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return path


def read_manifest(path) -> dict:
    try:
        manifest = json.loads((Path(path) / MANIFEST).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint manifest in {path}: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {manifest.get('format_version')!r} "
                              f"not supported (expected {FORMAT_VERSION})")
    if manifest.get("kind") not in KINDS:
        raise CheckpointError(f"unknown checkpoint kind {manifest.get('kind')!r}")
    return manifest


def _read_arrays(path: Path, manifest: dict) -> dict[str, np.ndarray]:
    try:
        blob = (path / manifest["blob"]).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read weights blob in {path}: {exc}") from exc
    if len(blob) != manifest["blob_length"]:
        raise CheckpointError(f"weights blob is {len(blob)} bytes, manifest says {manifest['blob_length']}")
    if hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
        raise CheckpointError("weights blob checksum mismatch (file corrupted)")
    arrays, expected_offset = {}, 0
    for entry in manifest["arrays"]:
        shape = tuple(entry["shape"])
        n_bytes = 4 * int(np.prod(shape, dtype=np.int64))
        if entry["offset"] != expected_offset or entry["length"] != n_bytes:
            raise CheckpointError(f"array {entry['name']!r}: offset/length inconsistent with shape {shape}")
        raw = blob[entry["offset"]:entry["offset"] + n_bytes]
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)
        expected_offset += n_bytes
    if expected_offset != len(blob):
        raise CheckpointError("weights blob has trailing bytes not described by the manifest")
    return arrays


def _expected_shapes(kind: str, config: ModelConfig) -> dict[str, tuple[int, ...]]:
    from .awd_lstm import init_classifier_head, init_encoder, init_lm_head
    from .rng import SplitMix64
    rng = SplitMix64(0)
    shapes = {k: v.shape for k, v in init_encoder(config, rng).items()}
    if kind == "lm":
        shapes.update({k: v.shape for k, v in init_lm_head(config, rng).items()})
    else:
        head, buffers = init_classifier_head(config, rng)
        shapes.update({k: v.shape for k, v in head.items()})
        shapes.update({k: v.shape for k, v in buffers.items()})
    return shapes


def load_checkpoint(path, tokenizer: Tokenizer | None = None, expect_kind: str | None = None) -> Checkpoint:
    """Load a checkpoint directory.

    ``tokenizer`` (when given) must match the stored vocabulary fingerprint;
    otherwise the tokenizer saved alongside the weights is used.
    ``expect_kind`` guards against feeding a classifier to an LM stage and
    vice versa.
    """
    path = Path(path)
    manifest = read_manifest(path)
    kind = manifest["kind"]
    if expect_kind is not None and kind != expect_kind:
        raise CheckpointError(f"head shape mismatch: checkpoint holds a {kind} head, stage expects {expect_kind}")
    fingerprint = int(manifest["tokenizer_fingerprint"], 16)
    if tokenizer is None:
        tokenizer = load_tokenizer(path / "tokenizer")
    if tokenizer.fingerprint() != fingerprint:
        raise CheckpointError(f"vocabulary fingerprint mismatch: checkpoint {fingerprint:016x}, "
                              f"tokenizer {tokenizer.fingerprint():016x}")
    config = ModelConfig.from_dict(manifest["model_config"])
    arrays = _read_arrays(path, manifest)
    expected = _expected_shapes(kind, config)
    if set(arrays) != set(expected):
        raise CheckpointError(f"head shape mismatch: arrays {sorted(set(arrays) ^ set(expected))} "
                              f"do not fit a {kind} model")
    for name, shape in expected.items():
        if arrays[name].shape != shape:
            raise CheckpointError(f"shape mismatch for {name!r}: stored {arrays[name].shape}, config needs {shape}")
    buffer_names = {k for k in arrays if k.endswith(("running_mean", "running_var"))}
    params = {k: Tensor(v, requires_grad=True) for k, v in arrays.items() if k not in buffer_names}
    if kind == "lm":
        model = LanguageModel(config, params)
    else:
        model = Classifier(config, params, {k: arrays[k] for k in sorted(buffer_names)}, manifest["labels"])
    return Checkpoint(kind, model, tokenizer, fingerprint, manifest.get("train_config"))
