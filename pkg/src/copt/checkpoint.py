"""Versioned binary checkpoints.

Layout: ``MAGIC`` (8 bytes), header length (uint32 LE), UTF-8 JSON header,
then each parameter as little-endian float64 in manifest order. The header
carries the format version, model kind and config, the vocabulary and its
hash, and the ``(name, shape)`` manifest.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .corpus import Vocab
from .models import Discriminator, Seq2Seq

MAGIC = b"COPTCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _manifest(model) -> list[list]:
    names = []
    for i, p in enumerate(model.parameters()):
        names.append([p.name or f"param{i}", list(p.shape)])
    return names


def to_bytes(model, vocab: Vocab) -> bytes:
    header = {
        "format_version": FORMAT_VERSION,
        "kind": model.kind,
        "config": model.config(),
        "vocab": vocab.itos,
        "vocab_hash": vocab.hash(),
        "manifest": _manifest(model),
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blocks = b"".join(np.ascontiguousarray(p.data, dtype="<f8").tobytes()
                      for p in model.parameters())
    return MAGIC + struct.pack("<I", len(head)) + head + blocks


def save(path, model, vocab: Vocab) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(model, vocab))
    return path


def read_header(path) -> dict:
    raw = Path(path).read_bytes()
    return _parse(raw)[0]


def _parse(raw: bytes) -> tuple[dict, bytes]:
    if raw[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (n,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + n].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('format_version')}")
    return header, raw[12 + n:]


def from_bytes(raw: bytes, expect_vocab_hash: str | None = None):
    header, body = _parse(raw)
    vocab = Vocab(header["vocab"][4:])
    if vocab.hash() != header["vocab_hash"]:
        raise CheckpointError("vocabulary does not match its recorded hash")
    if expect_vocab_hash is not None and header["vocab_hash"] != expect_vocab_hash:
        raise CheckpointError("checkpoint vocabulary differs from the expected one")
    cls = {"generator": Seq2Seq, "discriminator": Discriminator}.get(header["kind"])
    if cls is None:
        raise CheckpointError(f"unknown model kind {header['kind']!r}")
    model = cls(**header["config"])
    params = model.parameters()
    manifest = header["manifest"]
    if len(manifest) != len(params):
        raise CheckpointError("parameter count does not match the model")
    offset = 0
    for p, (name, shape) in zip(params, manifest):
        if tuple(shape) != p.shape:
            raise CheckpointError(f"shape mismatch for {name}: file {shape}, model {p.shape}")
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        block = body[offset:offset + nbytes]
        if len(block) != nbytes:
            raise CheckpointError("checkpoint truncated")
        p.data[...] = np.frombuffer(block, dtype="<f8").reshape(shape)
        offset += nbytes
    if offset != len(body):
        raise CheckpointError("trailing bytes after parameter blocks")
    return model, vocab


def load(path, expect_vocab_hash: str | None = None):
    """Return ``(model, vocab)``; verifies magic, version, shapes, vocab hash."""
    return from_bytes(Path(path).read_bytes(), expect_vocab_hash)


def checksum(model) -> str:
    h = hashlib.sha256()
    for p in model.parameters():
        h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return h.hexdigest()
