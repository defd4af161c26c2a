"""Checkpoint files: one line of JSON header, then raw little-endian float64 payload.

The header carries the model config, the vocabulary and an ordered manifest of
``{name, shape}`` entries. Arrays follow in manifest order. Optimizer moments,
when present, are extra manifest entries under ``adam.m/`` and ``adam.v/``.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .model import LGNModel, ModelConfig
from .text import Vocabulary

MAGIC = "lgn-checkpoint"
VERSION = 1
_LE_F64 = np.dtype("<f8")


def _encode(header: dict, arrays: list[np.ndarray]) -> bytes:
    head = json.dumps(header, separators=(",", ":")).encode("utf-8") + b"\n"
    body = b"".join(np.ascontiguousarray(a, dtype=_LE_F64).tobytes() for a in arrays)
    return head + body


def save_checkpoint(
    path: str | Path,
    model: LGNModel,
    optimizer: dict | None = None,
    train_state: dict | None = None,
) -> None:
    """Write ``model`` (and optionally Adam moments / loop state) to ``path``.

    ``optimizer`` is ``{"step": int, "m": {name: array}, "v": {name: array}, ...hyperparams}``.
    """
    manifest, arrays = [], []
    for p in model.params:
        manifest.append({"name": p.name, "shape": list(p.shape)})
        arrays.append(p.data)
    opt_header = None
    if optimizer is not None:
        opt_header = {k: v for k, v in optimizer.items() if k not in ("m", "v")}
        for kind in ("m", "v"):
            for name, arr in optimizer[kind].items():
                manifest.append({"name": f"adam.{kind}/{name}", "shape": list(arr.shape)})
                arrays.append(arr)
    header = {
        "format": MAGIC,
        "version": VERSION,
        "config": model.config.to_dict(),
        "vocab": model.vocab.to_list(),
        "embedding_trainable": model.text.embedding.requires_grad,
        "manifest": manifest,
        "optimizer": opt_header,
        "train_state": train_state,
    }
    Path(path).write_bytes(_encode(header, arrays))


def read_checkpoint(path: str | Path) -> tuple[dict, dict]:
    """Parse a checkpoint into (header, {name: array}) without building a model."""
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise CheckpointError(f"{path}: missing header line")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header: {exc}") from None
    if header.get("format") != MAGIC or header.get("version") != VERSION:
        raise CheckpointError(f"{path}: not an {MAGIC} v{VERSION} file")
    payload = raw[nl + 1 :]
    expected = sum(int(np.prod(e["shape"], dtype=np.int64)) for e in header["manifest"]) * 8
    if len(payload) != expected:
        raise CheckpointError(f"{path}: payload has {len(payload)} bytes, manifest needs {expected}")
    arrays, offset = {}, 0
    for e in header["manifest"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        arrays[e["name"]] = np.frombuffer(payload, dtype=_LE_F64, count=n, offset=offset).reshape(e["shape"]).astype(np.float64)
        offset += n * 8
    return header, arrays


def load_checkpoint(path: str | Path) -> tuple[LGNModel, dict | None, dict | None]:
    """Rebuild the model; returns (model, optimizer state or None, train state or None).

    Every stored parameter shape is checked against the shapes the stored
    config implies.
    """
    header, arrays = read_checkpoint(path)
    config = ModelConfig.from_dict(header["config"])
    vocab = Vocabulary.from_list(header["vocab"])
    model = LGNModel(config, vocab)
    model.text.embedding.requires_grad = bool(header.get("embedding_trainable", True))
    names = [e["name"] for e in header["manifest"] if not e["name"].startswith("adam.")]
    if names != model.params.names():
        missing = sorted(set(model.params.names()) - set(names))
        extra = sorted(set(names) - set(model.params.names()))
        raise CheckpointError(f"{path}: parameter manifest mismatch (missing {missing}, unexpected {extra})")
    for p in model.params:
        arr = arrays[p.name]
        if arr.shape != p.shape:
            raise CheckpointError(f"{path}: parameter {p.name!r} has shape {list(arr.shape)}, config implies {list(p.shape)}")
        p.data = arr.copy()
    opt = None
    if header.get("optimizer") is not None:
        opt = dict(header["optimizer"])
        opt["m"] = {n[len("adam.m/") :]: a for n, a in arrays.items() if n.startswith("adam.m/")}
        opt["v"] = {n[len("adam.v/") :]: a for n, a in arrays.items() if n.startswith("adam.v/")}
    return model, opt, header.get("train_state")
