"""Checkpoint files: JSON header line + ordered FSTN parameter records +
a trailing content digest.

Layout:
  line 1   JSON object {"format_version", "config", "step", "params"}
           (config keys sorted; params lists the record names in file order)
  bytes    one FSTN record per parameter, in header order
  trailer  b"SHA256:" + 64 hex chars of the digest over everything before it

Loading verifies the digest before touching any payload, so a flipped byte
anywhere in the file is rejected.
"""
from __future__ import annotations

import hashlib
import json

import numpy as np

from . import fstn

FORMAT_VERSION = 1
_TRAILER_TAG = b"SHA256:"
_TRAILER_LEN = len(_TRAILER_TAG) + 64


class CheckpointError(ValueError):
    pass


def dumps(params: list[tuple[str, np.ndarray]], config: dict, step: int) -> bytes:
    header = {
        "format_version": FORMAT_VERSION,
        "config": config,
        "step": int(step),
        "params": [name for name, _ in params],
    }
    body = json.dumps(header, sort_keys=True).encode() + b"\n"
    for _, arr in params:
        body += fstn.dumps(np.asarray(arr))
    return body + _TRAILER_TAG + hashlib.sha256(body).hexdigest().encode()


def loads(buf: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(buf) < _TRAILER_LEN + 2:
        raise CheckpointError("checkpoint truncated")
    body, trailer = buf[:-_TRAILER_LEN], buf[-_TRAILER_LEN:]
    if not trailer.startswith(_TRAILER_TAG):
        raise CheckpointError("checkpoint trailer missing")
    if hashlib.sha256(body).hexdigest().encode() != trailer[len(_TRAILER_TAG):]:
        raise CheckpointError("checkpoint digest mismatch")
    nl = body.index(b"\n")
    try:
        header = json.loads(body[:nl].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"unreadable checkpoint header: {e}") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unknown checkpoint format version {header.get('format_version')!r}")
    arrays: dict[str, np.ndarray] = {}
    offset = nl + 1
    for name in header["params"]:
        arr, offset = fstn.loads(body, offset)
        arrays[name] = arr
    if offset != len(body):
        raise CheckpointError("trailing bytes after final parameter record")
    return header, arrays


def save(path: str, model, config: dict, step: int) -> None:
    params = [(n, p.data) for n, p in model.parameters()]
    with open(path, "wb") as fh:
        fh.write(dumps(params, config, step))


def load(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        return loads(fh.read())


def restore(model, path: str) -> dict:
    """Load a checkpoint into an existing model, verifying structure.

    Any missing/extra parameter or shape difference raises CheckpointError
    naming the offending entry.  Returns the checkpoint header.
    """
    header, arrays = load(path)
    own = dict((n, p) for n, p in model.parameters())
    for name in own:
        if name not in arrays:
            raise CheckpointError(f"structural mismatch: checkpoint is missing parameter {name!r}")
    for name in arrays:
        if name not in own:
            raise CheckpointError(f"structural mismatch: unexpected parameter {name!r} in checkpoint")
    for name, p in own.items():
        if arrays[name].shape != p.data.shape:
            raise CheckpointError(
                f"structural mismatch at {name!r}: checkpoint shape {arrays[name].shape}, "
                f"model shape {p.data.shape}")
        p.data[...] = arrays[name]
    return header


def build_model(path: str):
    """Construct the model a checkpoint describes and load its weights."""
    from .config import RunConfig, _apply
    header, _ = load(path)
    cfg_dict = header["config"]
    cfg = RunConfig()
    for section, items in cfg_dict.items():
        if not isinstance(items, dict):
            continue  # scalar entries such as the run seed
        for key, value in items.items():
            _apply(cfg, section, key, str(value))
    from .model import Model
    model = Model(cfg.model_config(), seed=int(cfg_dict.get("seed", 0)))
    restore(model, path)
    return model, cfg, header
