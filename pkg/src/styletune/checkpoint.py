"""Versioned single-file checkpoint container.

Layout: magic, format version (int64 LE), header length (uint64 LE),
JSON header, then tensor records in header order using the tensor binary
format. The header stores the encoder config, a provenance/meta block,
the tensor index with parameter-group tags, and a sha256 of the payload
so corruption is detected before any tensor is deserialized.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

from .encoders import EncoderConfig
from .errors import CompatibilityError, IntegrityError
from .tensor import Tensor, _read_tensor_record, tensor_to_bytes

CHECKPOINT_MAGIC = b"STCK"
CHECKPOINT_VERSION = 1


def backbone_checksum(params: dict[str, Tensor], group_of: dict[str, str] | None = None) -> str:
    """sha256 over the backbone tensors in sorted-name order."""
    h = hashlib.sha256()
    for name in sorted(params):
        if group_of is not None and group_of.get(name, "backbone") != "backbone":
            continue
        h.update(name.encode())
        h.update(tensor_to_bytes(params[name]))
    return h.hexdigest()


def save_checkpoint(
    path: str | os.PathLike,
    kind: str,
    config: EncoderConfig,
    tensors: dict[str, Tensor],
    groups: dict[str, str],
    meta: dict,
):
    names = sorted(tensors)
    payload = b"".join(tensor_to_bytes(tensors[n]) for n in names)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "kind": kind,
        "encoder_config": config.to_dict(),
        "meta": meta,
        "tensors": [{"name": n, "group": groups.get(n, "backbone")} for n in names],
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    raw_header = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<q", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(raw_header)))
        fh.write(raw_header)
        fh.write(payload)


def load_checkpoint(path: str | os.PathLike):
    """Returns (kind, config, tensors, groups, meta)."""
    path = Path(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 20 or raw[:4] != CHECKPOINT_MAGIC:
        raise IntegrityError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<q", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise CompatibilityError(
            f"{path}: checkpoint format version {version} not supported (expected {CHECKPOINT_VERSION})"
        )
    (header_len,) = struct.unpack("<Q", raw[12:20])
    if len(raw) < 20 + header_len:
        raise IntegrityError(f"{path}: truncated header")
    try:
        header = json.loads(raw[20 : 20 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise IntegrityError(f"{path}: unreadable header: {e}") from e
    payload = raw[20 + header_len :]
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise IntegrityError(f"{path}: payload checksum mismatch")
    tensors: dict[str, Tensor] = {}
    groups: dict[str, str] = {}
    view = memoryview(payload)
    for entry in header["tensors"]:
        t, view = _read_tensor_record(view, f"{path}:{entry['name']}")
        tensors[entry["name"]] = t
        groups[entry["name"]] = entry["group"]
    if len(view) != 0:
        raise IntegrityError(f"{path}: {len(view)} trailing payload bytes")
    config = EncoderConfig.from_dict(header["encoder_config"])
    return header["kind"], config, tensors, groups, header["meta"]


def checkpoint_bytes_equal(a: str | os.PathLike, b: str | os.PathLike) -> bool:
    return Path(a).read_bytes() == Path(b).read_bytes()
