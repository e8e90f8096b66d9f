"""Binary checkpoint format.

Layout::

    b"TOPOCKPT"                      magic
    uint64 little-endian             manifest length in bytes
    manifest                         UTF-8 JSON
    payload                          little-endian float64, tensors in declaration order

The manifest records the format version, model variant and config, each
tensor's name/shape/offset (in float64 elements) and a SHA-256 of the
payload.  An ``extra`` object carries run metadata such as normalization
statistics.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, IntegrityError
from .models import SequenceRegressor, build_model, config_to_dict, make_config

MAGIC = b"TOPOCKPT"
FORMAT_VERSION = 1
_DTYPE = np.dtype("<f8")


def save_checkpoint(model: SequenceRegressor, path, extra: dict | None = None) -> Path:
    path = Path(path)
    tensors, chunks, offset = [], [], 0
    for name, p in model.named_parameters():
        tensors.append({"name": name, "shape": list(p.shape), "offset": offset})
        chunks.append(np.ascontiguousarray(p.data, dtype=_DTYPE).tobytes())
        offset += p.size
    payload = b"".join(chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "variant": model.variant,
        "config": config_to_dict(model.config),
        "tensors": tensors,
        "payload_floats": offset,
        "checksum": "sha256:" + hashlib.sha256(payload).hexdigest(),
        "extra": extra or {},
    }
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(payload)
    os.replace(tmp, path)
    return path


def _read(path) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    start = len(MAGIC) + 8
    if len(raw) < start:
        raise IntegrityError(f"{path}: truncated header")
    (header_len,) = struct.unpack("<Q", raw[len(MAGIC):start])
    if len(raw) < start + header_len:
        raise IntegrityError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable manifest: {exc}") from None
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: format version {version} is not supported (expected {FORMAT_VERSION})")
    return manifest, raw[start + header_len:]


def read_manifest(path) -> dict:
    return _read(path)[0]


def load_checkpoint(path, expected_variant: str | None = None, expected_config=None) -> SequenceRegressor:
    """Rebuild a model from ``path``, verifying integrity and, optionally, its identity."""
    manifest, payload = _read(path)
    expected_bytes = manifest["payload_floats"] * _DTYPE.itemsize
    if len(payload) != expected_bytes:
        raise IntegrityError(f"{path}: payload has {len(payload)} bytes, manifest declares {expected_bytes}")
    digest = "sha256:" + hashlib.sha256(payload).hexdigest()
    if digest != manifest["checksum"]:
        raise IntegrityError(f"{path}: checksum mismatch ({digest} != {manifest['checksum']})")
    variant = manifest["variant"]
    if expected_variant is not None and variant != expected_variant:
        raise FormatError(f"{path}: checkpoint variant {variant!r} != expected {expected_variant!r}")
    try:
        config = make_config(variant, manifest["config"])
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{path}: manifest config is not valid for {variant!r}: {exc}") from None
    if expected_config is not None:
        wanted = make_config(variant, expected_config)
        if wanted != config:
            raise FormatError(
                f"{path}: checkpoint config {config_to_dict(config)} does not match "
                f"expected config {config_to_dict(wanted)}")
    model = build_model(variant, config)
    values = np.frombuffer(payload, dtype=_DTYPE)
    params = dict(model.named_parameters())
    declared = [t["name"] for t in manifest["tensors"]]
    if declared != list(params):
        raise FormatError(f"{path}: tensor names do not match the {variant} layout")
    for entry in manifest["tensors"]:
        p = params[entry["name"]]
        shape = tuple(entry["shape"])
        if shape != p.shape:
            raise FormatError(f"{path}: tensor {entry['name']} has shape {shape}, model expects {p.shape}")
        start = entry["offset"]
        p.data = values[start:start + p.size].reshape(shape).astype(np.float64)
    model.manifest = manifest
    return model
