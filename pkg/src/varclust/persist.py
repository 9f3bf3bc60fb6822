"""Checkpoint persistence: an npz parameter blob plus a JSON sidecar manifest.

The manifest records the architecture, seed, iteration count, and a sha256 of
the blob; loading re-hashes the blob so truncation or tampering surfaces as an
integrity error. Writes are atomic (temp file then rename).
"""
from __future__ import annotations

import hashlib
import io
import json
import os
from pathlib import Path

import numpy as np

from .errors import IntegrityError

MANIFEST_FORMAT = "varclust-checkpoint"
MANIFEST_VERSION = 1


def _paths(base) -> tuple[Path, Path]:
    base = Path(base)
    if base.suffix in (".npz", ".json"):
        base = base.with_suffix("")
    return base.with_suffix(".npz"), base.with_suffix(".json")


def _atomic_write(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def write_blob(base, arrays: dict[str, np.ndarray], manifest: dict) -> Path:
    """Write arrays and a manifest describing them; returns the blob path."""
    blob_path, manifest_path = _paths(base)
    buf = io.BytesIO()
    np.savez(buf, **{k: arrays[k] for k in sorted(arrays)})
    payload = buf.getvalue()
    record = dict(manifest)
    record["format"] = MANIFEST_FORMAT
    record["version"] = MANIFEST_VERSION
    record["sha256"] = hashlib.sha256(payload).hexdigest()
    blob_path.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write(blob_path, payload)
    _atomic_write(manifest_path,
                  json.dumps(record, indent=2, sort_keys=True).encode() + b"\n")
    return blob_path


def read_blob(base) -> tuple[dict[str, np.ndarray], dict]:
    """Read arrays and manifest, verifying the recorded content hash."""
    blob_path, manifest_path = _paths(base)
    if not blob_path.exists() or not manifest_path.exists():
        raise IntegrityError(f"checkpoint {blob_path} or its manifest is missing")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise IntegrityError(f"corrupt manifest {manifest_path}: {exc}") from exc
    if manifest.get("format") != MANIFEST_FORMAT:
        raise IntegrityError(f"{manifest_path} is not a checkpoint manifest")
    payload = blob_path.read_bytes()
    digest = hashlib.sha256(payload).hexdigest()
    if digest != manifest.get("sha256"):
        raise IntegrityError(
            f"checkpoint {blob_path} fails its hash check (truncated or modified)")
    with np.load(io.BytesIO(payload)) as npz:
        arrays = {k: npz[k] for k in npz.files}
    return arrays, manifest
