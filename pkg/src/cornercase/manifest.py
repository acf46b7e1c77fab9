"""Run manifests: the resolved configuration plus content hashes of inputs and outputs."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .datasets import to_uint8
from .exceptions import CornerCaseError

MANIFEST = "manifest.json"
VERSION = 1


class ManifestError(CornerCaseError):
    pass


def blob_sha1(data: bytes) -> str:
    """Hash of ``data`` as git stores it (``git hash-object``)."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def hash_path(path) -> dict[str, str]:
    """Blob hashes of a file, or of every file below a directory keyed by relative path."""
    p = Path(path)
    if p.is_file():
        return {p.name: blob_sha1(p.read_bytes())}
    return {
        str(f.relative_to(p)): blob_sha1(f.read_bytes())
        for f in sorted(p.rglob("*")) if f.is_file() and f.name != MANIFEST
    }


def hash_arrays(*arrays) -> str:
    """Hash of in-memory images/labels, used for builtin datasets that have no files."""
    h = hashlib.sha1()
    for a in arrays:
        a = np.asarray(a)
        a = to_uint8(a) if a.dtype.kind == "f" else a.astype("<i8")
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def write_manifest(directory, command: str, config: dict, inputs: dict, outputs: dict | None = None) -> Path:
    path = Path(directory) / MANIFEST
    path.parent.mkdir(parents=True, exist_ok=True)
    body = {
        "version": VERSION,
        "command": command,
        "config": config,
        "inputs": inputs,
        "outputs": outputs or {},
    }
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(path) -> dict:
    p = Path(path)
    if p.is_dir():
        p = p / MANIFEST
    try:
        body = json.loads(p.read_text())
    except (OSError, ValueError) as exc:
        raise ManifestError(f"cannot read manifest {p}: {exc}") from None
    for key in ("command", "config", "inputs"):
        if key not in body:
            raise ManifestError(f"manifest {p} lacks {key!r}")
    return body
