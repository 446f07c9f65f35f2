"""Named-array archive used for checkpoints.

An archive is an uncompressed ``.npz`` holding one array per name plus a
``__manifest__`` entry with a JSON document (format version, spec fields,
scalar state). Arrays keep their dtype, so float32 payloads round-trip
bit-exactly.
"""
from __future__ import annotations

import json
import zipfile
from pathlib import Path

import numpy as np

from .errors import IoFailure, VersionMismatch

FORMAT = "mpgan-archive"
VERSION = 1
_MANIFEST_KEY = "__manifest__"


def save_archive(path, arrays: dict[str, np.ndarray], manifest: dict) -> None:
    doc = {"format": FORMAT, "version": VERSION, **manifest}
    payload = {name: np.asarray(a) for name, a in arrays.items()}
    if _MANIFEST_KEY in payload:
        raise ValueError(f"array name {_MANIFEST_KEY!r} is reserved")
    payload[_MANIFEST_KEY] = np.array(json.dumps(doc, sort_keys=True))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            np.savez(fh, **payload)
        tmp.replace(path)
    except OSError as exc:
        raise IoFailure(f"cannot write archive {path}: {exc}") from exc


def load_archive(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise IoFailure(f"no such archive: {path}")
    try:
        with np.load(path, allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
    except (OSError, ValueError, zipfile.BadZipFile, EOFError) as exc:
        raise VersionMismatch(f"{path} is not a readable archive: {exc}") from exc
    raw = arrays.pop(_MANIFEST_KEY, None)
    if raw is None:
        raise VersionMismatch(f"{path} has no manifest")
    try:
        manifest = json.loads(str(raw))
    except json.JSONDecodeError as exc:
        raise VersionMismatch(f"{path}: manifest is not valid JSON") from exc
    if manifest.get("format") != FORMAT or manifest.get("version") != VERSION:
        raise VersionMismatch(
            f"{path}: expected {FORMAT} v{VERSION}, found "
            f"{manifest.get('format')} v{manifest.get('version')}"
        )
    return arrays, manifest
