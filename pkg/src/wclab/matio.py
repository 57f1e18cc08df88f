"""Bit-exact matrix container and experiment manifest.

MTX1 file layout (little-endian, fixed regardless of host byte order):

    bytes 0-3    magic "MTX1"
    bytes 4-7    rows, unsigned 32-bit
    bytes 8-11   cols, unsigned 32-bit
    bytes 12-    rows*cols float64 values, row-major

File length must be exactly 12 + 8*rows*cols. Round trips are bit-identical
for every finite payload, including signed zeros and subnormals.

The manifest is a JSON document:

    {"layers": [{"name": ..., "before_path": ..., "after_path": ...}, ...],
     "metadata": {...}}

after_path is optional per layer; paths are resolved relative to the
manifest's directory. Loading validates everything (files exist, parse,
and before/after shapes match) before returning, so it fails atomically.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    ManifestError,
    MatrixFileError,
    NonFinitePayloadError,
    ShapeError,
    SizeMismatchError,
    TruncatedFileError,
)
from .linalg import as_matrix

logger = logging.getLogger(__name__)

MAGIC = b"MTX1"
_HEADER = struct.Struct("<4sII")


def write_matrix(path, m) -> None:
    """Write one matrix; the payload is the exact float64 bit pattern."""
    arr = as_matrix(m)
    rows, cols = arr.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, rows, cols))
        f.write(arr.astype("<f8", copy=False).tobytes(order="C"))


def read_matrix(path) -> np.ndarray:
    """Read one matrix, validating magic, length, and finiteness."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise TruncatedFileError(f"{path}: only {len(data)} bytes, header needs 12")
    magic, rows, cols = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: magic {magic!r} is not {MAGIC!r}")
    if rows < 1 or cols < 1:
        raise SizeMismatchError(f"{path}: non-positive dimensions {rows}x{cols}")
    expected = _HEADER.size + 8 * rows * cols
    if len(data) < expected:
        raise TruncatedFileError(
            f"{path}: {len(data)} bytes, expected {expected} for {rows}x{cols}"
        )
    if len(data) > expected:
        raise SizeMismatchError(
            f"{path}: {len(data)} bytes, expected exactly {expected} for {rows}x{cols}"
        )
    arr = np.frombuffer(data, dtype="<f8", offset=_HEADER.size)
    arr = arr.reshape(rows, cols).astype(np.float64, copy=True)
    if not np.isfinite(arr).all():
        raise NonFinitePayloadError(f"{path}: payload contains NaN or Inf")
    return arr


@dataclass(frozen=True)
class ManifestLayer:
    name: str
    before_path: str
    after_path: str | None
    before: np.ndarray
    after: np.ndarray | None


@dataclass(frozen=True)
class Manifest:
    layers: tuple[ManifestLayer, ...]
    metadata: dict = field(default_factory=dict)


def load_manifest(path) -> Manifest:
    """Load and fully validate a manifest; no partial result on any error."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("layers"), list):
        raise ManifestError(f"manifest {path} must be an object with a 'layers' list")
    metadata = doc.get("metadata", {})
    if not isinstance(metadata, dict):
        raise ManifestError(f"manifest {path}: 'metadata' must be an object")
    base = path.parent
    layers = []
    seen = set()
    for i, entry in enumerate(doc["layers"]):
        if not isinstance(entry, dict) or "name" not in entry or "before_path" not in entry:
            raise ManifestError(f"layer {i}: needs 'name' and 'before_path'")
        name = entry["name"]
        if name in seen:
            raise ManifestError(f"duplicate layer name {name!r}")
        seen.add(name)
        before_path = str(base / entry["before_path"])
        try:
            before = read_matrix(before_path)
        except (OSError, MatrixFileError) as exc:
            raise ManifestError(f"layer {name!r}: before file failed to load: {exc}") from exc
        after_path = None
        after = None
        if entry.get("after_path") is not None:
            after_path = str(base / entry["after_path"])
            try:
                after = read_matrix(after_path)
            except (OSError, MatrixFileError) as exc:
                raise ManifestError(f"layer {name!r}: after file failed to load: {exc}") from exc
            if after.shape != before.shape:
                raise ManifestError(
                    f"layer {name!r}: shape mismatch {before.shape} vs {after.shape}"
                )
        layers.append(ManifestLayer(name, before_path, after_path, before, after))
    return Manifest(layers=tuple(layers), metadata=dict(metadata))


def delta_pairs(manifest: Manifest) -> list[tuple[str, np.ndarray]]:
    """(name, after - before) per layer, in manifest order.

    Layers without an after file are skipped with a notice.
    """
    pairs = []
    for layer in manifest.layers:
        if layer.after is None:
            logger.info("layer %r has no after file; skipped", layer.name)
            continue
        if layer.after.shape != layer.before.shape:
            raise ShapeError(f"layer {layer.name!r}: before/after shapes differ")
        pairs.append((layer.name, layer.after - layer.before))
    return pairs
