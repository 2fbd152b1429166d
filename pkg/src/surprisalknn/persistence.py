"""Versioned, digest-checked model snapshots.

Layout::

    SURPRISALKNN SNAPSHOT\\n
    version <int>\\n
    sha256 <hex digest of everything after this line>\\n
    <header JSON, one line, sorted keys>\\n
    <body: sections of (8-byte little-endian length, raw little-endian bytes)>

The header holds the schema, case metadata, hyperparameters and the
section order; the body holds the float matrices so values round-trip bit
for bit. Cases are written in ascending id order and derived caches are not
stored, so saving a loaded snapshot reproduces the file exactly.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .data import Dataset, FeatureKind, FeatureSchema
from .engine import Model
from .errors import CorruptionError
from .metric import DeviationVector, MetricConfig

MAGIC = b"SURPRISALKNN SNAPSHOT"
FORMAT_VERSION = 1
_LEN = struct.Struct("<Q")


def _schema_json(f: FeatureSchema) -> dict:
    return {
        "name": f.name,
        "kind": f.kind.value,
        "weight": f.weight,
        "levels": list(f.levels),
        "period": f.period,
        "bounds": list(f.bounds) if f.bounds is not None else None,
    }


def _schema_from(d: dict) -> FeatureSchema:
    return FeatureSchema(
        name=d["name"],
        kind=FeatureKind(d["kind"]),
        weight=d["weight"],
        levels=tuple(d["levels"]),
        period=d["period"],
        bounds=tuple(d["bounds"]) if d["bounds"] is not None else None,
    )


def to_bytes(model: Model) -> bytes:
    """Canonical serialization of a model."""
    ds = model.dataset
    order = np.argsort(ds.ids, kind="stable")
    if not np.array_equal(order, np.arange(ds.n)):
        ds = ds.subset(order)
    dev = model.deviations
    sections = [
        ("values", ds.values.astype("<f8").tobytes()),
        ("imputed", ds.imputed.astype(np.uint8).tobytes()),
        ("residuals", dev.residuals.astype("<f8").tobytes()),
        ("floor", dev.floor.astype("<f8").tobytes()),
    ]
    for j, c in enumerate(dev.confusion):
        if c is not None:
            sections.append((f"confusion:{j}", np.ascontiguousarray(c, dtype="<f8").tobytes()))
    header = {
        "schema": [_schema_json(f) for f in ds.schema],
        "symbols": [list(s) if s is not None else None for s in ds.symbols],
        "ids": [int(i) for i in ds.ids],
        "origins": list(ds.origins),
        "sessions": list(ds.sessions),
        "k": model.k,
        "alpha": model.alpha,
        "p": model.metric.p,
        "mode": model.metric.mode.value,
        "degenerate": list(dev.degenerate),
        "statistic": dev.statistic,
        "confusion_shapes": [list(c.shape) if c is not None else None for c in dev.confusion],
        "sections": [name for name, _ in sections],
    }
    body = b"".join(_LEN.pack(len(blob)) + blob for _, blob in sections)
    payload = json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n" + body
    digest = hashlib.sha256(payload).hexdigest()
    return MAGIC + b"\n" + f"version {FORMAT_VERSION}\n".encode() + f"sha256 {digest}\n".encode() + payload


def _line(data: bytes, start: int) -> tuple[bytes, int]:
    end = data.find(b"\n", start)
    if end < 0:
        raise CorruptionError("snapshot is truncated")
    return data[start:end], end + 1


def from_bytes(data: bytes) -> Model:
    """Rebuild a model, refusing any snapshot whose version or digest does not check out."""
    magic, pos = _line(data, 0)
    if magic != MAGIC:
        raise CorruptionError("not a model snapshot")
    version, pos = _line(data, pos)
    try:
        number = int(version.split(b" ", 1)[1])
    except (IndexError, ValueError):
        raise CorruptionError("malformed version line") from None
    if not version.startswith(b"version ") or number != FORMAT_VERSION:
        raise CorruptionError(f"unsupported snapshot version {version.decode(errors='replace')!r}")
    digest_line, pos = _line(data, pos)
    if not digest_line.startswith(b"sha256 "):
        raise CorruptionError("malformed digest line")
    payload = data[pos:]
    if hashlib.sha256(payload).hexdigest() != digest_line[7:].decode(errors="replace"):
        raise CorruptionError("snapshot digest mismatch (file corrupted or truncated)")
    header_raw, body_pos = _line(payload, 0)
    try:
        header = json.loads(header_raw)
        blobs = {}
        for name in header["sections"]:
            (length,) = _LEN.unpack_from(payload, body_pos)
            body_pos += _LEN.size
            blob = payload[body_pos : body_pos + length]
            if len(blob) != length:
                raise CorruptionError("snapshot body is truncated")
            blobs[name] = blob
            body_pos += length
        if body_pos != len(payload):
            raise CorruptionError("trailing bytes after snapshot body")
        schema = [_schema_from(d) for d in header["schema"]]
        n, xi = len(header["ids"]), len(schema)
        values = np.frombuffer(blobs["values"], dtype="<f8").reshape(n, xi).astype(float)
        imputed = np.frombuffer(blobs["imputed"], dtype=np.uint8).reshape(n, xi).astype(bool)
        ds = Dataset(
            schema=schema,
            values=values,
            ids=header["ids"],
            origins=tuple(header["origins"]),
            sessions=tuple(header["sessions"]),
            symbols=tuple(tuple(s) if s is not None else None for s in header["symbols"]),
            imputed=imputed,
        )
        confusion = []
        for j, shape in enumerate(header["confusion_shapes"]):
            if shape is None:
                confusion.append(None)
            else:
                confusion.append(np.frombuffer(blobs[f"confusion:{j}"], dtype="<f8").reshape(shape).astype(float))
        dev = DeviationVector(
            residuals=np.frombuffer(blobs["residuals"], dtype="<f8").astype(float),
            confusion=tuple(confusion),
            floor=np.frombuffer(blobs["floor"], dtype="<f8").astype(float),
            degenerate=tuple(header["degenerate"]),
            statistic=header["statistic"],
        )
        return Model(ds, k=header["k"], metric=MetricConfig(header["p"], header["mode"]),
                     alpha=header["alpha"], deviations=dev)
    except CorruptionError:
        raise
    except (KeyError, ValueError, TypeError, struct.error) as exc:
        raise CorruptionError(f"malformed snapshot: {exc}") from None


def save(model: Model, path) -> None:
    """Write a snapshot atomically (temporary file then rename)."""
    path = Path(path)
    data = to_bytes(model)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=".snapshot-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path) -> Model:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CorruptionError(f"cannot read snapshot {path}: {exc}") from None
    return from_bytes(data)
