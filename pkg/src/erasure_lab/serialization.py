"""Versioned, checksummed JSON documents holding named float arrays."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

FORMAT = "erasure-lab"
FORMAT_VERSION = 1


class ModelFileError(ValueError):
    """A model document is unreadable, of the wrong kind or version, or corrupted."""


def encode_array(a: np.ndarray) -> dict:
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "values": " ".join(format(float(v), ".17g") for v in a.reshape(-1))}


def decode_array(d: dict) -> np.ndarray:
    text = d["values"].split()
    values = np.array([float(v) for v in text], dtype=np.float64)
    shape = tuple(int(s) for s in d["shape"])
    if values.size != int(np.prod(shape, dtype=np.int64)):
        raise ModelFileError(f"array of shape {shape} holds {values.size} values")
    return values.reshape(shape)


def _canonical(doc: dict) -> bytes:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode()


def checksum(doc: dict) -> str:
    body = {k: v for k, v in doc.items() if k != "checksum"}
    return "sha256:" + hashlib.sha256(_canonical(body)).hexdigest()


def dumps(kind: str, body: dict) -> str:
    doc = {"format": FORMAT, "format_version": FORMAT_VERSION, "kind": kind, **body}
    doc["checksum"] = checksum(doc)
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def loads(text: str, kind: str) -> dict:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFileError(f"not a JSON document: {exc}") from None
    if not isinstance(doc, dict) or doc.get("format") != FORMAT:
        raise ModelFileError("not an erasure-lab document")
    if doc.get("format_version") != FORMAT_VERSION:
        raise ModelFileError(
            f"format version {doc.get('format_version')!r} is not supported (expected {FORMAT_VERSION})"
        )
    if doc.get("kind") != kind:
        raise ModelFileError(f"document kind is {doc.get('kind')!r}, expected {kind!r}")
    if doc.get("checksum") != checksum(doc):
        raise ModelFileError("checksum mismatch: the file was modified or truncated")
    return doc


def write(path, kind: str, body: dict) -> None:
    Path(path).write_text(dumps(kind, body), encoding="utf-8")


def read(path, kind: str) -> dict:
    return loads(Path(path).read_text(encoding="utf-8"), kind)
