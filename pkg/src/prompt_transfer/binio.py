"""Shared binary container used by model, prompt and projector files.

Layout (all integers little-endian)::

    magic       8 bytes
    version     uint16
    header_len  uint32
    header      canonical JSON, utf-8
    payload     concatenated little-endian float64 blocks

The header lists every block's name and shape plus a SHA-256 taken over the
rest of the header and the payload, so truncation and bit flips anywhere after
the version field surface as :class:`CorruptFileError`.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import CorruptFileError, UnsupportedFormatError, UnsupportedVersionError

_PREFIX = struct.Struct("<8sHI")


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True, allow_nan=False)


def sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _digest(header: dict, payload: bytes) -> str:
    return sha256(canonical_json(header).encode("utf-8") + payload)


def pack(magic: bytes, version: int, header: dict, blocks: dict[str, np.ndarray]) -> bytes:
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    arrays = [np.ascontiguousarray(a, dtype="<f8") for a in blocks.values()]
    payload = b"".join(a.tobytes() for a in arrays)
    header = dict(header)
    header["blocks"] = [{"name": k, "shape": list(a.shape)} for k, a in zip(blocks, arrays)]
    header.pop("sha256", None)
    header["sha256"] = _digest(header, payload)
    head = canonical_json(header).encode("utf-8")
    return _PREFIX.pack(magic, version, len(head)) + head + payload


def unpack(raw: bytes, magic: bytes, versions: set[int]) -> tuple[dict, dict[str, np.ndarray]]:
    if len(raw) < _PREFIX.size:
        if raw[: len(magic)] != magic[: len(raw)] or not raw:
            raise UnsupportedFormatError("file too short to carry a header")
        raise CorruptFileError(f"truncated header ({len(raw)} bytes)")
    got_magic, version, head_len = _PREFIX.unpack_from(raw)
    if got_magic != magic:
        raise UnsupportedFormatError(f"unexpected magic bytes {got_magic!r}, expected {magic!r}")
    if version not in versions:
        raise UnsupportedVersionError(f"format version {version} is not supported (known: {sorted(versions)})")
    start = _PREFIX.size
    if len(raw) < start + head_len:
        raise CorruptFileError("truncated header")
    head = raw[start : start + head_len]
    try:
        header = json.loads(head.decode("utf-8"))
        layout = [(b["name"], tuple(int(s) for s in b["shape"])) for b in header["blocks"]]
        expected_digest = header.pop("sha256")
        canonical = canonical_json({**header, "sha256": expected_digest}).encode("utf-8")
    except (ValueError, KeyError, TypeError, AttributeError) as exc:
        raise CorruptFileError(f"unreadable header: {exc}") from None
    if canonical != head:
        raise CorruptFileError("header is not in canonical form")
    payload = raw[start + head_len :]
    need = 8 * sum(int(np.prod(shape)) for _, shape in layout)
    if len(payload) != need:
        raise CorruptFileError(f"payload is {len(payload)} bytes, header promises {need}")
    if _digest(header, payload) != expected_digest:
        raise CorruptFileError("content digest mismatch")
    blocks = {}
    offset = 0
    for name, shape in layout:
        count = int(np.prod(shape))
        blocks[name] = np.frombuffer(payload, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape)
        offset += 8 * count
    return header, blocks


def write_file(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def read_file(path: str | Path) -> bytes:
    return Path(path).read_bytes()
