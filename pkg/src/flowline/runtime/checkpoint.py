"""Checkpoint blob encoding.

Layout (little-endian)::

    blob    := magic "FLCK" | version:u16 | fingerprint:32 bytes | count:u32 | record* | crc32:u32
    record  := key:str16 | length:u32 | value (graph value encoding)

Each record holds ``(end_of_sequence, state)`` for one live iterator,
keyed by its instance key (``0``, ``0.0``, ``0.1/s0/0`` ...). The trailing
CRC-32 covers every preceding byte.
"""

from __future__ import annotations

import struct
import zlib
from typing import Any

from flowline.errors import CorruptBlob, FingerprintMismatch, MalformedInput, VersionMismatch
from flowline.serialization import Reader, decode_value, encode_value

MAGIC = b"FLCK"
VERSION = 1

_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")


def encode_blob(fingerprint: bytes, states: dict[str, Any]) -> bytes:
    out = bytearray(MAGIC)
    out += _U16.pack(VERSION)
    out += fingerprint
    out += _U32.pack(len(states))
    for key in sorted(states):
        raw = key.encode("utf-8")
        out += _U16.pack(len(raw))
        out += raw
        value = bytearray()
        encode_value(states[key], value)
        out += _U32.pack(len(value))
        out += value
    out += _U32.pack(zlib.crc32(out))
    return bytes(out)


def decode_blob(blob: bytes, expected_fingerprint: bytes | None = None) -> dict[str, Any]:
    """Parse and verify a blob; optionally check it belongs to a given graph."""
    blob = bytes(blob)
    if len(blob) < 4 + 2 + 32 + 4 + 4 or blob[:4] != MAGIC:
        raise CorruptBlob("not a checkpoint blob")
    (version,) = _U16.unpack_from(blob, 4)
    if version != VERSION:
        raise VersionMismatch(f"checkpoint version {version}, this runtime reads {VERSION}")
    body, (crc,) = blob[:-4], _U32.unpack_from(blob, len(blob) - 4)
    if zlib.crc32(body) != crc:
        raise CorruptBlob("checksum mismatch")
    fp = body[6:38]
    if expected_fingerprint is not None and fp != expected_fingerprint:
        raise FingerprintMismatch(f"checkpoint was taken from graph {fp.hex()[:16]}…, "
                                  f"not {expected_fingerprint.hex()[:16]}…")
    r = Reader(body, 38)
    states: dict[str, Any] = {}
    try:
        for _ in range(r.u32()):
            key = r.str16()
            n = r.u32()
            end = r.pos + n
            states[key] = decode_value(r)
            if r.pos != end:
                raise CorruptBlob(f"record {key!r} length mismatch")
        if not r.at_end():
            raise CorruptBlob("trailing bytes")
    except MalformedInput as exc:
        raise CorruptBlob(f"bad record: {exc}") from exc
    return states


def blob_fingerprint(blob: bytes) -> bytes:
    return bytes(blob[6:38])
