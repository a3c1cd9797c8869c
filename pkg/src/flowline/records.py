"""Length-prefixed record files read by ``from_file`` sources.

Each record is ``[u32 little-endian payload length][payload]``; a file is a
plain concatenation of records with no header or checksums.
"""

from __future__ import annotations

import os
import struct
from typing import BinaryIO, Iterable

from flowline.errors import RecordFormatError

_LEN = struct.Struct("<I")


def write_records(path: str | os.PathLike, payloads: Iterable[bytes]) -> int:
    count = 0
    with open(path, "wb") as f:
        for p in payloads:
            f.write(_LEN.pack(len(p)))
            f.write(p)
            count += 1
    return count


class RecordReader:
    """Sequential reader that can resume from a byte offset."""

    def __init__(self, path: str, offset: int = 0):
        self.path = path
        self._f: BinaryIO = open(path, "rb")
        self._f.seek(offset)
        self.offset = offset

    def read(self) -> bytes | None:
        header = self._f.read(_LEN.size)
        if not header:
            return None
        if len(header) < _LEN.size:
            raise RecordFormatError(f"{self.path}: truncated length prefix at byte {self.offset}")
        (n,) = _LEN.unpack(header)
        payload = self._f.read(n)
        if len(payload) < n:
            raise RecordFormatError(f"{self.path}: truncated record at byte {self.offset}")
        self.offset += _LEN.size + n
        return payload

    def close(self) -> None:
        self._f.close()

    def __iter__(self):
        while (rec := self.read()) is not None:
            yield rec


def read_records(path: str) -> list[bytes]:
    r = RecordReader(path)
    try:
        return list(r)
    finally:
        r.close()
