"""Canonical binary encoding of dataset graphs, and graph fingerprints.

Layout (all integers little-endian)::

    graph   := magic "FLDG" | version:u16 | node_count:u32 | node*   (pre-order)
    node    := kind:u8 | input_count:u16 | attr_count:u16 | attr*  (sorted by name)
    attr    := name:str16 | value
    str16   := len:u16 | utf8 bytes
    value   := tag:u8 | payload

Value tags::

    0 None   1 False   2 True   3 int64   4 uint64 (values >= 2**63)
    5 float64   6 bytes (u32 len)   7 str (u32 len, utf8)
    8 list (u32 count, values)   9 tuple (u32 count, values)
    10 sentinel (u8: 0 AUTOTUNE, 1 INFINITE)   11 element spec (u32 len, text)

The kind byte is the index into :data:`flowline.graph.KINDS`. Children
follow their parent in pre-order, so ``input_count`` is enough to rebuild the
tree. Encoding the same graph always yields the same bytes.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from typing import Any

from flowline.elements import ElementSpec, parse_type_spec
from flowline.errors import GraphError, MalformedInput, ValidationFailed
from flowline.graph import (
    AUTOTUNE,
    INFINITE,
    KINDS,
    SEED_ATTRS,
    Dataset,
    DatasetNode,
    build,
    coerce_graph,
    count_nodes,
)

MAGIC = b"FLDG"
FORMAT_VERSION = 1

_KIND_IDS = {k: i for i, k in enumerate(KINDS)}
_SENTINELS = (AUTOTUNE, INFINITE)

_U8 = struct.Struct("<B")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_I64 = struct.Struct("<q")
_U64 = struct.Struct("<Q")
_F64 = struct.Struct("<d")


# -- values ----------------------------------------------------------------


def encode_value(value: Any, out: bytearray) -> None:
    if value is None:
        out.append(0)
    elif value is False:
        out.append(1)
    elif value is True:
        out.append(2)
    elif isinstance(value, int):
        if -(2**63) <= value < 2**63:
            out.append(3)
            out += _I64.pack(value)
        elif 0 <= value < 2**64:
            out.append(4)
            out += _U64.pack(value)
        else:
            raise ValueError(f"integer {value} does not fit in 64 bits")
    elif isinstance(value, float):
        out.append(5)
        out += _F64.pack(value)
    elif isinstance(value, (bytes, bytearray)):
        out.append(6)
        out += _U32.pack(len(value))
        out += value
    elif isinstance(value, str):
        raw = value.encode("utf-8")
        out.append(7)
        out += _U32.pack(len(raw))
        out += raw
    elif isinstance(value, list):
        out.append(8)
        out += _U32.pack(len(value))
        for v in value:
            encode_value(v, out)
    elif isinstance(value, tuple):
        out.append(9)
        out += _U32.pack(len(value))
        for v in value:
            encode_value(v, out)
    elif value is AUTOTUNE or value is INFINITE:
        out.append(10)
        out.append(_SENTINELS.index(value))
    elif isinstance(value, ElementSpec):
        raw = str(value).encode("utf-8")
        out.append(11)
        out += _U32.pack(len(raw))
        out += raw
    else:
        raise TypeError(f"cannot encode {type(value).__name__}")


class Reader:
    """Cursor over a byte string that reports positions on failure."""

    __slots__ = ("data", "pos")

    def __init__(self, data: bytes, pos: int = 0):
        self.data = data
        self.pos = pos

    def take(self, n: int) -> bytes:
        end = self.pos + n
        if end > len(self.data):
            raise MalformedInput(self.pos, f"need {n} bytes, {len(self.data) - self.pos} left")
        chunk = self.data[self.pos:end]
        self.pos = end
        return chunk

    def unpack(self, st: struct.Struct):
        return st.unpack(self.take(st.size))[0]

    def u8(self) -> int:
        return self.unpack(_U8)

    def u16(self) -> int:
        return self.unpack(_U16)

    def u32(self) -> int:
        return self.unpack(_U32)

    def u64(self) -> int:
        return self.unpack(_U64)

    def str16(self) -> str:
        n = self.u16()
        start = self.pos
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedInput(start, f"invalid utf-8: {exc.reason}") from None

    def at_end(self) -> bool:
        return self.pos == len(self.data)


def decode_value(r: Reader, depth: int = 0) -> Any:
    if depth > 64:
        raise MalformedInput(r.pos, "values nested too deeply")
    start = r.pos
    tag = r.u8()
    if tag == 0:
        return None
    if tag == 1:
        return False
    if tag == 2:
        return True
    if tag == 3:
        return r.unpack(_I64)
    if tag == 4:
        return r.unpack(_U64)
    if tag == 5:
        return r.unpack(_F64)
    if tag == 6:
        return bytes(r.take(r.u32()))
    if tag == 7:
        n = r.u32()
        pos = r.pos
        try:
            return r.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedInput(pos, f"invalid utf-8: {exc.reason}") from None
    if tag in (8, 9):
        n = r.u32()
        if n > len(r.data) - r.pos:
            raise MalformedInput(r.pos, f"collection of {n} items exceeds remaining input")
        items = [decode_value(r, depth + 1) for _ in range(n)]
        return items if tag == 8 else tuple(items)
    if tag == 10:
        code = r.u8()
        if code >= len(_SENTINELS):
            raise MalformedInput(r.pos - 1, f"unknown sentinel {code}")
        return _SENTINELS[code]
    if tag == 11:
        n = r.u32()
        pos = r.pos
        text = r.take(n)
        try:
            return parse_type_spec(text.decode("utf-8"))
        except (UnicodeDecodeError, ValueError) as exc:
            raise MalformedInput(pos, f"bad element spec: {exc}") from None
    raise MalformedInput(start, f"unknown value tag {tag}")


def encode_element(elem: tuple) -> bytes:
    out = bytearray()
    encode_value(tuple(elem), out)
    return bytes(out)


def decode_element(data: bytes) -> tuple:
    r = Reader(data)
    value = decode_value(r)
    if not isinstance(value, tuple) or not r.at_end():
        raise MalformedInput(r.pos, "not an encoded element")
    return value


# -- graphs ----------------------------------------------------------------


def _encode_node(node: DatasetNode, out: bytearray, zero_seeds: bool) -> None:
    out += _U8.pack(_KIND_IDS[node.kind])
    out += _U16.pack(len(node.inputs))
    names = sorted(node.attrs)
    out += _U16.pack(len(names))
    for name in names:
        raw = name.encode("utf-8")
        out += _U16.pack(len(raw))
        out += raw
        value = node.attrs[name]
        if zero_seeds and name in SEED_ATTRS:
            value = 0
        encode_value(value, out)
    for child in node.inputs:
        _encode_node(child, out, zero_seeds)


def _encode_graph(graph: Dataset | DatasetNode, zero_seeds: bool) -> bytes:
    root = coerce_graph(graph)
    out = bytearray(MAGIC)
    out += _U16.pack(FORMAT_VERSION)
    out += _U32.pack(count_nodes(root))
    _encode_node(root, out, zero_seeds)
    return bytes(out)


def serialize(graph: Dataset | DatasetNode) -> bytes:
    """Canonical bytes for ``graph``; equal graphs give identical bytes."""
    return _encode_graph(graph, zero_seeds=False)


def deserialize(data: bytes) -> Dataset:
    """Inverse of :func:`serialize`.

    Raises :class:`MalformedInput` for byte-level problems and
    :class:`ValidationFailed` when the decoded graph is not valid.
    """
    r = Reader(bytes(data))
    if r.take(4) != MAGIC:
        raise MalformedInput(0, "bad magic")
    version = r.u16()
    if version != FORMAT_VERSION:
        raise MalformedInput(4, f"unsupported format version {version}")
    total = r.u32()
    if total == 0:
        raise MalformedInput(6, "graph has no nodes")
    remaining = [total]

    def read_node() -> DatasetNode:
        start = r.pos
        if remaining[0] == 0:
            raise MalformedInput(start, "more nodes than the declared count")
        remaining[0] -= 1
        kind_id = r.u8()
        if kind_id >= len(KINDS):
            raise MalformedInput(start, f"unknown kind id {kind_id}")
        kind = KINDS[kind_id]
        n_inputs = r.u16()
        n_attrs = r.u16()
        attrs = {}
        for _ in range(n_attrs):
            pos = r.pos
            name = r.str16()
            if name in attrs:
                raise MalformedInput(pos, f"duplicate attribute {name!r}")
            attrs[name] = decode_value(r)
        inputs = [read_node() for _ in range(n_inputs)]
        try:
            return build(kind, inputs, attrs)
        except GraphError as exc:
            raise ValidationFailed(exc) from exc

    root = read_node()
    if remaining[0] != 0:
        raise MalformedInput(r.pos, f"{remaining[0]} declared nodes missing")
    if not r.at_end():
        raise MalformedInput(r.pos, "trailing bytes after graph")
    return Dataset(root)


@dataclass(frozen=True)
class Fingerprint:
    digest: bytes

    @property
    def hex(self) -> str:
        return self.digest.hex()

    def __str__(self) -> str:
        return self.hex


def fingerprint(graph: Dataset | DatasetNode) -> Fingerprint:
    """SHA-256 over the canonical encoding with every seed attribute zeroed.

    UDFs are identified by name only; two registries binding different code to
    the same name produce the same fingerprint.
    """
    return Fingerprint(hashlib.sha256(_encode_graph(graph, zero_seeds=True)).digest())
