"""Codec for Android binary XML (AXML), the AndroidManifest.xml encoding.

Decoding produces a node list with all string indices resolved, so edits can
move nodes between documents freely. An unmodified document re-encodes as the
original bytes; after any edit the encoder rebuilds the document canonically:
UTF-8 string pool containing only referenced strings, resource map covering
attribute names with known ids, chunk sizes recomputed.

Unknown chunk types are preserved opaquely in document order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from typing import Optional, Union

from .errors import FormatError, ValidationError

AXML_MAGIC = 0x00080003

CHUNK_STRING_POOL = 0x0001
CHUNK_XML = 0x0003
CHUNK_START_NAMESPACE = 0x0100
CHUNK_END_NAMESPACE = 0x0101
CHUNK_START_ELEMENT = 0x0102
CHUNK_END_ELEMENT = 0x0103
CHUNK_CDATA = 0x0104
CHUNK_RESOURCE_MAP = 0x0180

TYPE_REFERENCE = 0x01
TYPE_STRING = 0x03
TYPE_INT_DEC = 0x10
TYPE_INT_HEX = 0x11
TYPE_BOOLEAN = 0x12

_UTF8_FLAG = 1 << 8
_NO_INDEX = 0xFFFFFFFF

ANDROID_NS = "http://schemas.android.com/apk/res/android"

# Resource ids for the attribute names this toolkit synthesizes. Parsed
# documents contribute their own ids via the resource map chunk.
ANDROID_ATTR_IDS = {
    "theme": 0x01010000,
    "label": 0x01010001,
    "icon": 0x01010002,
    "name": 0x01010003,
    "permission": 0x01010006,
    "exported": 0x01010010,
    "authorities": 0x01010018,
    "value": 0x01010024,
    "versionCode": 0x0101021B,
    "versionName": 0x0101021C,
    "minSdkVersion": 0x0101020C,
    "targetSdkVersion": 0x01010270,
    "maxSdkVersion": 0x01010271,
    "glEsVersion": 0x01010281,
    "required": 0x0101028E,
}


@dataclass(frozen=True)
class AxmlAttribute:
    """A typed attribute; ``string`` holds the value for string attributes."""

    ns: Optional[str]
    name: str
    type: int
    data: int = 0
    string: Optional[str] = None

    @property
    def value(self):
        if self.type == TYPE_STRING:
            return self.string
        if self.type == TYPE_BOOLEAN:
            return self.data != 0
        return self.data

    @classmethod
    def of_string(cls, name, value, ns=ANDROID_NS):
        return cls(ns, name, TYPE_STRING, 0, value)

    @classmethod
    def of_int(cls, name, value, ns=ANDROID_NS):
        return cls(ns, name, TYPE_INT_DEC, value & 0xFFFFFFFF)

    @classmethod
    def of_bool(cls, name, value, ns=ANDROID_NS):
        return cls(ns, name, TYPE_BOOLEAN, 0xFFFFFFFF if value else 0)


@dataclass
class StartNamespace:
    prefix: str
    uri: str
    line: int = 1


@dataclass
class EndNamespace:
    prefix: str
    uri: str
    line: int = 1


@dataclass
class StartElement:
    ns: Optional[str]
    name: str
    attributes: list = field(default_factory=list)
    line: int = 1

    def attr(self, name: str, ns: Optional[str] = ANDROID_NS):
        for a in self.attributes:
            if a.name == name and a.ns == ns:
                return a
        return None

    def get(self, name: str, ns: Optional[str] = ANDROID_NS):
        a = self.attr(name, ns)
        return None if a is None else a.value

    def set_attr(self, attribute: AxmlAttribute) -> None:
        for i, a in enumerate(self.attributes):
            if a.name == attribute.name and a.ns == attribute.ns:
                self.attributes[i] = attribute
                return
        self.attributes.append(attribute)


@dataclass
class EndElement:
    ns: Optional[str]
    name: str
    line: int = 1


@dataclass
class CData:
    text: str
    line: int = 1


@dataclass
class RawChunk:
    data: bytes


Node = Union[StartNamespace, EndNamespace, StartElement, EndElement, CData, RawChunk]


class AxmlDocument:
    """A decoded AXML file: ordered nodes plus attribute resource ids."""

    def __init__(self, nodes, attr_resource_ids=None, raw: Optional[bytes] = None):
        self.nodes: list[Node] = list(nodes)
        self.attr_resource_ids: dict[str, int] = dict(attr_resource_ids or {})
        self._raw = raw

    def mark_dirty(self) -> None:
        self._raw = None

    def copy(self) -> "AxmlDocument":
        nodes = []
        for n in self.nodes:
            if isinstance(n, StartElement):
                nodes.append(StartElement(n.ns, n.name, list(n.attributes), n.line))
            else:
                nodes.append(replace(n) if not isinstance(n, RawChunk) else n)
        return AxmlDocument(nodes, self.attr_resource_ids, self._raw)

    def elements(self):
        for node in self.nodes:
            if isinstance(node, StartElement):
                yield node

    def to_bytes(self) -> bytes:
        return encode_axml(self)


def decode_axml(data: bytes) -> AxmlDocument:
    """Parse AXML bytes into a lossless node model."""
    if len(data) < 8 or struct.unpack_from("<I", data, 0)[0] != AXML_MAGIC:
        raise FormatError("missing AXML magic 0x00080003", 0)
    total = struct.unpack_from("<I", data, 4)[0]
    if total > len(data):
        raise FormatError("declared size exceeds input", 4)

    pool: list[str] = []
    resource_ids: list[int] = []
    nodes: list[Node] = []
    pos = 8
    while pos < total:
        if pos + 8 > total:
            raise FormatError("truncated chunk header", pos)
        ctype, header_size, size = struct.unpack_from("<HHI", data, pos)
        if size < 8 or pos + size > total:
            raise FormatError("chunk size out of range", pos)
        body = data[pos:pos + size]
        if ctype == CHUNK_STRING_POOL:
            pool = _decode_string_pool(body, pos)
        elif ctype == CHUNK_RESOURCE_MAP:
            count = (size - header_size) // 4
            resource_ids = list(struct.unpack_from("<%dI" % count, body, header_size))
        elif ctype == CHUNK_START_NAMESPACE:
            line, prefix, uri = _ns_fields(body, header_size)
            nodes.append(StartNamespace(_s(pool, prefix), _s(pool, uri), line))
        elif ctype == CHUNK_END_NAMESPACE:
            line, prefix, uri = _ns_fields(body, header_size)
            nodes.append(EndNamespace(_s(pool, prefix), _s(pool, uri), line))
        elif ctype == CHUNK_START_ELEMENT:
            nodes.append(_decode_start_element(body, header_size, pool, pos))
        elif ctype == CHUNK_END_ELEMENT:
            line = struct.unpack_from("<I", body, 8)[0]
            ns, name = struct.unpack_from("<II", body, header_size)
            nodes.append(EndElement(_opt_s(pool, ns), _s(pool, name), line))
        elif ctype == CHUNK_CDATA:
            line = struct.unpack_from("<I", body, 8)[0]
            text_idx = struct.unpack_from("<I", body, header_size)[0]
            nodes.append(CData(_s(pool, text_idx), line))
        else:
            nodes.append(RawChunk(body))
        pos += size

    attr_ids = {}
    for i, rid in enumerate(resource_ids):
        if i < len(pool):
            attr_ids[pool[i]] = rid
    return AxmlDocument(nodes, attr_ids, raw=data)


def encode_axml(doc: AxmlDocument) -> bytes:
    """Serialize; returns the original bytes if the document is untouched."""
    if doc._raw is not None:
        return doc._raw

    strings, mapped = _collect_strings(doc)
    index = {s: i for i, s in enumerate(strings)}

    def idx(s: Optional[str]) -> int:
        if s is None:
            return _NO_INDEX
        i = index.get(s)
        if i is None:
            raise ValidationError("dangling string %r" % s)
        return i

    out = bytearray()
    out += _encode_string_pool(strings)
    if mapped:
        ids = [doc.attr_resource_ids.get(s) or ANDROID_ATTR_IDS[s] for s in mapped]
        out += struct.pack("<HHI", CHUNK_RESOURCE_MAP, 8, 8 + 4 * len(ids))
        out += struct.pack("<%dI" % len(ids), *ids)

    for node in doc.nodes:
        if isinstance(node, StartNamespace):
            out += _ns_chunk(CHUNK_START_NAMESPACE, node, idx)
        elif isinstance(node, EndNamespace):
            out += _ns_chunk(CHUNK_END_NAMESPACE, node, idx)
        elif isinstance(node, StartElement):
            out += _start_element_chunk(node, idx)
        elif isinstance(node, EndElement):
            out += struct.pack("<HHIII", CHUNK_END_ELEMENT, 16, 24,
                               node.line, _NO_INDEX)
            out += struct.pack("<II", idx(node.ns), idx(node.name))
        elif isinstance(node, CData):
            out += struct.pack("<HHIII", CHUNK_CDATA, 16, 28, node.line, _NO_INDEX)
            out += struct.pack("<IHBBI", idx(node.text), 8, 0, TYPE_STRING,
                               idx(node.text))
        elif isinstance(node, RawChunk):
            out += node.data
        else:
            raise ValidationError("unknown node %r" % (node,))

    header = struct.pack("<HHI", CHUNK_XML, 8, 8 + len(out))
    return header + bytes(out)


# -- decoding internals ------------------------------------------------------

def _s(pool, i):
    if i >= len(pool):
        raise FormatError("string index %d outside pool of %d" % (i, len(pool)))
    return pool[i]


def _opt_s(pool, i):
    return None if i == _NO_INDEX else _s(pool, i)


def _ns_fields(body, header_size):
    line = struct.unpack_from("<I", body, 8)[0]
    prefix, uri = struct.unpack_from("<II", body, header_size)
    return line, prefix, uri


def _decode_start_element(body, header_size, pool, chunk_off):
    line = struct.unpack_from("<I", body, 8)[0]
    ns, name, attr_start, attr_size, attr_count = struct.unpack_from(
        "<IIHHH", body, header_size)
    attrs = []
    base = header_size + attr_start
    for i in range(attr_count):
        off = base + i * attr_size
        if off + 20 > len(body):
            raise FormatError("truncated attribute record", chunk_off + off)
        ans, aname, raw, _sz, _res0, vtype, data = struct.unpack_from(
            "<IIIHBBI", body, off)
        string = None
        if vtype == TYPE_STRING:
            string = _s(pool, data if data != _NO_INDEX else raw)
        attrs.append(AxmlAttribute(_opt_s(pool, ans), _s(pool, aname),
                                   vtype, data, string))
    return StartElement(_opt_s(pool, ns), _s(pool, name), attrs, line)


def _decode_string_pool(body, chunk_off):
    (count, style_count, flags, strings_start,
     _styles_start) = struct.unpack_from("<IIIII", body, 8)
    offsets = struct.unpack_from("<%dI" % count, body, 28)
    utf8 = bool(flags & _UTF8_FLAG)
    pool = []
    for off in offsets:
        pos = strings_start + off
        if pos >= len(body):
            raise FormatError("string offset outside pool", chunk_off + pos)
        pool.append(_decode_pool_string(body, pos, utf8))
    return pool


def _decode_pool_string(body, pos, utf8):
    if utf8:
        _, pos = _read_len8(body, pos)
        blen, pos = _read_len8(body, pos)
        return body[pos:pos + blen].decode("utf-8", "replace")
    ulen, pos = _read_len16(body, pos)
    return body[pos:pos + 2 * ulen].decode("utf-16-le", "replace")


def _read_len8(body, pos):
    v = body[pos]
    if v & 0x80:
        return ((v & 0x7F) << 8) | body[pos + 1], pos + 2
    return v, pos + 1


def _read_len16(body, pos):
    v = struct.unpack_from("<H", body, pos)[0]
    if v & 0x8000:
        lo = struct.unpack_from("<H", body, pos + 2)[0]
        return ((v & 0x7FFF) << 16) | lo, pos + 4
    return v, pos + 2


# -- encoding internals ------------------------------------------------------

def _collect_strings(doc: AxmlDocument):
    """String pool contents: resource-mapped attribute names first, by id."""
    seen: dict[str, None] = {}

    def add(s: Optional[str]):
        if s is not None and s not in seen:
            seen[s] = None

    mapped: dict[str, int] = {}
    for node in doc.nodes:
        if isinstance(node, (StartNamespace, EndNamespace)):
            add(node.prefix)
            add(node.uri)
        elif isinstance(node, StartElement):
            add(node.ns)
            add(node.name)
            for a in node.attributes:
                rid = doc.attr_resource_ids.get(a.name)
                if rid is None and a.ns == ANDROID_NS:
                    rid = ANDROID_ATTR_IDS.get(a.name)
                if rid is not None:
                    mapped.setdefault(a.name, rid)
                add(a.ns)
                add(a.name)
                if a.type == TYPE_STRING:
                    if a.string is None:
                        raise ValidationError(
                            "string attribute %r has no value" % a.name)
                    add(a.string)
        elif isinstance(node, EndElement):
            add(node.ns)
            add(node.name)
        elif isinstance(node, CData):
            add(node.text)

    mapped_names = sorted(mapped, key=lambda s: mapped[s])
    rest = [s for s in seen if s not in mapped]
    # Record ids on the document so they survive further edit cycles.
    for name, rid in mapped.items():
        doc.attr_resource_ids.setdefault(name, rid)
    return mapped_names + rest, mapped_names


def _encode_string_pool(strings) -> bytes:
    blobs = []
    offsets = []
    pos = 0
    for s in strings:
        offsets.append(pos)
        raw = s.encode("utf-8")
        ulen = sum(2 if ord(c) > 0xFFFF else 1 for c in s)
        blob = _len8(ulen) + _len8(len(raw)) + raw + b"\x00"
        blobs.append(blob)
        pos += len(blob)
    data = b"".join(blobs)
    if len(data) % 4:
        data += b"\x00" * (4 - len(data) % 4)
    strings_start = 28 + 4 * len(strings)
    size = strings_start + len(data)
    head = struct.pack("<HHIIIIII", CHUNK_STRING_POOL, 28, size,
                       len(strings), 0, _UTF8_FLAG, strings_start, 0)
    return head + struct.pack("<%dI" % len(strings), *offsets) + data


def _len8(n: int) -> bytes:
    if n > 0x7FFF:
        raise ValidationError("string too long for pool encoding")
    if n > 0x7F:
        return bytes([(n >> 8) | 0x80, n & 0xFF])
    return bytes([n])


def _ns_chunk(ctype, node, idx) -> bytes:
    return struct.pack("<HHIII", ctype, 16, 24, node.line, _NO_INDEX) + \
        struct.pack("<II", idx(node.prefix), idx(node.uri))


def _start_element_chunk(node: StartElement, idx) -> bytes:
    size = 36 + 20 * len(node.attributes)
    out = struct.pack("<HHIII", CHUNK_START_ELEMENT, 16, size,
                      node.line, _NO_INDEX)
    out += struct.pack("<IIHHHHHH", idx(node.ns), idx(node.name),
                       20, 20, len(node.attributes), 0, 0, 0)
    for a in node.attributes:
        if a.type == TYPE_STRING:
            data = idx(a.string)
            raw = data
        else:
            data = a.data & 0xFFFFFFFF
            raw = _NO_INDEX
        out += struct.pack("<IIIHBBI", idx(a.ns), idx(a.name), raw,
                           8, 0, a.type, data)
    return out
