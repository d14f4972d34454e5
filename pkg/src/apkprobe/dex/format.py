"""DEX file parsing, in-place editing substrate, and header repair.

The model keeps the raw bytes alongside a structural index. Edits that this
toolkit performs (method stubbing) never move anything, so offsets stay valid
and an unmodified file re-encodes byte-identically. ``repair_header``
recomputes the SHA-1 signature and adler32 checksum after a mutation.

Reads v035 through v039; files this toolkit writes are v035.
"""

from __future__ import annotations

import hashlib
import struct
import zlib
from dataclasses import dataclass, field
from typing import Optional

from ..errors import FormatError

NO_INDEX = 0xFFFFFFFF

ACC_PUBLIC = 0x1
ACC_PRIVATE = 0x2
ACC_PROTECTED = 0x4
ACC_STATIC = 0x8
ACC_FINAL = 0x10
ACC_NATIVE = 0x100
ACC_ABSTRACT = 0x400
ACC_CONSTRUCTOR = 0x10000

OP_NOP = 0x00
OP_RETURN_VOID = 0x0E
OP_RETURN = 0x0F
OP_RETURN_WIDE = 0x10
OP_RETURN_OBJECT = 0x11
OP_CONST_4 = 0x12
OP_CONST_16 = 0x13
OP_CONST_WIDE_16 = 0x16
OP_CONST_STRING = 0x1A
OP_CONST_STRING_JUMBO = 0x1B
OP_NEW_INSTANCE = 0x22

INVOKE_OPS = tuple(range(0x6E, 0x73))          # virtual/super/direct/static/interface
INVOKE_RANGE_OPS = tuple(range(0x74, 0x79))
IGET_IPUT_OPS = tuple(range(0x52, 0x60))
SGET_SPUT_OPS = tuple(range(0x60, 0x6E))

MAP_HEADER = 0x0000
MAP_STRING_ID = 0x0001
MAP_TYPE_ID = 0x0002
MAP_PROTO_ID = 0x0003
MAP_FIELD_ID = 0x0004
MAP_METHOD_ID = 0x0005
MAP_CLASS_DEF = 0x0006
MAP_MAP_LIST = 0x1000
MAP_TYPE_LIST = 0x1001
MAP_CLASS_DATA = 0x2000
MAP_CODE_ITEM = 0x2001
MAP_STRING_DATA = 0x2002


def _build_width_table():
    w = [1] * 256
    for rng, units in (
        ((0x02, 0x05, 0x08), 2),
        ((0x03, 0x06, 0x09), 3),
        ((0x13, 0x15, 0x16, 0x19, 0x1A, 0x1C, 0x1F, 0x20, 0x22, 0x23, 0x29), 2),
        ((0x14, 0x17, 0x1B, 0x24, 0x25, 0x26, 0x2A, 0x2B, 0x2C), 3),
        ((0x18,), 5),
        (range(0x2D, 0x3E), 2),
        (range(0x44, 0x6E), 2),
        (range(0x6E, 0x73), 3),
        (range(0x74, 0x79), 3),
        (range(0x90, 0xB0), 2),
        (range(0xD0, 0xE3), 2),
        ((0xFA, 0xFB), 4),   # v038 polymorphic invokes
        ((0xFC, 0xFD), 3),   # v038 custom invokes
        ((0xFE, 0xFF), 2),   # v039 method handle/type consts
    ):
        for op in rng:
            w[op] = units
    return tuple(w)


INSTRUCTION_WIDTHS = _build_width_table()


def iter_instructions(units):
    """Yield (offset_in_units, opcode, width_in_units) over a code array.

    ``units`` is a sequence of u16 code units. Payload pseudo-instructions
    (switch tables, array data) are yielded as single items with opcode 0x00.
    """
    pos = 0
    n = len(units)
    while pos < n:
        unit = units[pos]
        op = unit & 0xFF
        if op == OP_NOP and (unit >> 8) in (1, 2, 3):
            ident = unit >> 8
            if ident == 1:
                width = units[pos + 1] * 2 + 4
            elif ident == 2:
                width = units[pos + 1] * 4 + 2
            else:
                element_width = units[pos + 1]
                count = units[pos + 2] | (units[pos + 3] << 16)
                width = (count * element_width + 1) // 2 + 4
        else:
            width = INSTRUCTION_WIDTHS[op]
        if pos + width > n:
            # Tolerate a trailing truncated instruction rather than failing
            # the whole parse; consumers see the prefix.
            width = n - pos
        yield pos, op, width
        pos += width


# -- leb128 / mutf8 ----------------------------------------------------------

def read_uleb128(data, pos):
    result = 0
    shift = 0
    while True:
        b = data[pos]
        pos += 1
        result |= (b & 0x7F) << shift
        if not b & 0x80:
            return result, pos
        shift += 7


def write_uleb128(value: int) -> bytes:
    out = bytearray()
    while True:
        b = value & 0x7F
        value >>= 7
        if value:
            out.append(b | 0x80)
        else:
            out.append(b)
            return bytes(out)


def decode_mutf8(data: bytes) -> str:
    """Modified UTF-8: 0xC0 0x80 encodes NUL, supplementary as CESU-8 pairs."""
    chars = []
    i = 0
    n = len(data)
    while i < n:
        b = data[i]
        if b < 0x80:
            chars.append(chr(b))
            i += 1
        elif b & 0xE0 == 0xC0:
            chars.append(chr(((b & 0x1F) << 6) | (data[i + 1] & 0x3F)))
            i += 2
        elif b & 0xF0 == 0xE0:
            cp = ((b & 0x0F) << 12) | ((data[i + 1] & 0x3F) << 6) | (data[i + 2] & 0x3F)
            chars.append(chr(cp))
            i += 3
        else:
            raise FormatError("invalid MUTF-8 byte 0x%02x" % b, i)
    out = "".join(chars)
    # Re-join CESU-8 surrogate pairs.
    if any(0xD800 <= ord(c) <= 0xDFFF for c in out):
        out = out.encode("utf-16", "surrogatepass").decode("utf-16")
    return out


def encode_mutf8(text: str) -> bytes:
    out = bytearray()
    for ch in text:
        cp = ord(ch)
        if cp == 0:
            out += b"\xc0\x80"
        elif cp < 0x80:
            out.append(cp)
        elif cp < 0x800:
            out += bytes([0xC0 | (cp >> 6), 0x80 | (cp & 0x3F)])
        elif cp < 0x10000:
            out += bytes([0xE0 | (cp >> 12), 0x80 | ((cp >> 6) & 0x3F),
                          0x80 | (cp & 0x3F)])
        else:
            cp -= 0x10000
            for half in (0xD800 | (cp >> 10), 0xDC00 | (cp & 0x3FF)):
                out += bytes([0xE0 | (half >> 12), 0x80 | ((half >> 6) & 0x3F),
                              0x80 | (half & 0x3F)])
    return bytes(out)


def descriptor_to_dotted(descriptor: str) -> str:
    if descriptor.startswith("L") and descriptor.endswith(";"):
        return descriptor[1:-1].replace("/", ".")
    return descriptor


def dotted_to_descriptor(dotted: str) -> str:
    return "L" + dotted.replace(".", "/") + ";"


# -- structural model --------------------------------------------------------

@dataclass(frozen=True)
class Proto:
    shorty: str
    return_type: str
    parameters: tuple


@dataclass
class CodeItem:
    offset: int          # file offset of the code_item
    registers: int
    ins: int
    outs: int
    tries: int
    debug_info_off: int
    insns_size: int      # in 16-bit units

    @property
    def insns_off(self) -> int:
        return self.offset + 16

    def units(self, data) -> list:
        return list(struct.unpack_from("<%dH" % self.insns_size, data,
                                       self.insns_off))


@dataclass
class DexMethod:
    method_idx: int
    access_flags: int
    code: Optional[CodeItem]
    class_name: str      # dotted owner
    name: str
    proto: Proto


@dataclass
class DexField:
    field_idx: int
    access_flags: int
    class_name: str
    name: str
    type_descriptor: str


@dataclass
class DexClass:
    class_idx: int
    descriptor: str
    access_flags: int
    superclass: Optional[str]
    methods: list = field(default_factory=list)
    fields: list = field(default_factory=list)

    @property
    def dotted(self) -> str:
        return descriptor_to_dotted(self.descriptor)


class DexFile:
    """Parsed DEX: raw bytes plus an index of ids, classes, and code items."""

    def __init__(self, raw: bytes):
        self.raw = raw
        self.version: int = 35
        self.strings: list[str] = []
        self.types: list[str] = []
        self.protos: list[Proto] = []
        self.field_ids: list[tuple] = []    # (class_type, name, type)
        self.method_ids: list[tuple] = []   # (class_type, name, proto)
        self.classes: list[DexClass] = []
        self.checksum_ok = True
        self.signature_ok = True
        self.map_off = 0
        self._parse()

    # -- queries -----------------------------------------------------------

    def to_bytes(self) -> bytes:
        return self.raw

    def class_by_name(self, dotted: str) -> Optional[DexClass]:
        for cls in self.classes:
            if cls.dotted == dotted:
                return cls
        return None

    def defined_class_names(self) -> set:
        return {c.dotted for c in self.classes}

    def all_methods(self):
        for cls in self.classes:
            yield from cls.methods

    # -- parsing -----------------------------------------------------------

    def _parse(self) -> None:
        data = self.raw
        if len(data) < 0x70:
            raise FormatError("file shorter than a DEX header")
        if data[0:4] != b"dex\n" or data[7] != 0:
            raise FormatError("bad DEX magic", 0)
        try:
            self.version = int(data[4:7].decode("ascii"))
        except ValueError:
            raise FormatError("unreadable DEX version", 4)
        if not 35 <= self.version <= 39:
            raise FormatError("unsupported DEX version %03d" % self.version, 4)

        (checksum, ) = struct.unpack_from("<I", data, 8)
        signature = data[12:32]
        (file_size, header_size, endian) = struct.unpack_from("<III", data, 32)
        if endian != 0x12345678:
            raise FormatError("big-endian DEX not supported", 40)
        if file_size != len(data):
            raise FormatError("header file size %d != actual %d"
                              % (file_size, len(data)), 32)
        self.checksum_ok = zlib.adler32(data[12:]) == checksum
        self.signature_ok = hashlib.sha1(data[32:]).digest() == signature

        (_link_size, _link_off, map_off,
         string_ids_size, string_ids_off,
         type_ids_size, type_ids_off,
         proto_ids_size, proto_ids_off,
         field_ids_size, field_ids_off,
         method_ids_size, method_ids_off,
         class_defs_size, class_defs_off,
         _data_size, _data_off) = struct.unpack_from("<17I", data, 44)
        self.map_off = map_off

        self.strings = []
        for i in range(string_ids_size):
            off = struct.unpack_from("<I", data, string_ids_off + 4 * i)[0]
            _utf16_len, pos = read_uleb128(data, off)
            end = data.index(b"\x00", pos)
            self.strings.append(decode_mutf8(data[pos:end]))

        self.types = []
        for i in range(type_ids_size):
            idx = struct.unpack_from("<I", data, type_ids_off + 4 * i)[0]
            self.types.append(self._string(idx, "type_ids"))

        self.protos = []
        for i in range(proto_ids_size):
            shorty_idx, ret_idx, params_off = struct.unpack_from(
                "<III", data, proto_ids_off + 12 * i)
            params = ()
            if params_off:
                count = struct.unpack_from("<I", data, params_off)[0]
                raw = struct.unpack_from("<%dH" % count, data, params_off + 4)
                params = tuple(self._type(t, "type_list") for t in raw)
            self.protos.append(Proto(self._string(shorty_idx, "proto_ids"),
                                     self._type(ret_idx, "proto_ids"), params))

        self.field_ids = []
        for i in range(field_ids_size):
            cls, typ, name = struct.unpack_from("<HHI", data, field_ids_off + 8 * i)
            self.field_ids.append((self._type(cls, "field_ids"),
                                   self._string(name, "field_ids"),
                                   self._type(typ, "field_ids")))

        self.method_ids = []
        for i in range(method_ids_size):
            cls, proto, name = struct.unpack_from("<HHI", data,
                                                  method_ids_off + 8 * i)
            if proto >= len(self.protos):
                raise FormatError("method_ids proto index %d out of range" % proto)
            self.method_ids.append((self._type(cls, "method_ids"),
                                    self._string(name, "method_ids"),
                                    self.protos[proto]))

        self.classes = []
        for i in range(class_defs_size):
            (class_idx, access, super_idx, _ifaces, _src, _annot,
             class_data_off, _statics) = struct.unpack_from(
                "<8I", data, class_defs_off + 32 * i)
            cls = DexClass(
                class_idx=class_idx,
                descriptor=self._type(class_idx, "class_defs"),
                access_flags=access,
                superclass=None if super_idx == NO_INDEX
                else self._type(super_idx, "class_defs"))
            if class_data_off:
                self._parse_class_data(cls, class_data_off)
            self.classes.append(cls)

    def _string(self, idx, table):
        if idx >= len(self.strings):
            raise FormatError("%s string index %d out of range" % (table, idx))
        return self.strings[idx]

    def _type(self, idx, table):
        if idx >= len(self.types):
            raise FormatError("%s type index %d out of range" % (table, idx))
        return self.types[idx]

    def _parse_class_data(self, cls: DexClass, off: int) -> None:
        data = self.raw
        static_n, pos = read_uleb128(data, off)
        instance_n, pos = read_uleb128(data, pos)
        direct_n, pos = read_uleb128(data, pos)
        virtual_n, pos = read_uleb128(data, pos)

        for count in (static_n, instance_n):
            idx = 0
            for _ in range(count):
                diff, pos = read_uleb128(data, pos)
                access, pos = read_uleb128(data, pos)
                idx += diff
                owner, name, typ = self.field_ids[idx]
                cls.fields.append(DexField(idx, access,
                                           descriptor_to_dotted(owner), name, typ))

        for count in (direct_n, virtual_n):
            idx = 0
            for _ in range(count):
                diff, pos = read_uleb128(data, pos)
                access, pos = read_uleb128(data, pos)
                code_off, pos = read_uleb128(data, pos)
                idx += diff
                owner, name, proto = self.method_ids[idx]
                code = self._parse_code(code_off) if code_off else None
                cls.methods.append(DexMethod(idx, access, code,
                                             descriptor_to_dotted(owner),
                                             name, proto))

    def _parse_code(self, off: int) -> CodeItem:
        if off + 16 > len(self.raw):
            raise FormatError("code item out of range", off)
        registers, ins, outs, tries = struct.unpack_from("<4H", self.raw, off)
        debug_off, insns_size = struct.unpack_from("<II", self.raw, off + 8)
        if off + 16 + 2 * insns_size > len(self.raw):
            raise FormatError("code item instructions out of range", off)
        return CodeItem(off, registers, ins, outs, tries, debug_off, insns_size)


def parse_dex(data: bytes) -> DexFile:
    return DexFile(data)


def repair_header(dex: DexFile) -> DexFile:
    """Recompute signature, then checksum, then return a reparsed file."""
    raw = bytearray(dex.raw)
    struct.pack_into("<I", raw, 32, len(raw))
    raw[12:32] = hashlib.sha1(bytes(raw[32:])).digest()
    struct.pack_into("<I", raw, 8, zlib.adler32(bytes(raw[12:])))
    out = bytes(raw)
    if out == dex.raw:
        return dex
    return DexFile(out)
