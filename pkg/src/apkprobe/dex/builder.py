"""Assemble small, valid v035 DEX files from class descriptions.

Covers the subset of the format this toolkit needs: classes with fields and
methods, bodies over a small instruction vocabulary (consts, strings, field
reads, invokes, returns, nops). Id tables are emitted in the canonical sorted
order the format requires.
"""

from __future__ import annotations

import hashlib
import struct
import zlib
from dataclasses import dataclass, field as dc_field
from typing import Optional

from ..errors import ValidationError
from .format import (
    ACC_CONSTRUCTOR,
    ACC_PUBLIC,
    ACC_STATIC,
    encode_mutf8,
    write_uleb128,
)

_OPCODES = {
    "nop": 0x00,
    "return-void": 0x0E,
    "return": 0x0F,
    "return-wide": 0x10,
    "return-object": 0x11,
    "const/4": 0x12,
    "const/16": 0x13,
    "const-wide/16": 0x16,
    "const-string": 0x1A,
    "new-instance": 0x22,
    "iget": 0x52,
    "iget-object": 0x54,
    "sget": 0x60,
    "sget-object": 0x62,
    "invoke-virtual": 0x6E,
    "invoke-super": 0x6F,
    "invoke-direct": 0x70,
    "invoke-static": 0x71,
    "invoke-interface": 0x72,
}

_WIDE_TYPES = ("J", "D")


@dataclass(frozen=True)
class MethodRef:
    class_descriptor: str
    name: str
    return_type: str
    parameters: tuple = ()


@dataclass(frozen=True)
class FieldRef:
    class_descriptor: str
    name: str
    type_descriptor: str


@dataclass
class FieldSpec:
    name: str
    type_descriptor: str
    access: int = ACC_PUBLIC
    static: bool = False

    def __post_init__(self):
        if self.static:
            self.access |= ACC_STATIC


@dataclass
class MethodSpec:
    name: str
    return_type: str = "V"
    parameters: tuple = ()
    access: int = ACC_PUBLIC
    static: bool = False
    body: Optional[list] = None   # list of instruction tuples; None = default
    registers: Optional[int] = None

    def __post_init__(self):
        if self.body is None:
            self.body = default_body(self.return_type)
        if self.static:
            self.access |= ACC_STATIC
        if self.name in ("<init>", "<clinit>"):
            self.access |= ACC_CONSTRUCTOR


@dataclass
class ClassSpec:
    descriptor: str
    superclass: str = "Ljava/lang/Object;"
    access: int = ACC_PUBLIC
    methods: list = dc_field(default_factory=list)
    fields: list = dc_field(default_factory=list)  # FieldRef-likes with access

    def method(self, name: str, **kwargs) -> "ClassSpec":
        self.methods.append(MethodSpec(name, **kwargs))
        return self


def _utf16_key(s: str) -> bytes:
    # DEX orders strings by UTF-16 code unit; big-endian bytes sort the same.
    return s.encode("utf-16-be", "surrogatepass")


def default_body(return_type: str) -> list:
    """Smallest valid body for the given return type."""
    if return_type == "V":
        return [("return-void",)]
    if return_type in _WIDE_TYPES:
        return [("const-wide/16", 0, 0), ("return-wide", 0)]
    if return_type.startswith(("L", "[")):
        return [("const/4", 0, 0), ("return-object", 0)]
    return [("const/4", 0, 0), ("return", 0)]


def shorty_of(return_type: str, parameters) -> str:
    def s(t):
        return "L" if t.startswith(("L", "[")) else t
    return s(return_type) + "".join(s(p) for p in parameters)


class DexBuilder:
    """Collects class specs and emits DEX bytes."""

    def __init__(self):
        self.class_specs: list[ClassSpec] = []
        self._extra_strings: list[str] = []

    def add_class(self, spec: ClassSpec) -> "DexBuilder":
        self.class_specs.append(spec)
        return self

    def new_class(self, descriptor: str, **kwargs) -> ClassSpec:
        spec = ClassSpec(descriptor, **kwargs)
        self.add_class(spec)
        return spec

    def add_string(self, text: str) -> "DexBuilder":
        """Force a string into the pool even if no instruction references it."""
        self._extra_strings.append(text)
        return self

    # -- assembly ------------------------------------------------------------

    def build(self) -> bytes:
        strings: set[str] = set(self._extra_strings)
        types: set[str] = set()
        protos: set[tuple] = set()
        fields: set[FieldRef] = set()
        methods: set[MethodRef] = set()

        def note_proto(ret, params):
            protos.add((ret, tuple(params)))
            types.add(ret)
            types.update(params)
            strings.add(shorty_of(ret, params))
            strings.add(ret)
            strings.update(params)

        for spec in self.class_specs:
            types.update((spec.descriptor, spec.superclass))
            strings.update((spec.descriptor, spec.superclass))
            for f in spec.fields:
                ref = FieldRef(spec.descriptor, f.name, f.type_descriptor)
                fields.add(ref)
                types.add(ref.type_descriptor)
                strings.update((ref.name, ref.type_descriptor))
            for m in spec.methods:
                methods.add(MethodRef(spec.descriptor, m.name,
                                      m.return_type, tuple(m.parameters)))
                strings.add(m.name)
                note_proto(m.return_type, m.parameters)
                for ins in m.body:
                    self._note_operands(ins, strings, types, protos,
                                        fields, methods, note_proto)

        string_list = sorted(strings, key=_utf16_key)
        string_idx = {s: i for i, s in enumerate(string_list)}
        type_list = sorted(types, key=lambda t: string_idx[t])
        type_idx = {t: i for i, t in enumerate(type_list)}
        proto_list = sorted(protos, key=lambda p: (
            type_idx[p[0]], tuple(type_idx[t] for t in p[1])))
        proto_idx = {p: i for i, p in enumerate(proto_list)}
        field_list = sorted(fields, key=lambda f: (
            type_idx[f.class_descriptor], string_idx[f.name],
            type_idx[f.type_descriptor]))
        field_idx = {f: i for i, f in enumerate(field_list)}
        method_list = sorted(methods, key=lambda m: (
            type_idx[m.class_descriptor], string_idx[m.name],
            proto_idx[(m.return_type, m.parameters)]))
        method_idx = {m: i for i, m in enumerate(method_list)}

        resolver = _Resolver(string_idx, type_idx, proto_idx, field_idx, method_idx)

        # Parameter type lists, deduplicated.
        param_lists = sorted({p[1] for p in proto_list if p[1]},
                             key=lambda ps: tuple(type_idx[t] for t in ps))

        header_size = 0x70
        string_ids_off = header_size
        type_ids_off = string_ids_off + 4 * len(string_list)
        proto_ids_off = type_ids_off + 4 * len(type_list)
        field_ids_off = proto_ids_off + 12 * len(proto_list)
        method_ids_off = field_ids_off + 8 * len(field_list)
        class_defs_off = method_ids_off + 8 * len(method_list)
        data_off = class_defs_off + 32 * len(self.class_specs)

        data = bytearray()

        def align4():
            while (data_off + len(data)) % 4:
                data.append(0)

        align4()
        type_list_offs = {}
        for params in param_lists:
            align4()
            type_list_offs[params] = data_off + len(data)
            data += struct.pack("<I", len(params))
            data += struct.pack("<%dH" % len(params),
                                *(type_idx[t] for t in params))

        code_offs = {}
        for spec in self.class_specs:
            for m in spec.methods:
                align4()
                code_offs[(spec.descriptor, m.name,
                           m.return_type, tuple(m.parameters))] = \
                    data_off + len(data)
                data += _encode_code(m, resolver)

        class_data_offs = {}
        for spec in self.class_specs:
            class_data_offs[spec.descriptor] = data_off + len(data)
            data += _encode_class_data(spec, field_idx, method_idx, code_offs)

        string_data_offs = {}
        for s in string_list:
            string_data_offs[s] = data_off + len(data)
            utf16_len = sum(2 if ord(c) > 0xFFFF else 1 for c in s)
            data += write_uleb128(utf16_len) + encode_mutf8(s) + b"\x00"

        align4()
        map_off = data_off + len(data)
        data += self._encode_map(string_ids_off, len(string_list),
                                 type_ids_off, len(type_list),
                                 proto_ids_off, len(proto_list),
                                 field_ids_off, len(field_list),
                                 method_ids_off, len(method_list),
                                 class_defs_off, len(self.class_specs),
                                 param_lists, type_list_offs,
                                 code_offs, class_data_offs,
                                 string_data_offs, string_list, map_off)

        total = data_off + len(data)
        out = bytearray(total)
        out[0:8] = b"dex\n035\x00"
        struct.pack_into("<III", out, 32, total, header_size, 0x12345678)
        struct.pack_into("<17I", out, 44,
                         0, 0, map_off,
                         len(string_list), string_ids_off,
                         len(type_list), type_ids_off,
                         len(proto_list), proto_ids_off,
                         len(field_list), field_ids_off,
                         len(method_list), method_ids_off,
                         len(self.class_specs), class_defs_off,
                         total - data_off, data_off)

        pos = string_ids_off
        for s in string_list:
            struct.pack_into("<I", out, pos, string_data_offs[s])
            pos += 4
        pos = type_ids_off
        for t in type_list:
            struct.pack_into("<I", out, pos, string_idx[t])
            pos += 4
        pos = proto_ids_off
        for ret, params in proto_list:
            struct.pack_into("<III", out, pos,
                             string_idx[shorty_of(ret, params)],
                             type_idx[ret],
                             type_list_offs.get(params, 0))
            pos += 12
        pos = field_ids_off
        for f in field_list:
            struct.pack_into("<HHI", out, pos,
                             type_idx[f.class_descriptor],
                             type_idx[f.type_descriptor],
                             string_idx[f.name])
            pos += 8
        pos = method_ids_off
        for m in method_list:
            struct.pack_into("<HHI", out, pos,
                             type_idx[m.class_descriptor],
                             proto_idx[(m.return_type, m.parameters)],
                             string_idx[m.name])
            pos += 8
        pos = class_defs_off
        for spec in self.class_specs:
            struct.pack_into("<8I", out, pos,
                             type_idx[spec.descriptor],
                             spec.access,
                             type_idx[spec.superclass],
                             0, 0xFFFFFFFF, 0,
                             class_data_offs[spec.descriptor],
                             0)
            pos += 32

        out[data_off:] = data
        out[12:32] = hashlib.sha1(bytes(out[32:])).digest()
        struct.pack_into("<I", out, 8, zlib.adler32(bytes(out[12:])))
        return bytes(out)

    def _note_operands(self, ins, strings, types, protos, fields,
                       methods, note_proto):
        op = ins[0]
        if op == "const-string":
            strings.add(ins[2])
        elif op == "new-instance":
            types.add(ins[2])
            strings.add(ins[2])
        elif op.startswith("invoke-"):
            ref = ins[1]
            methods.add(ref)
            types.add(ref.class_descriptor)
            strings.add(ref.class_descriptor)
            strings.add(ref.name)
            note_proto(ref.return_type, ref.parameters)
        elif op in ("sget", "sget-object", "iget", "iget-object"):
            ref = ins[1]
            fields.add(ref)
            types.update((ref.class_descriptor, ref.type_descriptor))
            strings.update((ref.class_descriptor, ref.name, ref.type_descriptor))

    def _encode_map(self, s_off, s_n, t_off, t_n, p_off, p_n, f_off, f_n,
                    m_off, m_n, c_off, c_n, param_lists, type_list_offs,
                    code_offs, class_data_offs, string_data_offs,
                    string_list, map_off):
        entries = [(0x0000, 1, 0), (0x0001, s_n, s_off), (0x0002, t_n, t_off)]
        if p_n:
            entries.append((0x0003, p_n, p_off))
        if f_n:
            entries.append((0x0004, f_n, f_off))
        if m_n:
            entries.append((0x0005, m_n, m_off))
        if c_n:
            entries.append((0x0006, c_n, c_off))
        if param_lists:
            entries.append((0x1001, len(param_lists),
                            min(type_list_offs.values())))
        if code_offs:
            entries.append((0x2001, len(code_offs), min(code_offs.values())))
        if class_data_offs:
            entries.append((0x2000, len(class_data_offs),
                            min(class_data_offs.values())))
        if string_list:
            entries.append((0x2002, len(string_list),
                            min(string_data_offs.values())))
        entries.append((0x1000, 1, map_off))
        entries.sort(key=lambda e: e[2])
        out = struct.pack("<I", len(entries))
        for typ, size, off in entries:
            out += struct.pack("<HHII", typ, 0, size, off)
        return out


class _Resolver:
    def __init__(self, strings, types, protos, fields, methods):
        self.strings = strings
        self.types = types
        self.protos = protos
        self.fields = fields
        self.methods = methods


def _is_direct(method: MethodSpec) -> bool:
    return bool(method.static or method.access & ACC_CONSTRUCTOR
                or method.access & 0x2)


def _encode_class_data(spec: ClassSpec, field_idx, method_idx, code_offs) -> bytes:
    statics = [f for f in spec.fields if f.static]
    instances = [f for f in spec.fields if not f.static]
    directs = [m for m in spec.methods if _is_direct(m)]
    virtuals = [m for m in spec.methods if not _is_direct(m)]

    out = bytearray()
    out += write_uleb128(len(statics)) + write_uleb128(len(instances))
    out += write_uleb128(len(directs)) + write_uleb128(len(virtuals))

    for group in (statics, instances):
        prev = 0
        for f in sorted(group, key=lambda f: field_idx[
                FieldRef(spec.descriptor, f.name, f.type_descriptor)]):
            idx = field_idx[FieldRef(spec.descriptor, f.name, f.type_descriptor)]
            out += write_uleb128(idx - prev) + write_uleb128(f.access)
            prev = idx

    for group in (directs, virtuals):
        prev = 0
        def midx(m):
            return method_idx[MethodRef(spec.descriptor, m.name,
                                        m.return_type, tuple(m.parameters))]
        for m in sorted(group, key=midx):
            idx = midx(m)
            off = code_offs[(spec.descriptor, m.name, m.return_type,
                             tuple(m.parameters))]
            out += write_uleb128(idx - prev) + write_uleb128(m.access)
            out += write_uleb128(off)
            prev = idx
    return bytes(out)


def _encode_code(method: MethodSpec, resolver: _Resolver) -> bytes:
    units, max_reg, outs = _assemble(method.body, resolver)
    ins = (0 if method.static else 1) + sum(
        2 if p in _WIDE_TYPES else 1 for p in method.parameters)
    registers = method.registers
    if registers is None:
        registers = max(max_reg + 1, 1) + ins
    if registers < ins:
        raise ValidationError("method %s: registers < ins" % method.name)
    head = struct.pack("<4HII", registers, ins, outs, 0, 0, len(units))
    return head + struct.pack("<%dH" % len(units), *units)


def _assemble(body, resolver: _Resolver):
    units: list[int] = []
    max_reg = 0
    outs = 0
    for ins in body:
        op_name = ins[0]
        op = _OPCODES.get(op_name)
        if op is None:
            raise ValidationError("unknown instruction %r" % op_name)
        if op_name == "nop":
            units.append(0x0000)
        elif op_name == "return-void":
            units.append(0x000E)
        elif op_name in ("return", "return-wide", "return-object"):
            reg = ins[1]
            max_reg = max(max_reg, reg + (1 if op_name == "return-wide" else 0))
            units.append(op | (reg << 8))
        elif op_name == "const/4":
            reg, lit = ins[1], ins[2]
            if not -8 <= lit <= 7 or reg > 15:
                raise ValidationError("const/4 operand out of range")
            max_reg = max(max_reg, reg)
            units.append(op | (reg << 8) | ((lit & 0xF) << 12))
        elif op_name in ("const/16", "const-wide/16"):
            reg, lit = ins[1], ins[2]
            max_reg = max(max_reg, reg + (1 if op_name == "const-wide/16" else 0))
            units += [op | (reg << 8), lit & 0xFFFF]
        elif op_name == "const-string":
            reg, text = ins[1], ins[2]
            idx = resolver.strings[text]
            max_reg = max(max_reg, reg)
            if idx > 0xFFFF:
                units += [0x1B | (reg << 8), idx & 0xFFFF, idx >> 16]
            else:
                units += [op | (reg << 8), idx]
        elif op_name == "new-instance":
            reg, type_desc = ins[1], ins[2]
            max_reg = max(max_reg, reg)
            units += [op | (reg << 8), resolver.types[type_desc]]
        elif op_name in ("sget", "sget-object"):
            ref, reg = ins[1], ins[2]
            max_reg = max(max_reg, reg)
            units += [op | (reg << 8), resolver.fields[ref]]
        elif op_name in ("iget", "iget-object"):
            ref, dst, obj = ins[1], ins[2], ins[3]
            max_reg = max(max_reg, dst, obj)
            if dst > 15 or obj > 15:
                raise ValidationError("iget registers limited to v0..v15")
            units += [op | (dst << 8) | (obj << 12), resolver.fields[ref]]
        elif op_name.startswith("invoke-"):
            ref, regs = ins[1], list(ins[2]) if len(ins) > 2 else []
            if len(regs) > 5:
                raise ValidationError("invoke supports at most 5 registers")
            if any(r > 15 for r in regs):
                raise ValidationError("invoke registers limited to v0..v15")
            midx = resolver.methods[ref]
            outs = max(outs, len(regs))
            if regs:
                max_reg = max(max_reg, max(regs))
            a = len(regs)
            g = regs[4] if a == 5 else 0
            padded = regs[:4] + [0] * (4 - min(a, 4))
            unit2 = (padded[0] | (padded[1] << 4) | (padded[2] << 8)
                     | (padded[3] << 12))
            units += [op | (a << 12) | (g << 8), midx, unit2]
        else:
            raise ValidationError("unhandled instruction %r" % op_name)
    return units, max_reg, outs
