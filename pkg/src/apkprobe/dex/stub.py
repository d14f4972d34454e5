"""In-place replacement of method bodies with minimal return stubs.

Each selected method's instruction array is overwritten by a short sequence
(void return, or zero-const plus typed return) padded with nops to the
original code-unit count, and its try table is disabled. Nothing moves, so
every offset in the file stays valid; only the header needs repair.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from .format import (
    OP_CONST_4,
    OP_CONST_WIDE_16,
    OP_NOP,
    OP_RETURN,
    OP_RETURN_OBJECT,
    OP_RETURN_VOID,
    OP_RETURN_WIDE,
    DexFile,
    repair_header,
)

ALL = None  # selector sentinel: stub every class

_WIDE = ("J", "D")


@dataclass
class StubOutcome:
    dex: DexFile
    stubbed: int = 0
    unstubbable: list = field(default_factory=list)


def stub_sequence(return_type: str, registers: int):
    """Code units for the stub, or None if the frame cannot hold it."""
    if return_type == "V":
        return [OP_RETURN_VOID]
    if registers < 1:
        return None
    if return_type in _WIDE:
        if registers < 2:
            return None
        return [OP_CONST_WIDE_16, 0x0000, OP_RETURN_WIDE]
    if return_type.startswith(("L", "[")):
        return [OP_CONST_4, OP_RETURN_OBJECT]
    return [OP_CONST_4, OP_RETURN]


def stub_method_bodies(dex: DexFile, selector=ALL) -> StubOutcome:
    """Stub every method of the selected classes (dotted names, or ALL)."""
    if selector is not None:
        selector = set(selector)
        known = dex.defined_class_names()
        missing = selector - known
        if missing:
            raise KeyError("selector classes not in dex: %s"
                           % ", ".join(sorted(missing)))

    raw = bytearray(dex.raw)
    outcome = StubOutcome(dex)
    done_offsets = set()
    for cls in dex.classes:
        if selector is not None and cls.dotted not in selector:
            continue
        for method in cls.methods:
            code = method.code
            if code is None or code.offset in done_offsets:
                continue
            done_offsets.add(code.offset)
            seq = stub_sequence(method.proto.return_type, code.registers)
            if seq is None or len(seq) > code.insns_size:
                # Degenerate frame or body: fall back to a bare void return
                # when that is legal, otherwise report the method.
                if method.proto.return_type == "V" and code.insns_size >= 1:
                    seq = [OP_RETURN_VOID]
                else:
                    outcome.unstubbable.append(
                        "%s.%s" % (cls.dotted, method.name))
                    continue
            units = seq + [OP_NOP] * (code.insns_size - len(seq))
            struct.pack_into("<%dH" % len(units), raw, code.insns_off, *units)
            struct.pack_into("<H", raw, code.offset + 6, 0)  # drop try table
            outcome.stubbed += 1

    mutated = DexFile(bytes(raw)) if bytes(raw) != dex.raw else dex
    outcome.dex = repair_header(mutated)
    return outcome
