"""Byte-faithful ZIP archive model for APK files.

An :class:`ApkArchive` is an ordered list of entries. Entries parsed from an
existing file keep their raw local and central records, so writing an
unmodified archive reproduces the input bytes exactly. Entries that are added
or replaced are emitted canonically: fixed 1980-01-01 timestamps, zeroed
flags, deflate level 6. This keeps output bytes a pure function of entry
content, so any byte difference between two archives is attributable to an
intended change.

Only stored and deflated entries are supported; no ZIP64, no encryption.
"""

from __future__ import annotations

import hashlib
import struct
import zlib
from dataclasses import dataclass
from typing import Iterable, Optional

from .errors import FormatError, ValidationError

STORED = 0
DEFLATED = 8

_LOCAL_SIG = 0x04034B50
_CENTRAL_SIG = 0x02014B50
_EOCD_SIG = 0x06054B50
_DESCRIPTOR_SIG = 0x08074B50

_LOCAL_FMT = "<IHHHHHIIIHH"
_CENTRAL_FMT = "<IHHHHHHIIIHHHHHII"
_EOCD_FMT = "<IHHHHIIH"

# DOS date for 1980-01-01, time 00:00:00.
_CANON_DOS_TIME = 0
_CANON_DOS_DATE = 0x21


@dataclass(frozen=True)
class Digests:
    """Lowercase hex digests of one byte sequence."""

    md5: str
    sha1: str
    sha256: str


def compute_digests(data: bytes) -> Digests:
    return Digests(
        md5=hashlib.md5(data).hexdigest(),
        sha1=hashlib.sha1(data).hexdigest(),
        sha256=hashlib.sha256(data).hexdigest(),
    )


@dataclass(frozen=True)
class _Preserved:
    """Verbatim byte ranges of an entry as it appeared in the source file."""

    local_block: bytes  # local header + compressed data + data descriptor
    central_block: bytes  # full central directory record


class ZipEntry:
    """One archive member: path, uncompressed data, compression mode."""

    __slots__ = ("path", "data", "compression", "_preserved")

    def __init__(self, path: str, data: bytes, compression: int = DEFLATED,
                 _preserved: Optional[_Preserved] = None):
        if compression not in (STORED, DEFLATED):
            raise ValidationError("unsupported compression method %r" % compression)
        self.path = path
        self.data = data
        self.compression = compression
        self._preserved = _preserved

    def __repr__(self):
        return "ZipEntry(%r, %d bytes, %s)" % (
            self.path, len(self.data), "stored" if self.compression == STORED else "deflate")


class ApkArchive:
    """Ordered, byte-faithful view of a ZIP/APK file."""

    def __init__(self, entries: Iterable[ZipEntry] = (), comment: bytes = b""):
        self.entries: list[ZipEntry] = list(entries)
        self.comment = comment
        seen = set()
        for e in self.entries:
            if e.path in seen:
                raise ValidationError("duplicate entry path %r" % e.path)
            seen.add(e.path)

    # -- queries ---------------------------------------------------------

    def paths(self) -> list[str]:
        return [e.path for e in self.entries]

    def get(self, path: str) -> Optional[ZipEntry]:
        for e in self.entries:
            if e.path == path:
                return e
        return None

    def has(self, path: str) -> bool:
        return self.get(path) is not None

    def read(self, path: str) -> bytes:
        e = self.get(path)
        if e is None:
            raise KeyError(path)
        return e.data

    def entry_map(self) -> dict[str, bytes]:
        return {e.path: e.data for e in self.entries}

    # -- pure update operations ------------------------------------------

    def with_entry(self, path: str, data: bytes,
                   compression: int = DEFLATED) -> "ApkArchive":
        """Return a copy with ``path`` replaced in place or appended."""
        new = ZipEntry(path, data, compression)
        entries = list(self.entries)
        for i, e in enumerate(entries):
            if e.path == path:
                entries[i] = new
                break
        else:
            entries.append(new)
        return ApkArchive(entries, self.comment)

    def without(self, paths: Iterable[str]) -> "ApkArchive":
        drop = set(paths)
        return ApkArchive([e for e in self.entries if e.path not in drop],
                          self.comment)

    def filtered(self, keep) -> "ApkArchive":
        """Return a copy with only the entries for which ``keep(path)`` holds."""
        return ApkArchive([e for e in self.entries if keep(e.path)], self.comment)

    # -- serialization -----------------------------------------------------

    @classmethod
    def from_bytes(cls, data: bytes) -> "ApkArchive":
        return open_archive(data)

    def to_bytes(self) -> bytes:
        return write_archive(self)


def open_archive(data: bytes) -> ApkArchive:
    """Parse ZIP bytes into an ordered entry model.

    Entry order follows the central directory. Raw records are retained so
    untouched entries round-trip byte-identically.
    """
    eocd_off = _find_eocd(data)
    (_, disk_no, cd_disk, _, total, cd_size, cd_off,
     comment_len) = struct.unpack_from(_EOCD_FMT, data, eocd_off)
    if disk_no != 0 or cd_disk != 0:
        raise FormatError("multi-disk archives not supported", eocd_off)
    comment = data[eocd_off + 22:eocd_off + 22 + comment_len]
    if cd_off + cd_size > len(data):
        raise FormatError("central directory extends past end of file", cd_off)

    entries = []
    seen = set()
    pos = cd_off
    for _ in range(total):
        if pos + 46 > len(data):
            raise FormatError("truncated central directory record", pos)
        fields = struct.unpack_from(_CENTRAL_FMT, data, pos)
        (sig, _vmade, _vneed, flags, method, _mt, _md, _crc, comp_size,
         uncomp_size, name_len, extra_len, comment_len2, _disk, _iattr,
         _eattr, local_off) = fields
        if sig != _CENTRAL_SIG:
            raise FormatError("bad central directory signature", pos)
        rec_len = 46 + name_len + extra_len + comment_len2
        central_block = data[pos:pos + rec_len]
        name = _decode_name(data[pos + 46:pos + 46 + name_len], flags)
        if 0xFFFFFFFF in (comp_size, uncomp_size, local_off):
            raise FormatError("ZIP64 values not supported for %r" % name, pos)
        if name in seen:
            raise ValidationError("duplicate entry path %r" % name)
        seen.add(name)
        raw, plain = _read_local(data, local_off, name, method, comp_size, flags)
        entries.append(ZipEntry(name, plain, method,
                                _Preserved(raw, central_block)))
        pos += rec_len

    return ApkArchive(entries, comment)


def write_archive(archive: ApkArchive) -> bytes:
    """Serialize deterministically; preserved entries are emitted verbatim."""
    out = bytearray()
    centrals = []
    for entry in archive.entries:
        _validate_path(entry.path)
        offset = len(out)
        if entry._preserved is not None:
            out += entry._preserved.local_block
            central = bytearray(entry._preserved.central_block)
            struct.pack_into("<I", central, 42, offset)
            centrals.append(bytes(central))
        else:
            local, central = _encode_entry(entry, offset)
            out += local
            centrals.append(central)

    cd_off = len(out)
    for c in centrals:
        out += c
    cd_size = len(out) - cd_off
    out += struct.pack(_EOCD_FMT, _EOCD_SIG, 0, 0, len(centrals),
                       len(centrals), cd_size, cd_off, len(archive.comment))
    out += archive.comment
    return bytes(out)


def compare_entries(before: ApkArchive, after: ApkArchive):
    """Entry-level diff: (added, removed, modified) path lists, each sorted."""
    a, b = before.entry_map(), after.entry_map()
    added = sorted(set(b) - set(a))
    removed = sorted(set(a) - set(b))
    modified = sorted(p for p in set(a) & set(b) if a[p] != b[p])
    return added, removed, modified


# -- internals -------------------------------------------------------------

def _find_eocd(data: bytes) -> int:
    if len(data) < 22:
        raise FormatError("file too short for an end-of-central-directory record")
    lo = max(0, len(data) - 22 - 0xFFFF)
    pos = data.rfind(struct.pack("<I", _EOCD_SIG), lo)
    while pos != -1:
        if pos + 22 <= len(data):
            comment_len = struct.unpack_from("<H", data, pos + 20)[0]
            if pos + 22 + comment_len == len(data):
                return pos
        pos = data.rfind(struct.pack("<I", _EOCD_SIG), lo, pos)
    raise FormatError("end-of-central-directory record not found")


def _decode_name(raw: bytes, flags: int) -> str:
    # APK names are in practice ASCII/UTF-8 regardless of the UTF-8 flag bit.
    return raw.decode("utf-8", "surrogateescape")


def _encode_name(path: str) -> tuple[bytes, int]:
    raw = path.encode("utf-8", "surrogateescape")
    flags = 0 if path.isascii() else 0x0800
    return raw, flags


def _read_local(data: bytes, off: int, name: str, method: int,
                comp_size: int, flags: int):
    if off + 30 > len(data):
        raise FormatError("local header for %r out of range" % name, off)
    (sig, _vneed, lflags, lmethod, _mt, _md, _crc, _csize, _usize,
     name_len, extra_len) = struct.unpack_from(_LOCAL_FMT, data, off)
    if sig != _LOCAL_SIG:
        raise FormatError("bad local header signature for %r" % name, off)
    data_start = off + 30 + name_len + extra_len
    data_end = data_start + comp_size
    if data_end > len(data):
        raise FormatError("entry data for %r extends past end of file" % name, off)
    block_end = data_end
    if lflags & 0x08:
        # Streaming entry: a data descriptor trails the payload, with or
        # without its optional signature word.
        if data[data_end:data_end + 4] == struct.pack("<I", _DESCRIPTOR_SIG):
            block_end = data_end + 16
        else:
            block_end = data_end + 12
        if block_end > len(data):
            raise FormatError("data descriptor for %r truncated" % name, data_end)
    raw_block = data[off:block_end]
    payload = data[data_start:data_end]
    if lmethod == STORED:
        plain = payload
    elif lmethod == DEFLATED:
        try:
            plain = zlib.decompress(payload, -15)
        except zlib.error as exc:
            raise FormatError("cannot inflate %r: %s" % (name, exc), data_start)
    else:
        raise FormatError("unsupported compression method %d for %r"
                          % (lmethod, name), off)
    return raw_block, plain


def _validate_path(path: str) -> None:
    parts = path.split("/")
    if ".." in parts:
        raise ValidationError("entry path %r contains '..'" % path)
    if path.startswith("/"):
        raise ValidationError("entry path %r is absolute" % path)
    if not path:
        raise ValidationError("empty entry path")


def _encode_entry(entry: ZipEntry, offset: int):
    name, flags = _encode_name(entry.path)
    crc = zlib.crc32(entry.data)
    if entry.compression == DEFLATED:
        comp = zlib.compressobj(6, zlib.DEFLATED, -15)
        payload = comp.compress(entry.data) + comp.flush()
    else:
        payload = entry.data
    local = struct.pack(_LOCAL_FMT, _LOCAL_SIG, 20, flags, entry.compression,
                        _CANON_DOS_TIME, _CANON_DOS_DATE, crc, len(payload),
                        len(entry.data), len(name), 0) + name + payload
    central = struct.pack(_CENTRAL_FMT, _CENTRAL_SIG, 20, 20, flags,
                          entry.compression, _CANON_DOS_TIME, _CANON_DOS_DATE,
                          crc, len(payload), len(entry.data), len(name), 0, 0,
                          0, 0, 0, offset) + name
    return local, central
