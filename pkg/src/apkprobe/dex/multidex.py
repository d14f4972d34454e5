"""Multidex slot management for fusing code into an existing archive."""

from __future__ import annotations

import re

from ..archive import ApkArchive, STORED
from ..errors import CapacityError, ValidationError

_DEX_NAME_RE = re.compile(r"^classes([2-9]|[1-9]\d+)?\.dex$")
MAX_DEX_SLOTS = 99


def dex_entry_names(archive: ApkArchive) -> list:
    """classes.dex, classes2.dex, ... present in the archive, slot order."""
    found = {}
    for path in archive.paths():
        m = _DEX_NAME_RE.match(path)
        if m:
            found[int(m.group(1) or 1)] = path
    return [found[k] for k in sorted(found)]


def append_secondary_dex(archive: ApkArchive, dex_bytes: bytes) -> ApkArchive:
    """Add a payload dex in the next classesN.dex slot; nothing else moves."""
    if hasattr(dex_bytes, "to_bytes"):
        dex_bytes = dex_bytes.to_bytes()
    names = dex_entry_names(archive)
    slots = sorted(int(_DEX_NAME_RE.match(n).group(1) or 1) for n in names)
    if slots != list(range(1, len(slots) + 1)):
        raise ValidationError("dex slots are not contiguous: %s" % names)
    next_slot = len(slots) + 1
    if next_slot > MAX_DEX_SLOTS:
        raise CapacityError("archive already holds %d dex files" % len(slots))
    name = "classes.dex" if next_slot == 1 else "classes%d.dex" % next_slot
    return archive.with_entry(name, dex_bytes, STORED)
