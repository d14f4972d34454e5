"""Malware label normalization: raw engine labels to family names.

Follows the classic pipeline: suffix/punctuation-driven tokenization, stop
token filtering (platform tags, generic class words, hex and numeric junk,
short fragments), then alias replacement. The first surviving token is the
family; labels with nothing left collapse to "generic". The stop and alias
lists ship as versioned data files.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

_TOKEN_SPLIT = re.compile(r"[^a-z0-9]+")
_HEX_ONLY = re.compile(r"^[0-9a-f]+$")
_NUM_ONLY = re.compile(r"^[0-9]+$")
_MIN_TOKEN_LEN = 4


@dataclass(frozen=True)
class FamilyLabel:
    raw: str
    tokens: tuple
    family: str


@lru_cache(maxsize=1)
def stop_tokens() -> frozenset:
    text = (resources.files("apkprobe.data") / "stop_tokens.txt").read_text()
    return frozenset(line.strip() for line in text.splitlines()
                     if line.strip() and not line.startswith("#"))


@lru_cache(maxsize=1)
def alias_map() -> dict:
    text = (resources.files("apkprobe.data") / "aliases.txt").read_text()
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        alias, canonical = line.split()[:2]
        out[alias] = canonical
    return out


def _keep(token: str) -> bool:
    if len(token) < _MIN_TOKEN_LEN:
        return False
    if token in stop_tokens():
        return False
    if _NUM_ONLY.match(token) or _HEX_ONLY.match(token):
        return False
    return True


def normalize_label(raw: str) -> FamilyLabel:
    """Normalize one raw engine label; idempotent on family names."""
    aliases = alias_map()
    surviving = []
    for token in _TOKEN_SPLIT.split(raw.lower()):
        if not token or not _keep(token):
            continue
        token = aliases.get(token, token)
        if _keep(token):
            surviving.append(token)
    family = surviving[0] if surviving else "generic"
    return FamilyLabel(raw, tuple(surviving), family)


def same_family(label_a: str, label_b: str) -> bool:
    return normalize_label(label_a).family == normalize_label(label_b).family
