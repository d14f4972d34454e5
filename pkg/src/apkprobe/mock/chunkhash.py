"""Context-triggered piecewise hashing with edit-distance similarity.

A rolling hash over a 7-byte window selects chunk boundaries; each chunk
contributes one 6-bit code. Signatures carry two strings computed at block
size B and 2B so that files of moderately different sizes stay comparable.
Similarity is a 0..100 normalized edit-distance score; small edits to a
large file perturb only the codes near the touched boundaries, so the score
stays high where a whole-file digest would flip.
"""

from __future__ import annotations

from ..errors import ValidationError

ALPHABET = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/"
SIGNATURE_LENGTH = 64
MIN_BLOCK_SIZE = 3

_FNV_INIT = 0x28021967
_FNV_PRIME = 0x01000193
_MASK = 0xFFFFFFFF


class _RollingHash:
    __slots__ = ("h1", "h2", "h3", "window", "n")

    def __init__(self):
        self.h1 = 0
        self.h2 = 0
        self.h3 = 0
        self.window = bytearray(7)
        self.n = 0

    def update(self, byte: int) -> int:
        self.h2 = (self.h2 - self.h1 + 7 * byte) & _MASK
        self.h1 = (self.h1 + byte - self.window[self.n]) & _MASK
        self.window[self.n] = byte
        self.n = (self.n + 1) % 7
        self.h3 = ((self.h3 << 5) ^ byte) & _MASK
        return (self.h1 + self.h2 + self.h3) & _MASK


def _block_size(length: int) -> int:
    size = MIN_BLOCK_SIZE
    while size * SIGNATURE_LENGTH < length:
        size *= 2
    return size


def _piecewise(data: bytes, block: int) -> str:
    rolling = _RollingHash()
    chunk = _FNV_INIT
    codes = []
    for byte in data:
        h = rolling.update(byte)
        chunk = ((chunk * _FNV_PRIME) ^ byte) & _MASK
        if h % block == block - 1 and len(codes) < SIGNATURE_LENGTH - 1:
            codes.append(ALPHABET[chunk % 64])
            chunk = _FNV_INIT
    if chunk != _FNV_INIT or not codes:
        codes.append(ALPHABET[chunk % 64])
    return "".join(codes)


def chunk_signature(data: bytes) -> str:
    """Signature of the form ``<block>:<codes@B>:<codes@2B>``."""
    block = _block_size(len(data))
    return "%d:%s:%s" % (block, _piecewise(data, block),
                         _piecewise(data, block * 2))


def _parse(signature: str):
    try:
        block, s1, s2 = signature.split(":")
        return int(block), s1, s2
    except ValueError:
        raise ValidationError("malformed chunk signature %r" % signature)


def _edit_distance(a: str, b: str) -> int:
    if len(a) < len(b):
        a, b = b, a
    previous = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        current = [i]
        for j, cb in enumerate(b, 1):
            current.append(min(previous[j] + 1, current[j - 1] + 1,
                               previous[j - 1] + (ca != cb)))
        previous = current
    return previous[-1]


def _has_common_run(a: str, b: str, length: int = 7) -> bool:
    if len(a) < length or len(b) < length:
        return False
    runs = {a[i:i + length] for i in range(len(a) - length + 1)}
    return any(b[i:i + length] in runs for i in range(len(b) - length + 1))


def _score(a: str, b: str) -> int:
    if a == b:
        return 100
    if not _has_common_run(a, b):
        return 0
    distance = _edit_distance(a, b)
    return max(0, 100 - round(100 * distance / (len(a) + len(b))))


def similarity(sig_a: str, sig_b: str) -> int:
    """0..100; identical inputs score 100, unrelated inputs 0."""
    block_a, a1, a2 = _parse(sig_a)
    block_b, b1, b2 = _parse(sig_b)
    scores = []
    if block_a == block_b:
        scores += [_score(a1, b1), _score(a2, b2)]
    elif block_a == 2 * block_b:
        scores.append(_score(a1, b2))
    elif block_b == 2 * block_a:
        scores.append(_score(a2, b1))
    return max(scores, default=0)
