"""Tracking server state: an append-only request log plus payload hosting.

Every request that reaches the tracking endpoints is recorded, including
probes with unknown or mangled tokens; fuzzed-URL traffic must stay
observable.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional


@dataclass(frozen=True)
class TrackingEntry:
    token: Optional[str]
    path: str
    user_agent: str
    source: str
    timestamp: float


def token_of_path(path: str) -> Optional[str]:
    parts = [p for p in path.split("/") if p]
    if len(parts) >= 2 and parts[0] in ("p", "d"):
        return parts[1]
    return None


class TrackingLog:
    """Append-only; timestamps never decrease."""

    def __init__(self, clock=time.time):
        self._clock = clock
        self._entries: list[TrackingEntry] = []
        self._last_ts = float("-inf")

    def record(self, path: str, source: str, user_agent: str) -> int:
        ts = max(self._clock(), self._last_ts)
        self._last_ts = ts
        entry = TrackingEntry(token_of_path(path), path, user_agent, source, ts)
        self._entries.append(entry)
        return len(self._entries) - 1

    def entries(self) -> list:
        return list(self._entries)

    def __len__(self) -> int:
        return len(self._entries)


class Tracker:
    """In-process face of the tracking server used by the sandbox."""

    def __init__(self, log: TrackingLog, payloads: Optional[dict] = None,
                 base_url: str = "http://tracker.local"):
        self.log = log
        self.payloads = dict(payloads or {})
        self.base_url = base_url.rstrip("/")

    def _path_of(self, url: str) -> Optional[str]:
        if not url.startswith(self.base_url):
            return None
        return url[len(self.base_url):] or "/"

    def visit(self, url: str, source: str, user_agent: str) -> bool:
        """GET a URL; recorded only if it targets this tracking server."""
        path = self._path_of(url)
        if path is None:
            return False
        self.log.record(path, source, user_agent)
        return True

    def fetch(self, url: str, source: str, user_agent: str) -> Optional[bytes]:
        """Download a payload; the request is recorded either way."""
        path = self._path_of(url)
        if path is None:
            return None
        self.log.record(path, source, user_agent)
        return self.payloads.get(token_of_path(path))
