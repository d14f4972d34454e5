"""Client for a multi-engine scanning service plus the snapshot store.

The client talks to the HTTP surface the mock service exposes (file submit,
report fetch, reanalysis) and paces requests through a strict token bucket:
capacity one, refilled at the configured per-minute rate, so request spacing
is bounded below regardless of burstiness.

The snapshot store is an append-only JSONL file, one snapshot per line,
content-addressed by sha256.
"""

from __future__ import annotations

import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import requests

from .errors import ApkProbeError, ConflictError, FormatError, ValidationError
from .reports import ScanReport, Snapshot

DEFAULT_RATE_PER_MIN = 4.0
DEFAULT_MAX_UPLOAD = 32 * 1024 * 1024

ENV_URL = "AVS_API_URL"
ENV_KEY = "AVS_API_KEY"
ENV_RATE = "AVS_RATE_PER_MIN"


class TransportError(ApkProbeError):
    """Network-level failure; the operation is safe to retry."""


class QuotaError(ApkProbeError):
    def __init__(self, retry_after: float):
        super().__init__("quota exhausted, retry after %.1fs" % retry_after)
        self.retry_after = retry_after


class TokenBucket:
    """Strict pacing: one-token capacity, refill ``rate_per_min`` / 60 Hz.

    Safe for concurrent pipelining; callers serialize on the slot
    reservation and sleep outside the lock.
    """

    def __init__(self, rate_per_min: float, clock=time.monotonic,
                 sleep=time.sleep):
        if rate_per_min <= 0:
            raise ValidationError("rate must be positive")
        self.interval = 60.0 / rate_per_min
        self._clock = clock
        self._sleep = sleep
        self._ready_at = None
        self._lock = threading.Lock()

    def acquire(self) -> None:
        with self._lock:
            now = self._clock()
            slot = now if self._ready_at is None else max(now, self._ready_at)
            self._ready_at = slot + self.interval
        if slot > now:
            self._sleep(slot - now)


class ScanClient:
    def __init__(self, base_url: str, api_key: Optional[str] = None,
                 rate_per_min: float = DEFAULT_RATE_PER_MIN,
                 max_upload: int = DEFAULT_MAX_UPLOAD,
                 session: Optional[requests.Session] = None,
                 clock=time.monotonic, sleep=time.sleep):
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key
        self.max_upload = max_upload
        self.bucket = TokenBucket(rate_per_min, clock, sleep)
        self.session = session or requests.Session()

    @classmethod
    def from_env(cls, **overrides) -> "ScanClient":
        url = overrides.pop("base_url", None) or os.environ.get(ENV_URL)
        if not url:
            raise ValidationError("no endpoint: set %s or pass base_url" % ENV_URL)
        key = overrides.pop("api_key", None) or os.environ.get(ENV_KEY)
        rate = overrides.pop("rate_per_min", None) or float(
            os.environ.get(ENV_RATE, DEFAULT_RATE_PER_MIN))
        return cls(url, key, rate, **overrides)

    def _headers(self) -> dict:
        return {"x-apikey": self.api_key} if self.api_key else {}

    def _request(self, method: str, path: str, **kwargs):
        self.bucket.acquire()
        try:
            resp = self.session.request(method, self.base_url + path,
                                        headers=self._headers(),
                                        timeout=30, **kwargs)
        except requests.RequestException as exc:
            raise TransportError("request failed: %s" % exc)
        if resp.status_code == 429:
            retry = float(resp.headers.get("Retry-After", 60))
            raise QuotaError(retry)
        return resp

    def submit_file(self, data: bytes) -> str:
        """Upload bytes for scanning; returns the submission id."""
        if len(data) > self.max_upload:
            raise ValidationError("file of %d bytes exceeds %d byte limit"
                                  % (len(data), self.max_upload))
        resp = self._request("POST", "/files",
                             files={"file": ("sample.apk", data,
                                             "application/octet-stream")})
        if resp.status_code == 413:
            raise ValidationError("service rejected upload as oversize")
        if resp.status_code != 200:
            raise TransportError("submit failed with HTTP %d" % resp.status_code)
        try:
            return resp.json()["id"]
        except (ValueError, KeyError) as exc:
            raise FormatError("malformed submit response: %s" % exc)

    def fetch_report(self, sha256: str) -> Optional[ScanReport]:
        resp = self._request("GET", "/reports/%s" % sha256)
        if resp.status_code == 404:
            return None
        if resp.status_code != 200:
            raise TransportError("fetch failed with HTTP %d" % resp.status_code)
        try:
            return ScanReport.from_dict(resp.json())
        except (ValueError, KeyError) as exc:
            raise FormatError("malformed report payload: %s" % exc)

    def request_reanalysis(self, sha256: str) -> bool:
        """Ask the service to re-run its engines; False if hash unknown."""
        resp = self._request("POST", "/reanalyze/%s" % sha256)
        if resp.status_code == 404:
            return False
        if resp.status_code != 200:
            raise TransportError("reanalyze failed with HTTP %d" % resp.status_code)
        return True


class SnapshotStore:
    """Append-only JSONL store with a uniqueness key per snapshot."""

    def __init__(self, path):
        self.path = Path(path)
        self._snapshots: list[Snapshot] = []
        self._keys: set = set()
        if self.path.exists():
            with self.path.open("r", encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if line:
                        self._load_line(line)

    def _load_line(self, line: str) -> None:
        snapshot = Snapshot.from_json(line)
        key = snapshot.key()
        if key in self._keys:
            raise ConflictError("duplicate snapshot %r in store file" % (key,))
        self._keys.add(key)
        self._snapshots.append(snapshot)

    def __len__(self) -> int:
        return len(self._snapshots)

    def append(self, snapshot: Snapshot) -> int:
        key = snapshot.key()
        if key in self._keys:
            raise ConflictError("snapshot %r already stored" % (key,))
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(snapshot.to_json() + "\n")
        self._keys.add(key)
        self._snapshots.append(snapshot)
        return len(self._snapshots) - 1

    def query(self, sha256: Optional[str] = None, engine: Optional[str] = None,
              kind: Optional[str] = None, start: Optional[float] = None,
              end: Optional[float] = None) -> list:
        out = []
        for snap in self._snapshots:
            if sha256 is not None and snap.report.sha256 != sha256:
                continue
            if kind is not None and snap.kind != kind:
                continue
            if engine is not None and engine not in snap.report.verdicts:
                continue
            ts = snap.report.timestamp
            if start is not None and ts < start:
                continue
            if end is not None and ts > end:
                continue
            out.append(snap)
        out.sort(key=lambda s: s.report.timestamp)
        return out

    def latest_report(self, sha256: str, kind: Optional[str] = None):
        snaps = self.query(sha256=sha256, kind=kind)
        return snaps[-1].report if snaps else None


@dataclass
class ScanOutcome:
    sha256: str
    report: Optional[ScanReport]
    error: Optional[str] = None


def scan_and_snapshot(client: ScanClient, store: SnapshotStore, data: bytes,
                      kind: str = "first", day: Optional[int] = None,
                      poll_interval: float = 0.2,
                      max_polls: int = 50) -> ScanOutcome:
    """Submit, poll for the report, and append it to the store."""
    import hashlib

    sha256 = hashlib.sha256(data).hexdigest()
    client.submit_file(data)
    report = None
    for _ in range(max_polls):
        report = client.fetch_report(sha256)
        if report is not None:
            break
        time.sleep(poll_interval)
    if report is None:
        return ScanOutcome(sha256, None, "no report after %d polls" % max_polls)
    try:
        store.append(Snapshot(report, kind, day))
    except ConflictError as exc:
        return ScanOutcome(sha256, report, str(exc))
    return ScanOutcome(sha256, report)
