"""The simulated multi-engine scanning service and its HTTP surface.

Endpoints match what the scan client expects: POST /files (multipart),
GET /reports/{sha256}, POST /reanalyze/{sha256}, plus the tracking server's
GET /p/{token} and GET /d/{token}. The same service object can be driven
in-process by tests or served over HTTP for the full loop.
"""

from __future__ import annotations

import base64
import json
import threading
import time
from email.parser import BytesParser
from email.policy import default as default_email_policy
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Optional

from ..errors import ValidationError
from ..reports import ScanReport
from .engines import EngineConfig, ScanContext, scan_file
from .sandbox import SandboxProfile
from .tracking import Tracker, TrackingLog

DEFAULT_MAX_UPLOAD = 32 * 1024 * 1024


class QuotaExceeded(Exception):
    def __init__(self, retry_after: float):
        super().__init__("quota exceeded")
        self.retry_after = retry_after


class MockScanService:
    def __init__(self, engines, profiles: Optional[dict] = None,
                 payloads: Optional[dict] = None,
                 quota_per_min: Optional[int] = None,
                 max_upload: int = DEFAULT_MAX_UPLOAD,
                 api_key: Optional[str] = None,
                 tracking_base: str = "http://tracker.local",
                 clock=time.time):
        self.engines = list(engines)
        self.profiles = dict(profiles or {})
        self.quota_per_min = quota_per_min
        self.max_upload = max_upload
        self.api_key = api_key
        self.clock = clock
        self.tracking_log = TrackingLog(clock)
        self.tracker = Tracker(self.tracking_log, payloads, tracking_base)
        self.files: dict[str, bytes] = {}
        self.reports: dict[str, list[ScanReport]] = {}
        self.sandbox_events: list = []
        self._submit_times: list[float] = []
        self._lock = threading.Lock()

    # -- core operations ----------------------------------------------------

    def _context(self) -> ScanContext:
        return ScanContext(self.clock, self.tracker, self.profiles)

    def _scan(self, data: bytes) -> ScanReport:
        context = self._context()
        report = scan_file(data, self.engines, context)
        self.sandbox_events.extend(context.sandbox_events)
        previous = self.reports.get(report.sha256)
        if previous and report.timestamp <= previous[-1].timestamp:
            report.timestamp = previous[-1].timestamp + 1e-3
        self.reports.setdefault(report.sha256, []).append(report)
        return report

    def _check_quota(self) -> None:
        if self.quota_per_min is None:
            return
        now = self.clock()
        self._submit_times = [t for t in self._submit_times if now - t < 60.0]
        if len(self._submit_times) >= self.quota_per_min:
            retry = 60.0 - (now - self._submit_times[0])
            raise QuotaExceeded(max(retry, 0.1))
        self._submit_times.append(now)

    def submit(self, data: bytes) -> str:
        if len(data) > self.max_upload:
            raise ValidationError("upload exceeds %d bytes" % self.max_upload)
        with self._lock:
            self._check_quota()
            report = self._scan(data)
            self.files[report.sha256] = data
            return "sub-%s" % report.sha256[:24]

    def report_for(self, sha256: str) -> Optional[ScanReport]:
        with self._lock:
            history = self.reports.get(sha256)
            return history[-1] if history else None

    def reanalyze(self, sha256: str) -> bool:
        with self._lock:
            data = self.files.get(sha256)
            if data is None:
                return False
            self._scan(data)
            return True

    def track_get(self, path: str, source: str, user_agent: str):
        """Tracking endpoints; returns payload bytes for /d/ hits."""
        with self._lock:
            self.tracking_log.record(path, source, user_agent)
            if path.startswith("/d/"):
                token = path.split("/")[2] if len(path.split("/")) > 2 else None
                return self.tracker.payloads.get(token)
            return None


# -- configuration ------------------------------------------------------------

def service_from_config(obj: dict, clock=time.time) -> MockScanService:
    engines = [EngineConfig.from_dict(e) for e in obj.get("engines", ())]
    profiles = {name: SandboxProfile.from_dict(name, p)
                for name, p in obj.get("profiles", {}).items()}
    payloads = {token: base64.b64decode(blob)
                for token, blob in obj.get("payloads", {}).items()}
    return MockScanService(
        engines, profiles, payloads,
        quota_per_min=obj.get("quota_per_min"),
        max_upload=obj.get("max_upload", DEFAULT_MAX_UPLOAD),
        api_key=obj.get("api_key"),
        tracking_base=obj.get("tracking_base", "http://tracker.local"),
        clock=clock)


def load_service_config(path) -> MockScanService:
    with Path(path).open("r", encoding="utf-8") as fh:
        return service_from_config(json.load(fh))


# -- HTTP surface -------------------------------------------------------------

class _Handler(BaseHTTPRequestHandler):
    service: MockScanService = None  # set by make_http_server

    def log_message(self, fmt, *args):  # quiet by default
        pass

    def _json(self, status: int, obj: dict, headers=()):
        body = json.dumps(obj).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        for key, value in headers:
            self.send_header(key, value)
        self.end_headers()
        self.wfile.write(body)

    def _authorized(self) -> bool:
        key = self.service.api_key
        return key is None or self.headers.get("x-apikey") == key

    def do_GET(self):
        if self.path.startswith(("/p/", "/d/")):
            payload = self.service.track_get(
                self.path, self.client_address[0],
                self.headers.get("User-Agent", ""))
            if self.path.startswith("/d/"):
                if payload is None:
                    self._json(404, {"error": "no payload for token"})
                else:
                    self.send_response(200)
                    self.send_header("Content-Type", "application/octet-stream")
                    self.send_header("Content-Length", str(len(payload)))
                    self.end_headers()
                    self.wfile.write(payload)
            else:
                self._json(200, {"status": "ok"})
            return
        if not self._authorized():
            self._json(401, {"error": "bad api key"})
            return
        if self.path.startswith("/reports/"):
            sha256 = self.path[len("/reports/"):]
            report = self.service.report_for(sha256)
            if report is None:
                self._json(404, {"error": "not-found"})
            else:
                self._json(200, report.to_dict())
            return
        self._json(404, {"error": "no such endpoint"})

    def do_POST(self):
        if not self._authorized():
            self._json(401, {"error": "bad api key"})
            return
        if self.path == "/files":
            self._handle_submit()
            return
        if self.path.startswith("/reanalyze/"):
            sha256 = self.path[len("/reanalyze/"):]
            if self.service.reanalyze(sha256):
                self._json(200, {"status": "queued"})
            else:
                self._json(404, {"error": "not-found"})
            return
        self._json(404, {"error": "no such endpoint"})

    def _handle_submit(self):
        length = int(self.headers.get("Content-Length", 0))
        if length > self.service.max_upload * 2:
            self._json(413, {"error": "oversize"})
            return
        body = self.rfile.read(length)
        data = _extract_multipart_file(self.headers.get("Content-Type", ""), body)
        if data is None:
            self._json(400, {"error": "expected multipart file field"})
            return
        try:
            submission = self.service.submit(data)
        except QuotaExceeded as exc:
            self._json(429, {"error": "quota"},
                       headers=[("Retry-After", "%.1f" % exc.retry_after)])
            return
        except ValidationError as exc:
            self._json(413, {"error": str(exc)})
            return
        self._json(200, {"id": submission})


def _extract_multipart_file(content_type: str, body: bytes) -> Optional[bytes]:
    if "multipart/form-data" not in content_type:
        return None
    message = BytesParser(policy=default_email_policy).parsebytes(
        b"Content-Type: " + content_type.encode() + b"\r\n\r\n" + body)
    for part in message.iter_parts():
        if part.get_param("name", header="content-disposition") == "file":
            return part.get_payload(decode=True)
    return None


def make_http_server(service: MockScanService, host: str = "127.0.0.1",
                     port: int = 0) -> ThreadingHTTPServer:
    handler = type("Handler", (_Handler,), {"service": service})
    return ThreadingHTTPServer((host, port), handler)


def serve_in_thread(service: MockScanService, host: str = "127.0.0.1",
                    port: int = 0):
    """Start the HTTP surface on a daemon thread; returns (server, base_url)."""
    server = make_http_server(service, host, port)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server, "http://%s:%d" % server.server_address
