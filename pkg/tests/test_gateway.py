"""Scan client, token bucket pacing, snapshot store."""

import hashlib
import json

import pytest

from apkprobe.errors import ConflictError, ValidationError
from apkprobe.gateway import (
    QuotaError,
    ScanClient,
    SnapshotStore,
    TokenBucket,
    scan_and_snapshot,
)
from apkprobe.mock import EngineConfig, MockScanService, serve_in_thread
from apkprobe.reports import EngineVerdict, ScanReport, Snapshot


class FakeClock:
    def __init__(self):
        self.now = 0.0
        self.slept = 0.0

    def __call__(self):
        return self.now

    def sleep(self, seconds):
        assert seconds >= 0
        self.now += seconds
        self.slept += seconds


def test_token_bucket_enforces_spacing():
    clock = FakeClock()
    bucket = TokenBucket(4.0, clock=clock, sleep=clock.sleep)
    for _ in range(10):
        bucket.acquire()
    # 10 requests at 4/min: 9 inter-request gaps of 15s each
    assert clock.now >= 135.0


def test_token_bucket_does_not_oversleep_when_slow():
    clock = FakeClock()
    bucket = TokenBucket(60.0, clock=clock, sleep=clock.sleep)
    bucket.acquire()
    clock.now += 10.0  # slower than the 1s interval
    bucket.acquire()
    assert clock.slept == 0.0


def test_rate_must_be_positive():
    with pytest.raises(ValidationError):
        TokenBucket(0)


@pytest.fixture()
def service_url():
    engines = [EngineConfig("Hash", "hash-blacklist",
                            {"sha256": [hashlib.sha256(b"bad").hexdigest()]})]
    service = MockScanService(engines)
    server, url = serve_in_thread(service)
    yield url, service
    server.shutdown()


def fast_client(url, **kw):
    clock = FakeClock()
    return ScanClient(url, rate_per_min=100000, **kw)


def test_submit_and_fetch(service_url):
    url, _ = service_url
    client = fast_client(url)
    submission = client.submit_file(b"bad")
    assert submission
    report = client.fetch_report(hashlib.sha256(b"bad").hexdigest())
    assert report is not None
    assert report.verdicts["Hash"].category == "malicious"


def test_content_addressing(service_url):
    url, service = service_url
    client = fast_client(url)
    client.submit_file(b"same bytes")
    client.submit_file(b"same bytes")
    sha = hashlib.sha256(b"same bytes").hexdigest()
    assert sha in service.files
    assert client.fetch_report(sha).sha256 == sha


def test_unknown_hash_is_none(service_url):
    url, _ = service_url
    assert fast_client(url).fetch_report("0" * 64) is None


def test_reanalysis_bumps_timestamp(service_url):
    url, _ = service_url
    client = fast_client(url)
    client.submit_file(b"bad")
    sha = hashlib.sha256(b"bad").hexdigest()
    first = client.fetch_report(sha)
    assert client.request_reanalysis(sha)
    second = client.fetch_report(sha)
    assert second.timestamp > first.timestamp


def test_reanalysis_unknown_hash(service_url):
    url, _ = service_url
    assert not fast_client(url).request_reanalysis("1" * 64)


def test_client_side_size_limit(service_url):
    url, _ = service_url
    client = ScanClient(url, rate_per_min=100000, max_upload=100)
    with pytest.raises(ValidationError):
        client.submit_file(b"x" * 101)


def test_quota_produces_retry_after():
    engines = [EngineConfig("Hash", "hash-blacklist", {})]
    service = MockScanService(engines, quota_per_min=1)
    server, url = serve_in_thread(service)
    try:
        client = fast_client(url)
        client.submit_file(b"one")
        with pytest.raises(QuotaError) as err:
            client.submit_file(b"two")
        assert err.value.retry_after > 0
    finally:
        server.shutdown()


def test_client_from_env(monkeypatch):
    monkeypatch.setenv("AVS_API_URL", "http://svc.example")
    monkeypatch.setenv("AVS_API_KEY", "k123")
    monkeypatch.setenv("AVS_RATE_PER_MIN", "7.5")
    client = ScanClient.from_env()
    assert client.base_url == "http://svc.example"
    assert client.api_key == "k123"
    assert client.bucket.interval == pytest.approx(60.0 / 7.5)
    monkeypatch.delenv("AVS_API_URL")
    with pytest.raises(ValidationError):
        ScanClient.from_env()


def test_server_side_oversize_is_413():
    engines = [EngineConfig("Hash", "hash-blacklist", {})]
    service = MockScanService(engines, max_upload=64)
    server, url = serve_in_thread(service)
    try:
        client = ScanClient(url, rate_per_min=100000, max_upload=10_000)
        with pytest.raises(ValidationError):
            client.submit_file(b"y" * 100)
    finally:
        server.shutdown()


def test_api_key_required_when_configured():
    engines = [EngineConfig("Hash", "hash-blacklist", {})]
    service = MockScanService(engines, api_key="sekrit")
    server, url = serve_in_thread(service)
    try:
        from apkprobe.gateway import TransportError
        good = ScanClient(url, api_key="sekrit", rate_per_min=100000)
        good.submit_file(b"data")
        bad = ScanClient(url, rate_per_min=100000)
        with pytest.raises(TransportError):
            bad.submit_file(b"data")
    finally:
        server.shutdown()


# -- snapshot store -----------------------------------------------------------

def report_fixture(sha="a" * 64, ts=1.0, engine="E", category="undetected",
                   result=None):
    report = ScanReport(sha, ts)
    report.add(EngineVerdict(category, engine, "20260101", "1.0",
                             "blacklist", result))
    return report


def test_store_append_and_query(tmp_path):
    store = SnapshotStore(tmp_path / "snaps.jsonl")
    pos = store.append(Snapshot(report_fixture(), "first"))
    assert pos == 0
    assert len(store.query()) == 1
    assert store.query(sha256="a" * 64)[0].kind == "first"
    assert store.query(sha256="b" * 64) == []


def test_store_rejects_duplicates(tmp_path):
    store = SnapshotStore(tmp_path / "snaps.jsonl")
    store.append(Snapshot(report_fixture(), "first"))
    with pytest.raises(ConflictError):
        store.append(Snapshot(report_fixture(), "first"))


def test_store_is_append_only_on_disk(tmp_path):
    path = tmp_path / "snaps.jsonl"
    store = SnapshotStore(path)
    digests = []
    for i in range(5):
        store.append(Snapshot(report_fixture(ts=float(i)), "tracked", day=i + 1))
        digests.append(hashlib.sha256(path.read_bytes()).hexdigest())
    content = path.read_bytes()
    for i in range(4):
        # every earlier state is a byte prefix of every later state
        prior_len = len("\n".join(content.decode().splitlines()[:i + 1])) + 1
        assert hashlib.sha256(content[:prior_len]).hexdigest() == digests[i]


def test_store_reload_and_filters(tmp_path):
    path = tmp_path / "snaps.jsonl"
    store = SnapshotStore(path)
    store.append(Snapshot(report_fixture(ts=2.0), "first"))
    store.append(Snapshot(report_fixture(ts=5.0), "reanalysis"))
    store.append(Snapshot(report_fixture(sha="b" * 64, ts=3.0, engine="F"),
                          "first"))

    reloaded = SnapshotStore(path)
    assert len(reloaded) == 3
    assert [s.report.timestamp for s in reloaded.query()] == [2.0, 3.0, 5.0]
    assert all(s.kind == "reanalysis"
               for s in reloaded.query(kind="reanalysis"))
    assert len(reloaded.query(kind="first")) == 2
    assert len(reloaded.query(engine="F")) == 1
    assert len(reloaded.query(start=2.5, end=4.0)) == 1
    assert reloaded.latest_report("a" * 64).timestamp == 5.0


def test_store_1000_appends(tmp_path):
    store = SnapshotStore(tmp_path / "big.jsonl")
    for i in range(1000):
        store.append(Snapshot(report_fixture(ts=float(i)), "tracked",
                              day=i + 1))
    assert len(store.query()) == 1000


def test_scan_and_snapshot_round_trip(tmp_path, service_url):
    url, _ = service_url
    client = fast_client(url)
    store = SnapshotStore(tmp_path / "s.jsonl")
    outcome = scan_and_snapshot(client, store, b"bad")
    assert outcome.error is None
    assert outcome.sha256 == hashlib.sha256(b"bad").hexdigest()
    assert store.latest_report(outcome.sha256) is not None


def test_store_lines_are_valid_json(tmp_path):
    path = tmp_path / "s.jsonl"
    store = SnapshotStore(path)
    store.append(Snapshot(report_fixture(category="malicious",
                                         result="Troj.A"), "first"))
    row = json.loads(path.read_text().splitlines()[0])
    assert row["kind"] == "first"
    assert row["report"]["verdicts"]["E"]["result"] == "Troj.A"
    assert row["report"]["verdicts"]["E"]["engine_update"] == "20260101"
