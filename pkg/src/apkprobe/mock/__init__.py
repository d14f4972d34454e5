"""Simulated multi-engine scanning service, engines, sandbox, tracking."""

from .chunkhash import chunk_signature, similarity  # noqa: F401
from .engines import (  # noqa: F401
    EngineConfig,
    ScanContext,
    ScanTarget,
    byte_entropy,
    run_cert_engine,
    run_chunk_engine,
    run_hash_engine,
    run_packer_engine,
    run_static_engine,
    scan_file,
)
from .sandbox import SandboxProfile, SandboxRun, run_sandbox, trigger_latency  # noqa: F401
from .service import (  # noqa: F401
    MockScanService,
    QuotaExceeded,
    load_service_config,
    make_http_server,
    serve_in_thread,
    service_from_config,
)
from .tracking import Tracker, TrackingEntry, TrackingLog  # noqa: F401
