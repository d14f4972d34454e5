"""The pluggable detection engines behind the mock scanning service.

Each engine kind models one mechanism class: whole-file hash blacklists,
fuzzy chunk-hash similarity, certificate checks, static feature harvesting,
packer heuristics, and descriptor-driven sandboxing. Engines are isolated:
one engine's configuration or failure never changes another's verdict.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field as dc_field
from typing import Optional

from ..archive import ApkArchive, compute_digests, open_archive
from ..dex import parse_dex
from ..dex.multidex import dex_entry_names
from ..dex.refs import referenced_strings
from ..errors import ValidationError
from ..manifest import ManifestModel
from ..reports import EngineVerdict, ScanReport
from ..signing import cert_fingerprint, verify_v1
from ..transforms import MANIFEST_ENTRY, loader_stub_dex
from .chunkhash import chunk_signature, similarity
from .sandbox import SandboxProfile, run_sandbox

ENGINE_KINDS = ("hash-blacklist", "chunk-hash", "cert-check",
                "static-feature", "packer-heuristic", "sandbox")

_SCANNED_DIRS = ("assets/", "res/raw/", "lib/")


@dataclass
class EngineConfig:
    name: str
    kind: str
    params: dict = dc_field(default_factory=dict)
    version: str = "1.0"
    update: str = "20260101"

    def __post_init__(self):
        if self.kind not in ENGINE_KINDS:
            raise ValidationError("unknown engine kind %r" % self.kind)

    @classmethod
    def from_dict(cls, obj: dict) -> "EngineConfig":
        return cls(obj["name"], obj["kind"], dict(obj.get("params", {})),
                   obj.get("version", "1.0"), obj.get("update", "20260101"))

    def verdict(self, category: str, result: Optional[str] = None,
                method: Optional[str] = None) -> EngineVerdict:
        return EngineVerdict(category, self.name, self.update, self.version,
                             method or _METHODS[self.kind], result)


_METHODS = {
    "hash-blacklist": "blacklist",
    "chunk-hash": "blacklist",
    "cert-check": "blacklist",
    "static-feature": "static",
    "packer-heuristic": "static",
    "sandbox": "dynamic",
}


class ScanTarget:
    """Parses the submitted bytes once; engines share the views lazily."""

    def __init__(self, data: bytes):
        self.data = data
        self.digests = compute_digests(data)
        self._archive = None
        self._archive_tried = False
        self._dex_strings = None
        self._dex_structured = None
        self._manifest = None
        self._chunk_signature = None

    @property
    def chunk_sig(self) -> str:
        if self._chunk_signature is None:
            self._chunk_signature = chunk_signature(self.data)
        return self._chunk_signature

    @property
    def archive(self) -> Optional[ApkArchive]:
        if not self._archive_tried:
            self._archive_tried = True
            try:
                self._archive = open_archive(self.data)
            except Exception:
                self._archive = None
        return self._archive

    @property
    def manifest(self) -> Optional[ManifestModel]:
        if self._manifest is None and self.archive is not None \
                and self.archive.has(MANIFEST_ENTRY):
            try:
                self._manifest = ManifestModel.from_bytes(
                    self.archive.read(MANIFEST_ENTRY))
            except Exception:
                self._manifest = None
        return self._manifest

    def dex_features(self, primary_only: bool = False):
        """(referenced strings, type descriptors, method names) per dex."""
        if self._dex_structured is None:
            per_dex = {}
            if self.archive is not None:
                for name in dex_entry_names(self.archive):
                    try:
                        dex = parse_dex(self.archive.read(name))
                    except Exception:
                        continue
                    texts = list(referenced_strings(dex))
                    texts += [c.dotted for c in dex.classes]
                    texts += [m.name for m in dex.all_methods()]
                    per_dex[name] = texts
            self._dex_structured = per_dex
        if primary_only:
            return {k: v for k, v in self._dex_structured.items()
                    if k == "classes.dex"}
        return self._dex_structured

    def referenced_dex_strings(self) -> list:
        if self._dex_strings is None:
            out = []
            if self.archive is not None:
                for name in dex_entry_names(self.archive):
                    try:
                        out += referenced_strings(parse_dex(self.archive.read(name)))
                    except Exception:
                        continue
            self._dex_strings = out
        return self._dex_strings


def scan_file(data: bytes, engines, context=None) -> ScanReport:
    """One verdict per engine; engine exceptions surface as failures."""
    if not engines:
        raise ValidationError("engine list is empty")
    target = ScanTarget(data)
    import time
    timestamp = context.clock() if context is not None else time.time()
    report = ScanReport(target.digests.sha256, timestamp)
    for config in engines:
        try:
            report.add(_run_engine(target, config, context))
        except Exception:
            report.add(config.verdict("failure"))
    return report


def _run_engine(target: ScanTarget, config: EngineConfig,
                context) -> EngineVerdict:
    p = config.params
    if p.get("fail"):
        raise RuntimeError("configured failure")
    if p.get("timeout"):
        return config.verdict("timeout")
    if p.get("unsupported"):
        return config.verdict("type-unsupported")

    if config.kind == "hash-blacklist":
        return run_hash_engine(target, config)
    if config.kind == "chunk-hash":
        return run_chunk_engine(target, config)
    if config.kind == "cert-check":
        return run_cert_engine(target, config)
    if config.kind == "static-feature":
        return run_static_engine(target, config)
    if config.kind == "packer-heuristic":
        return run_packer_engine(target, config)
    if config.kind == "sandbox":
        return run_sandbox_engine(target, config, context)
    raise ValidationError("unknown engine kind %r" % config.kind)


def _lookup(table, key, default_label):
    """Blacklist tables are either {hash: label} or [hash, ...]."""
    if isinstance(table, dict):
        label = table.get(key)
        return label if label is not None else None
    if key in table:
        return default_label
    return None


def run_hash_engine(target: ScanTarget, config: EngineConfig) -> EngineVerdict:
    p = config.params
    default = p.get("label", "Blacklist.Generic")
    label = _lookup(p.get("sha256", ()), target.digests.sha256, default)
    if label is None:
        label = _lookup(p.get("md5", ()), target.digests.md5, default)
    if label is not None:
        return config.verdict("malicious", label)
    return config.verdict("undetected")


def run_chunk_engine(target: ScanTarget, config: EngineConfig) -> EngineVerdict:
    p = config.params
    threshold = p.get("threshold", 80)
    signature = target.chunk_sig
    table = p.get("signatures", ())
    pairs = table.items() if isinstance(table, dict) else \
        ((sig, p.get("label", "Blacklist.Fuzzy")) for sig in table)
    best = None
    for known, label in pairs:
        score = similarity(signature, known)
        if score >= threshold and (best is None or score > best[0]):
            best = (score, label)
    if best is not None:
        return config.verdict("malicious", best[1])
    return config.verdict("undetected")


def run_cert_engine(target: ScanTarget, config: EngineConfig) -> EngineVerdict:
    p = config.params
    strict = p.get("integrity_strict", False)
    if target.archive is None:
        return config.verdict("type-unsupported")
    check = verify_v1(target.archive)
    if check.state == "unsigned":
        if strict:
            return config.verdict("malicious", "Integrity.Unsigned")
        return config.verdict("undetected")
    if check.state == "invalid":
        if strict:
            return config.verdict("malicious", "Integrity.Tampered")
        return config.verdict("undetected")
    fingerprint = cert_fingerprint(check.certificate)
    if fingerprint in p.get("debug_fingerprints", ()):
        return config.verdict("malicious", "PUA.DebugKey")
    label = _lookup(p.get("fingerprint_blacklist", ()), fingerprint,
                    p.get("label", "Blacklist.Cert"))
    if label is not None:
        return config.verdict("malicious", label)
    return config.verdict("undetected")


def _entry_texts(path: str, data: bytes):
    """Feature blobs for one archive entry, descending one ZIP layer."""
    yield data
    if data[:4] == b"PK\x03\x04":
        try:
            inner = open_archive(data)
        except Exception:
            return
        for entry in inner.entries:
            yield entry.data


def run_static_engine(target: ScanTarget, config: EngineConfig) -> EngineVerdict:
    p = config.params
    rules = p.get("rules", {})
    threshold = p.get("threshold", 1)
    if target.archive is None:
        return config.verdict("type-unsupported")
    if p.get("require_valid_signature") and verify_v1(target.archive).state != "valid":
        # Integrity gate: an app that cannot install cannot pose risk.
        return config.verdict("undetected")

    blobs: list[bytes] = []
    for texts in target.dex_features(p.get("scope") == "primary-dex").values():
        blobs.append("\n".join(texts).encode("utf-8", "surrogateescape"))
    if target.manifest is not None:
        blobs.append("\n".join(target.manifest.permissions).encode())
    for entry in (target.archive.entries if target.archive else ()):
        if entry.path.startswith(_SCANNED_DIRS):
            blobs.extend(_entry_texts(entry.path, entry.data))

    matched = {}
    for token, weight in rules.items():
        needle = token.encode("utf-8")
        if any(needle in blob for blob in blobs):
            matched[token] = weight
    score = sum(matched.values())
    if matched and score >= threshold:
        top = max(matched, key=lambda t: (matched[t], t))
        label = p.get("label", "Heur.{token}").replace("{token}", top)
        return config.verdict("malicious", label)
    return config.verdict("undetected")


def byte_entropy(data: bytes) -> float:
    """Shannon entropy in bits per byte."""
    if not data:
        return 0.0
    counts = [0] * 256
    for b in data:
        counts[b] += 1
    n = len(data)
    return -sum(c / n * math.log2(c / n) for c in counts if c)


def run_packer_engine(target: ScanTarget, config: EngineConfig) -> EngineVerdict:
    p = config.params
    if target.archive is None:
        return config.verdict("type-unsupported")
    stub_hashes = set(p.get("stub_sha256", ()))
    if not stub_hashes:
        stub_hashes = {hashlib.sha256(loader_stub_dex()).hexdigest()}
    entropy_threshold = p.get("entropy_threshold", 7.5)
    label = p.get("label", "Packed.Generic")

    if target.archive.has("classes.dex"):
        digest = hashlib.sha256(target.archive.read("classes.dex")).hexdigest()
        if digest in stub_hashes:
            return config.verdict("malicious", label)
    for entry in target.archive.entries:
        if entry.path.startswith("assets/enc/") and \
                byte_entropy(entry.data) > entropy_threshold:
            return config.verdict("malicious", label)
    return config.verdict("undetected")


def run_sandbox_engine(target: ScanTarget, config: EngineConfig,
                       context) -> EngineVerdict:
    if context is None or context.tracker is None:
        raise ValidationError("sandbox engine needs a scan context")
    p = config.params
    profile = context.profile(p.get("profile", "default"))
    payload_engines = [EngineConfig.from_dict(e)
                       for e in p.get("payload_engines", ())]

    def payload_scanner(payload: bytes) -> bool:
        if not payload_engines:
            return False
        report = scan_file(payload, payload_engines, context)
        return any(v.is_malicious for v in report.verdicts.values())

    run = run_sandbox(target.referenced_dex_strings(), profile,
                      payload_scanner, context.tracker,
                      source=context.sandbox_source)
    context.note_events(config.name, target.digests.sha256, run.events)
    if run.malicious:
        return config.verdict("malicious", run.label)
    return config.verdict("undetected")


class ScanContext:
    """Shared service state handed to engines: clock, tracker, profiles."""

    def __init__(self, clock=None, tracker=None, profiles=None,
                 sandbox_source: str = "sandbox-1"):
        import time
        self.clock = clock or time.time
        self.tracker = tracker
        self.profiles = dict(profiles or {})
        self.sandbox_source = sandbox_source
        self.sandbox_events: list = []

    def profile(self, name: str) -> SandboxProfile:
        if name in self.profiles:
            return self.profiles[name]
        if name == "default":
            return SandboxProfile()
        raise ValidationError("unknown sandbox profile %r" % name)

    def note_events(self, engine: str, sha256: str, events) -> None:
        self.sandbox_events.append(
            {"engine": engine, "sha256": sha256, "events": list(events)})
