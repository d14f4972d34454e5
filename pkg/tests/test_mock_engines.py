"""Mock engines: detection mechanisms, blind spots, isolation."""

import io
import zipfile

import pytest

from apkprobe.archive import compute_digests
from apkprobe.errors import ValidationError
from apkprobe.mock import (
    EngineConfig,
    ScanContext,
    byte_entropy,
    chunk_signature,
    scan_file,
)
from apkprobe.synth import token_app
from apkprobe.transforms import apply_pack, apply_sign_transform
from apkprobe.signing import generate_identity, WELL_KNOWN_STANDIN


@pytest.fixture(scope="module")
def app(identities):
    return token_app("com.eng.app", dex_tokens=["ENGINE_DEX_TOKEN"],
                     native_tokens=["ENGINE_NATIVE_TOKEN"],
                     manifest_tokens=["ENGINE_PERM_TOKEN"],
                     identity=identities("eng"))


def scan(data, engines):
    return scan_file(data, engines, ScanContext())


def test_hash_blacklist_hit(app):
    sha = compute_digests(app.to_bytes()).sha256
    config = EngineConfig("H", "hash-blacklist", {"sha256": {sha: "Blk.App"}})
    report = scan(app.to_bytes(), [config])
    assert report.verdicts["H"].category == "malicious"
    assert report.verdicts["H"].result == "Blk.App"


def test_hash_blacklist_md5(app):
    md5 = compute_digests(app.to_bytes()).md5
    config = EngineConfig("H", "hash-blacklist",
                          {"md5": [md5], "label": "Blk.MD5"})
    assert scan(app.to_bytes(), [config]).verdicts["H"].result == "Blk.MD5"


def test_hash_verdict_keyed_on_bytes_only(app):
    sha = compute_digests(app.to_bytes()).sha256
    config = EngineConfig("H", "hash-blacklist", {"sha256": [sha]})
    assert scan(app.to_bytes(), [config]).verdicts["H"].is_malicious
    renamed = app.without(["assets/data.bin"]) if app.has("assets/data.bin") \
        else app.with_entry("pad", b"x")
    assert not scan(renamed.to_bytes(), [config]).verdicts["H"].is_malicious


def test_benign_is_undetected(app):
    engines = [
        EngineConfig("H", "hash-blacklist", {}),
        EngineConfig("S", "static-feature", {"rules": {"NOT_THERE": 5},
                                             "threshold": 5}),
        EngineConfig("C", "cert-check", {}),
        EngineConfig("P", "packer-heuristic", {}),
    ]
    report = scan(app.to_bytes(), engines)
    assert all(v.category == "undetected" for v in report.verdicts.values())
    assert all(v.result is None for v in report.verdicts.values())


def test_failure_injection_is_isolated(app):
    sha = compute_digests(app.to_bytes()).sha256
    engines = [
        EngineConfig("Broken", "static-feature", {"fail": True}),
        EngineConfig("H", "hash-blacklist", {"sha256": [sha]}),
    ]
    report = scan(app.to_bytes(), engines)
    assert report.verdicts["Broken"].category == "failure"
    assert report.verdicts["H"].category == "malicious"


def test_timeout_and_unsupported_injection(app):
    engines = [EngineConfig("T", "static-feature", {"timeout": True}),
               EngineConfig("U", "static-feature", {"unsupported": True})]
    report = scan(app.to_bytes(), engines)
    assert report.verdicts["T"].category == "timeout"
    assert report.verdicts["U"].category == "type-unsupported"


def test_engine_isolation_property(app):
    sha = compute_digests(app.to_bytes()).sha256
    full = [
        EngineConfig("H", "hash-blacklist", {"sha256": [sha]}),
        EngineConfig("S", "static-feature",
                     {"rules": {"ENGINE_DEX_TOKEN": 10}, "threshold": 10}),
        EngineConfig("C", "cert-check", {}),
    ]
    baseline = scan(app.to_bytes(), full)
    for removed in range(len(full)):
        subset = [e for i, e in enumerate(full) if i != removed]
        report = scan(app.to_bytes(), subset)
        for config in subset:
            assert report.verdicts[config.name] == \
                baseline.verdicts[config.name]


def test_scan_requires_engines(app):
    with pytest.raises(ValidationError):
        scan(app.to_bytes(), [])


def test_determinism(app):
    engines = [EngineConfig("S", "static-feature",
                            {"rules": {"ENGINE_DEX_TOKEN": 3}, "threshold": 3})]
    context = ScanContext(clock=lambda: 42.0)
    one = scan_file(app.to_bytes(), engines, context)
    two = scan_file(app.to_bytes(), engines, context)
    assert one.to_dict() == two.to_dict()


# -- chunk-hash engine ---------------------------------------------------------

def test_chunk_engine_flags_near_duplicate(app):
    data = app.to_bytes()
    variant = bytearray(data)
    variant[len(variant) // 2] ^= 0x01  # corrupt one byte inside an entry
    config = EngineConfig("F", "chunk-hash",
                          {"signatures": {chunk_signature(data): "Fuzz.App"},
                           "threshold": 80})
    report = scan(bytes(variant), [config])
    assert report.verdicts["F"].result == "Fuzz.App"
    other = token_app("com.other.app", dex_tokens=["X"],
                      identity=generate_identity(WELL_KNOWN_STANDIN))
    assert scan(other.to_bytes(), [config]).verdicts["F"].category == \
        "undetected"


# -- cert engine -----------------------------------------------------------------

def test_cert_engine_debug_key(app, standin_identity):
    s2, _ = apply_sign_transform(app, "S2", standin_identity)
    config = EngineConfig("C", "cert-check",
                          {"debug_fingerprints": [standin_identity.fingerprint()]})
    report = scan(s2.to_bytes(), [config])
    assert report.verdicts["C"].result == "PUA.DebugKey"
    assert not scan(app.to_bytes(), [config]).verdicts["C"].is_malicious


def test_cert_engine_integrity_strict(app):
    s1, _ = apply_sign_transform(app, "S1")
    strict = EngineConfig("C", "cert-check", {"integrity_strict": True})
    lax = EngineConfig("C", "cert-check", {})
    assert scan(s1.to_bytes(), [strict]).verdicts["C"].result == \
        "Integrity.Unsigned"
    assert scan(s1.to_bytes(), [lax]).verdicts["C"].category == "undetected"


def test_cert_engine_fingerprint_blacklist(app, identities):
    fingerprint = identities("eng").fingerprint()
    config = EngineConfig("C", "cert-check",
                          {"fingerprint_blacklist": {fingerprint: "Cert.Bad"}})
    assert scan(app.to_bytes(), [config]).verdicts["C"].result == "Cert.Bad"


def test_cert_engine_non_archive():
    config = EngineConfig("C", "cert-check", {})
    assert scan(b"not a zip", [config]).verdicts["C"].category == \
        "type-unsupported"


# -- static engine ----------------------------------------------------------------

def static(rules, threshold, **params):
    params = {"rules": rules, "threshold": threshold, **params}
    return EngineConfig("S", "static-feature", params)


def test_static_threshold_boundary(app):
    hit = static({"ENGINE_DEX_TOKEN": 10}, 10)
    miss = static({"ENGINE_DEX_TOKEN": 10}, 11)
    assert scan(app.to_bytes(), [hit]).verdicts["S"].is_malicious
    assert not scan(app.to_bytes(), [miss]).verdicts["S"].is_malicious


def test_static_score_sums_distinct_tokens(app):
    both = static({"ENGINE_DEX_TOKEN": 6, "ENGINE_NATIVE_TOKEN": 6}, 12)
    assert scan(app.to_bytes(), [both]).verdicts["S"].is_malicious


def test_static_sees_manifest_permissions(app):
    config = static({"ENGINE_PERM_TOKEN": 4}, 4)
    assert scan(app.to_bytes(), [config]).verdicts["S"].is_malicious


def test_static_payload_in_assets_still_flagged(app, identities):
    carrier = app.with_entry("assets/payload.bin", b"prefix EVIL_ASSET_T suffix")
    config = static({"EVIL_ASSET_T": 8}, 8)
    assert scan(carrier.to_bytes(), [config]).verdicts["S"].is_malicious


def test_static_descends_single_zip_layer(app):
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_DEFLATED) as z:
        z.writestr("inner.txt", "xx EVIL_ZIPPED_T yy")
    carrier = app.with_entry("assets/bundle.zip", buf.getvalue())
    config = static({"EVIL_ZIPPED_T": 8}, 8)
    assert scan(carrier.to_bytes(), [config]).verdicts["S"].is_malicious


def test_static_does_not_recurse_nested_zips(app):
    # deflate keeps the token from appearing as a raw substring
    inner = io.BytesIO()
    with zipfile.ZipFile(inner, "w", zipfile.ZIP_DEFLATED) as z:
        z.writestr("deep.txt", "xx EVIL_DEEP_T yy" * 3)
    outer = io.BytesIO()
    with zipfile.ZipFile(outer, "w", zipfile.ZIP_DEFLATED) as z:
        z.writestr("layer2.zip", inner.getvalue())
    carrier = app.with_entry("assets/nested.zip", outer.getvalue())
    config = static({"EVIL_DEEP_T": 8}, 8)
    assert not scan(carrier.to_bytes(), [config]).verdicts["S"].is_malicious


def test_static_split_payload_evades(app):
    # Each half is below threshold on its own; no cross-file token match.
    carrier = app.with_entry("assets/p1", b"EVIL_SPLIT")
    carrier = carrier.with_entry("assets/p2", b"_TOKEN_HALF")
    config = static({"EVIL_SPLIT_TOKEN_HALF": 8}, 8)
    assert not scan(carrier.to_bytes(), [config]).verdicts["S"].is_malicious
    joined = app.with_entry("assets/p", b"EVIL_SPLIT_TOKEN_HALF")
    assert scan(joined.to_bytes(), [config]).verdicts["S"].is_malicious


def test_static_primary_dex_scope_misses_secondary(app, identities):
    from apkprobe.dex import ClassSpec, DexBuilder, MethodSpec
    from apkprobe.dex.multidex import append_secondary_dex
    from apkprobe.signing import sign_v1, strip_signature

    builder = DexBuilder()
    spec = ClassSpec("Lcom/sec/Hidden;")
    spec.methods.append(MethodSpec("h", body=[
        ("const-string", 0, "EVIL_SECONDARY_T"), ("return-void",)]))
    builder.add_class(spec)
    carrier = append_secondary_dex(strip_signature(app), builder.build())
    carrier = sign_v1(carrier, identities("scope"))

    crippled = static({"EVIL_SECONDARY_T": 8}, 8, scope="primary-dex")
    full = static({"EVIL_SECONDARY_T": 8}, 8)
    assert not scan(carrier.to_bytes(), [crippled]).verdicts["S"].is_malicious
    assert scan(carrier.to_bytes(), [full]).verdicts["S"].is_malicious


def test_static_integrity_gate(app):
    s1, _ = apply_sign_transform(app, "S1")
    gated = static({"ENGINE_DEX_TOKEN": 10}, 10,
                   require_valid_signature=True)
    assert scan(app.to_bytes(), [gated]).verdicts["S"].is_malicious
    assert not scan(s1.to_bytes(), [gated]).verdicts["S"].is_malicious


def test_static_label_template(app):
    config = static({"ENGINE_DEX_TOKEN": 9}, 5, label="Andr.{token}.A")
    assert scan(app.to_bytes(), [config]).verdicts["S"].result == \
        "Andr.ENGINE_DEX_TOKEN.A"


# -- packer engine -----------------------------------------------------------------

def test_packer_flags_packed_output(app, identities):
    packed, _ = apply_pack(app, bytes(32), identities("peng"))
    config = EngineConfig("P", "packer-heuristic", {})
    assert scan(packed.to_bytes(), [config]).verdicts["P"].result == \
        "Packed.Generic"
    assert not scan(app.to_bytes(), [config]).verdicts["P"].is_malicious


def test_packer_entropy_restricted_to_enc_dir(app):
    noise = bytes(range(256)) * 16  # max-entropy blob
    assert byte_entropy(noise) > 7.5
    under_res = app.with_entry("res/raw/photo.jpg", noise)
    under_enc = app.with_entry("assets/enc/blob.bin", noise)
    config = EngineConfig("P", "packer-heuristic", {})
    assert not scan(under_res.to_bytes(), [config]).verdicts["P"].is_malicious
    assert scan(under_enc.to_bytes(), [config]).verdicts["P"].is_malicious


def test_byte_entropy_bounds():
    assert byte_entropy(b"") == 0.0
    assert byte_entropy(b"\x00" * 1000) == 0.0
    assert 7.9 < byte_entropy(bytes(range(256)) * 64) <= 8.0
