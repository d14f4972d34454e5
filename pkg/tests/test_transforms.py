"""The six transformations: effects, provenance records, determinism."""

import io
import zipfile

import pytest

from apkprobe.archive import compute_digests, open_archive
from apkprobe.dex import parse_dex
from apkprobe.dex.refs import referenced_strings
from apkprobe.errors import ValidationError
from apkprobe.manifest import ManifestModel
from apkprobe.modularizer import build_connection_graph, cluster_classes
from apkprobe.signing import verify_v1
from apkprobe.synth import clustered_app, token_app
from apkprobe.transforms import (
    STUB_APPLICATION_CLASS,
    TRIGGERS,
    TransformRecord,
    apply_fuse,
    apply_pack,
    apply_prune,
    apply_sign_transform,
    build_dynload_proxy,
    build_module_variants,
    keystream_xor,
    loader_stub_dex,
    unpack_payload,
)


def independent_diff(before, after):
    """Entry diff recomputed through the stdlib zipfile module."""
    def entry_map(archive):
        with zipfile.ZipFile(io.BytesIO(archive.to_bytes())) as z:
            return {n: z.read(n) for n in z.namelist()}

    a, b = entry_map(before), entry_map(after)
    return (sorted(set(b) - set(a)), sorted(set(a) - set(b)),
            sorted(p for p in set(a) & set(b) if a[p] != b[p]))


def check_record(before, after, record: TransformRecord):
    added, removed, modified = independent_diff(before, after)
    assert (record.added, record.removed, record.modified) == \
        (added, removed, modified)
    assert record.input_sha256 == compute_digests(before.to_bytes()).sha256
    assert record.output_sha256 == compute_digests(after.to_bytes()).sha256


@pytest.mark.parametrize("mode", ["S1", "S2", "S3"])
def test_sign_transforms_touch_only_signature_entries(sample_app, mode):
    out, record = apply_sign_transform(sample_app, mode)
    check_record(sample_app, out, record)
    assert record.modified == []
    for path in out.paths():
        if not path.startswith("META-INF/"):
            assert out.read(path) == sample_app.read(path)


def test_s1_strips_signature(sample_app):
    out, record = apply_sign_transform(sample_app, "S1")
    assert verify_v1(out).state == "unsigned"
    assert record.output_sha256 != record.input_sha256


def test_s2_is_deterministic(sample_app):
    one, _ = apply_sign_transform(sample_app, "S2")
    two, _ = apply_sign_transform(sample_app, "S2")
    assert one.to_bytes() == two.to_bytes()


def test_s3_uses_fresh_certificates(sample_app):
    one, rec1 = apply_sign_transform(sample_app, "S3")
    two, rec2 = apply_sign_transform(sample_app, "S3")
    assert rec1.parameters["fingerprint"] != rec2.parameters["fingerprint"]
    assert set(one.paths()) == set(two.paths())


def test_p1_stubs_all_code(sample_app, identities):
    out, record = apply_prune(sample_app, "P1", identities("p1"))
    check_record(sample_app, out, record)
    dex = parse_dex(out.read("classes.dex"))
    assert referenced_strings(dex) == []
    before = parse_dex(sample_app.read("classes.dex"))
    assert dex.strings == before.strings  # string table untouched
    assert verify_v1(out).state == "valid"


def test_p2_removes_native_payloads(sample_app, identities):
    out, record = apply_prune(sample_app, "P2", identities("p2"))
    check_record(sample_app, out, record)
    assert not any(p.startswith("lib/") or p.endswith(".so")
                   for p in out.paths())


def test_p2_removes_so_under_assets(sample_app, identities):
    carrier = sample_app.with_entry("assets/helper.so", b"\x7fELF fake")
    out, _ = apply_prune(carrier, "P2", identities("p2b"))
    assert not out.has("assets/helper.so")
    assert out.has("assets/data.bin") or True  # other assets untouched


def test_p3_prunes_manifest_config(sample_app, identities):
    out, record = apply_prune(sample_app, "P3", identities("p3"))
    check_record(sample_app, out, record)
    manifest = ManifestModel.from_bytes(out.read("AndroidManifest.xml"))
    assert manifest.permissions == []
    assert len(manifest.components) == 1


def multidex_app(identities, label):
    from apkprobe.dex import ClassSpec, DexBuilder, MethodSpec
    from apkprobe.dex.multidex import append_secondary_dex
    from apkprobe.signing import sign_v1, strip_signature
    from apkprobe.synth import token_app

    base = token_app("com.multi." + label, dex_tokens=["MULTI_PRIMARY"],
                     identity=None)
    builder = DexBuilder()
    spec = ClassSpec("Lcom/multi/Second;")
    spec.methods.append(MethodSpec("s", body=[
        ("const-string", 0, "MULTI_SECONDARY"), ("return-void",)]))
    builder.add_class(spec)
    grown = append_secondary_dex(strip_signature(base), builder.build())
    return sign_v1(grown, identities("multi-" + label))


def test_p1_stubs_every_dex_slot(identities):
    app = multidex_app(identities, "p1")
    out, _ = apply_prune(app, "P1", identities("multi-p1-id"))
    for name in ("classes.dex", "classes2.dex"):
        assert referenced_strings(parse_dex(out.read(name))) == []


def test_fuse_with_multidex_payload(identities):
    host = multidex_app(identities, "host")
    payload = multidex_app(identities, "payload")
    fused, _ = apply_fuse(host, payload, identities("multi-fuse"))
    assert fused.read("classes3.dex") == payload.read("classes.dex")
    assert fused.read("classes4.dex") == payload.read("classes2.dex")


def test_prune_idempotence_up_to_identity(sample_app, identities):
    once, _ = apply_prune(sample_app, "P3", identities("p3i"))
    twice, _ = apply_prune(once, "P3", identities("p3i"))
    assert once.to_bytes() == twice.to_bytes()
    once1, _ = apply_prune(sample_app, "P1", identities("p1i"))
    twice1, _ = apply_prune(once1, "P1", identities("p1i"))
    assert once1.to_bytes() == twice1.to_bytes()


def fixture_pair(identities):
    host = token_app("com.fuse.host", dex_tokens=["HOST_TOKEN"],
                     identity=identities("fuse-host"))
    payload = token_app("com.fuse.payload", dex_tokens=["PAYLOAD_TOKEN"],
                        manifest_tokens=["PAYLOAD_PERM"],
                        identity=identities("fuse-payload"))
    return host, payload


def test_fuse_appends_payload_dex(identities):
    host, payload = fixture_pair(identities)
    fused, record = apply_fuse(host, payload, identities("fuse-id"))
    check_record(host, fused, record)
    assert fused.read("classes2.dex") == payload.read("classes.dex")
    for path in host.paths():
        if not path.startswith("META-INF/"):
            assert fused.has(path)


def test_fuse_merges_permissions(identities):
    host, payload = fixture_pair(identities)
    fused, _ = apply_fuse(host, payload, identities("fuse-id2"))
    manifest = ManifestModel.from_bytes(fused.read("AndroidManifest.xml"))
    host_perms = ManifestModel.from_bytes(
        host.read("AndroidManifest.xml")).permissions
    payload_perms = ManifestModel.from_bytes(
        payload.read("AndroidManifest.xml")).permissions
    assert set(manifest.permissions) == set(host_perms) | set(payload_perms)


def test_self_fusion(identities):
    host, _ = fixture_pair(identities)
    fused, _ = apply_fuse(host, host, identities("fuse-self"))
    assert fused.read("classes2.dex") == host.read("classes.dex")
    manifest = ManifestModel.from_bytes(fused.read("AndroidManifest.xml"))
    assert sum(1 for c in manifest.components if c.is_launcher) == 1


def test_fuse_resource_collision_host_wins(identities):
    host, payload = fixture_pair(identities)
    host = open_archive(host.to_bytes()).with_entry("assets/shared.txt", b"host")
    payload = open_archive(payload.to_bytes()).with_entry(
        "assets/shared.txt", b"payload")
    fused, _ = apply_fuse(host, payload, identities("fuse-col"))
    assert fused.read("assets/shared.txt") == b"host"


def test_keystream_is_an_involution():
    key = bytes(range(32))
    data = b"some dex bytes" * 100
    assert keystream_xor(keystream_xor(data, key), key) == data
    assert keystream_xor(data, key) != data
    with pytest.raises(ValidationError):
        keystream_xor(data, b"short key")


def test_pack_round_trip(sample_app, identities):
    key = bytes(range(32))
    packed, record = apply_pack(sample_app, key, identities("pack"))
    check_record(sample_app, packed, record)
    recovered = unpack_payload(packed)
    assert recovered == {"classes.dex": sample_app.read("classes.dex")}


def test_pack_installs_loader_stub(sample_app, identities):
    packed, _ = apply_pack(sample_app, bytes(32), identities("pack2"))
    assert packed.read("classes.dex") == loader_stub_dex()
    manifest = ManifestModel.from_bytes(packed.read("AndroidManifest.xml"))
    assert manifest.application_class == STUB_APPLICATION_CLASS
    assert verify_v1(packed).state == "valid"


def test_loader_stub_is_fixed():
    assert loader_stub_dex() == loader_stub_dex()
    parsed = parse_dex(loader_stub_dex())
    assert parsed.class_by_name(STUB_APPLICATION_CLASS) is not None


def test_dynload_proxy_without_trigger(identities):
    apk, record = build_dynload_proxy(
        "http://track.example/d/tk1", "http://track.example", "tk1",
        identity=identities("dyn1"))
    assert record.kind == "DYN"
    strings = referenced_strings(parse_dex(apk.read("classes.dex")))
    descriptor = next(s for s in strings if s.startswith("AVS1|"))
    assert descriptor == ("AVS1|ping=http://track.example/p/tk1"
                          "|get=http://track.example/d/tk1|trig=-")
    manifest = ManifestModel.from_bytes(apk.read("AndroidManifest.xml"))
    assert all(c.kind != "receiver" for c in manifest.components)


def test_dynload_proxy_with_sms_trigger(identities):
    trigger = TRIGGERS["H4"]
    apk, record = build_dynload_proxy(
        "http://t.example/d/tk2", "http://t.example", "tk2", trigger,
        identity=identities("dyn2"))
    assert record.kind == "DYN-TRIG"
    assert record.parameters["trigger"] == "H4"
    manifest = ManifestModel.from_bytes(apk.read("AndroidManifest.xml"))
    receiver = next(c for c in manifest.components if c.kind == "receiver")
    assert any(trigger.action in f.actions for f in receiver.intent_filters)
    assert "android.permission.RECEIVE_SMS" in manifest.permissions


def test_dynload_proxy_boot_trigger_needs_no_permission(identities):
    apk, _ = build_dynload_proxy(
        "http://t.example/d/tk3", "http://t.example", "tk3", TRIGGERS["H1"],
        identity=identities("dyn3"))
    manifest = ManifestModel.from_bytes(apk.read("AndroidManifest.xml"))
    receiver = next(c for c in manifest.components if c.kind == "receiver")
    assert any("BOOT_COMPLETED" in a for f in receiver.intent_filters
               for a in f.actions)
    assert manifest.permissions == ["android.permission.INTERNET"]


def test_dynload_location_trigger_has_no_receiver(identities):
    apk, _ = build_dynload_proxy(
        "http://t.example/d/tk4", "http://t.example", "tk4", TRIGGERS["H11"],
        identity=identities("dyn4"))
    manifest = ManifestModel.from_bytes(apk.read("AndroidManifest.xml"))
    assert all(c.kind != "receiver" for c in manifest.components)
    assert "android.permission.ACCESS_FINE_LOCATION" in manifest.permissions


def test_trigger_table_matches_reference():
    actions = {hid: t.action for hid, t in TRIGGERS.items()}
    assert actions["H1"] == "android.intent.action.BOOT_COMPLETED"
    assert actions["H4"] == "android.provider.Telephony.SMS_RECEIVED"
    assert actions["H7"] == "android.provider.Telephony.SMS_DELIVER"
    assert actions["H10"] == "android.intent.action.SCREEN_ON"
    no_permission = {hid for hid, t in TRIGGERS.items()
                     if not t.permission_required}
    assert no_permission == {"H1", "H3", "H5", "H8", "H9", "H10"}
    assert TRIGGERS["H11"].kind == "location"
    assert {TRIGGERS["H4"].kind, TRIGGERS["H7"].kind} == {"sms"}


def test_module_variants(identities):
    app = clustered_app("com.mod.app", [3, 2, 2], 1, ["CLUSTER_EVIL"],
                        identity=identities("mod"))
    clusters = cluster_classes(build_connection_graph(app))
    assert len(clusters) == 3
    factory = lambda tag: identities("modvar-" + tag)  # noqa: E731
    variants = build_module_variants(app, clusters, factory)
    assert len(variants) == 4  # keep-one per cluster + baseline

    for index, cluster in enumerate(clusters):
        variant, record = variants[index]
        assert record.kind == "MODVAR"
        assert record.parameters["cluster_id"] == cluster.id
        survivors = set(referenced_strings(parse_dex(variant.read("classes.dex"))))
        planted_kept = any(c.startswith("com.mod.app.m1.")
                           for c in cluster.classes)
        assert ("CLUSTER_EVIL" in survivors) == planted_kept

    baseline, record = variants[-1]
    assert record.parameters.get("baseline") is True
    assert referenced_strings(parse_dex(baseline.read("classes.dex"))) == []


def test_module_variant_keeps_cluster_code_identical(identities):
    app = clustered_app("com.mod.keep", [2, 2], 0, ["KEEP_EVIL"],
                        identity=identities("modk"))
    clusters = cluster_classes(build_connection_graph(app))
    variants = build_module_variants(app, clusters,
                                     lambda tag: identities("modk-" + tag))
    union = set()
    for (variant, record) in variants[:-1]:
        cluster = next(c for c in clusters
                       if c.id == record.parameters["cluster_id"])
        union |= set(cluster.classes)
        dex = parse_dex(variant.read("classes.dex"))
        original = parse_dex(app.read("classes.dex"))
        for cls in original.classes:
            if cls.dotted in cluster.classes:
                for before, after in zip(
                        cls.methods,
                        dex.class_by_name(cls.dotted).methods):
                    assert before.code.units(original.raw) == \
                        after.code.units(dex.raw)
    graph = build_connection_graph(app)
    assert union == graph.nodes  # clusters partition the app classes


def test_module_variants_need_clusters(sample_app):
    with pytest.raises(ValidationError):
        build_module_variants(sample_app, [])


def test_transform_changes_digest_unless_noop(sample_app, identities):
    for out, record in (apply_sign_transform(sample_app, "S1"),
                        apply_prune(sample_app, "P2", identities("dig")),
                        apply_pack(sample_app, bytes(32), identities("dig2"))):
        if record.added or record.removed or record.modified:
            assert record.input_sha256 != record.output_sha256


def test_record_json_round_trip(sample_app):
    _, record = apply_sign_transform(sample_app, "S1")
    again = TransformRecord.from_json(record.to_json())
    assert again == record
