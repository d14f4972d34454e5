"""The six app transformations, each yielding a provenance record.

Signing strategies S1..S3 touch only the certificate surface; P1..P3 prune
code, native payloads, or manifest configuration; FUSE merges a payload app
into a host; PACK hides dex files behind a keystream cipher and a loader
stub; DYN builds download-proxy apps whose behavior is declared through a
machine-readable descriptor string (the simulation boundary: the mock
sandbox interprets the descriptor instead of executing bytecode).
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Optional

from .archive import ApkArchive, STORED, compare_entries, compute_digests
from .dex import (
    ALL,
    ClassSpec,
    DexBuilder,
    MethodRef,
    MethodSpec,
    parse_dex,
    stub_method_bodies,
)
from .dex.multidex import append_secondary_dex, dex_entry_names
from .errors import TransformError, ValidationError
from .manifest import (
    ManifestModel,
    add_uses_permission,
    merge_manifests,
    prune_config,
    set_application_class,
)
from .signing import (
    SELF_SIGNED,
    WELL_KNOWN_STANDIN,
    SigningIdentity,
    generate_identity,
    sign_v1,
    strip_signature,
)

MANIFEST_ENTRY = "AndroidManifest.xml"

DESCRIPTOR_PREFIX = "AVS1|"
STUB_APPLICATION_CLASS = "com.shell.ProxyApplication"
PACKED_DIR = "assets/enc/"
PACKED_KEY_ENTRY = "assets/enc/k"


class TransformKind(str, Enum):
    S1 = "S1"          # unsign
    S2 = "S2"          # re-sign with the well-known stand-in key
    S3 = "S3"          # re-sign with a fresh self-signed key
    P1 = "P1"          # prune dex code
    P2 = "P2"          # prune native payloads
    P3 = "P3"          # prune manifest configuration
    FUSE = "FUSE"
    PACK = "PACK"
    DYN = "DYN"
    DYN_TRIG = "DYN-TRIG"
    MODVAR = "MODVAR"


@dataclass(frozen=True)
class TriggerSpec:
    host_id: str
    action: str
    permission_required: bool
    kind: str                      # broadcast | sms | location
    permission: Optional[str] = None


# Top broadcast events observed in malware, plus the location event, which
# is not deliverable through a receiver.
TRIGGERS = {
    "H1": TriggerSpec("H1", "android.intent.action.BOOT_COMPLETED",
                      False, "broadcast"),
    "H2": TriggerSpec("H2", "android.net.conn.CONNECTIVITY_CHANGE",
                      True, "broadcast", "android.permission.ACCESS_NETWORK_STATE"),
    "H3": TriggerSpec("H3", "android.intent.action.USER_PRESENT",
                      False, "broadcast"),
    "H4": TriggerSpec("H4", "android.provider.Telephony.SMS_RECEIVED",
                      True, "sms", "android.permission.RECEIVE_SMS"),
    "H5": TriggerSpec("H5", "android.intent.action.PACKAGE_ADDED",
                      False, "broadcast"),
    "H6": TriggerSpec("H6", "android.intent.action.PACKAGE_REMOVED",
                      True, "broadcast",
                      "android.permission.BROADCAST_PACKAGE_REMOVED"),
    "H7": TriggerSpec("H7", "android.provider.Telephony.SMS_DELIVER",
                      True, "sms", "android.permission.RECEIVE_SMS"),
    "H8": TriggerSpec("H8", "android.intent.action.ACTION_POWER_CONNECTED",
                      False, "broadcast"),
    "H9": TriggerSpec("H9", "android.intent.action.ACTION_POWER_DISCONNECTED",
                      False, "broadcast"),
    "H10": TriggerSpec("H10", "android.intent.action.SCREEN_ON",
                       False, "broadcast"),
    "H11": TriggerSpec("H11", "android.location.LOCATION_CHANGED",
                       True, "location", "android.permission.ACCESS_FINE_LOCATION"),
}


@dataclass
class TransformRecord:
    """Provenance link between an input app and one transformed variant."""

    input_sha256: str
    output_sha256: str
    kind: str
    parameters: dict = field(default_factory=dict)
    added: list = field(default_factory=list)
    removed: list = field(default_factory=list)
    modified: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({
            "input_sha256": self.input_sha256,
            "output_sha256": self.output_sha256,
            "kind": self.kind,
            "parameters": self.parameters,
            "delta": {"added": self.added, "removed": self.removed,
                      "modified": self.modified},
        }, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "TransformRecord":
        obj = json.loads(line)
        delta = obj.get("delta", {})
        return cls(obj["input_sha256"], obj["output_sha256"], obj["kind"],
                   obj.get("parameters", {}), delta.get("added", []),
                   delta.get("removed", []), delta.get("modified", []))


def _record(before: ApkArchive, after: ApkArchive, kind: TransformKind,
            parameters: Optional[dict] = None) -> TransformRecord:
    added, removed, modified = compare_entries(before, after)
    return TransformRecord(
        input_sha256=compute_digests(before.to_bytes()).sha256,
        output_sha256=compute_digests(after.to_bytes()).sha256,
        kind=kind.value,
        parameters=parameters or {},
        added=added, removed=removed, modified=modified)


def _fresh(label: str) -> SigningIdentity:
    return generate_identity(SELF_SIGNED, label)


# -- S1..S3 ------------------------------------------------------------------

def apply_sign_transform(apk: ApkArchive, mode,
                         identity: Optional[SigningIdentity] = None):
    """Unsign (S1) or re-sign with a stand-in (S2) / self-signed (S3) key."""
    mode = TransformKind(mode)
    stripped = strip_signature(apk)
    if mode == TransformKind.S1:
        out, params = stripped, {}
    elif mode == TransformKind.S2:
        identity = identity or generate_identity(WELL_KNOWN_STANDIN)
        out = sign_v1(stripped, identity)
        params = {"identity": identity.label,
                  "fingerprint": identity.fingerprint()}
    elif mode == TransformKind.S3:
        identity = identity or _fresh("resign-self")
        out = sign_v1(stripped, identity)
        params = {"identity": identity.label,
                  "fingerprint": identity.fingerprint()}
    else:
        raise ValidationError("not a signing transform: %s" % mode)
    return out, _record(apk, out, mode, params)


# -- P1..P3 ------------------------------------------------------------------

def apply_prune(apk: ApkArchive, kind,
                identity: Optional[SigningIdentity] = None):
    """Remove one semantic module (dex code, native code, manifest config)."""
    kind = TransformKind(kind)
    work = strip_signature(apk)
    if kind == TransformKind.P1:
        for name in dex_entry_names(work):
            try:
                outcome = stub_method_bodies(parse_dex(work.read(name)), ALL)
            except Exception as exc:
                raise TransformError("P1 cannot process %s: %s" % (name, exc))
            work = work.with_entry(name, outcome.dex.to_bytes(), STORED)
    elif kind == TransformKind.P2:
        work = work.filtered(
            lambda p: not (p.startswith("lib/") or p.endswith(".so")))
    elif kind == TransformKind.P3:
        model = ManifestModel.from_bytes(work.read(MANIFEST_ENTRY))
        work = work.with_entry(MANIFEST_ENTRY, prune_config(model).to_bytes())
    else:
        raise ValidationError("not a pruning transform: %s" % kind)
    identity = identity or _fresh("prune-%s" % kind.value.lower())
    out = sign_v1(work, identity)
    return out, _record(apk, out, kind, {"identity": identity.label})


# -- fusion ------------------------------------------------------------------

def apply_fuse(host: ApkArchive, payload: ApkArchive,
               identity: Optional[SigningIdentity] = None):
    """Merge the payload app into the host: manifest union, multidex append,
    resource union with host-wins on path collisions."""
    host_model = ManifestModel.from_bytes(host.read(MANIFEST_ENTRY))
    payload_model = ManifestModel.from_bytes(payload.read(MANIFEST_ENTRY))
    merged = merge_manifests(host_model, payload_model)

    work = strip_signature(host).with_entry(MANIFEST_ENTRY, merged.to_bytes())
    for name in dex_entry_names(payload):
        work = append_secondary_dex(work, payload.read(name))

    skip = re.compile(r"^(classes(\d*)\.dex|AndroidManifest\.xml)$")
    for entry in strip_signature(payload).entries:
        if skip.match(entry.path) or work.has(entry.path):
            continue
        work = work.with_entry(entry.path, entry.data, entry.compression)

    identity = identity or _fresh("fuse")
    out = sign_v1(work, identity)
    params = {"payload_sha256": compute_digests(payload.to_bytes()).sha256,
              "identity": identity.label}
    return out, _record(host, out, TransformKind.FUSE, params)


# -- packing -----------------------------------------------------------------

def keystream_xor(data: bytes, key: bytes) -> bytes:
    """SHA-256 counter keystream; applying it twice restores the input."""
    if len(key) != 32:
        raise ValidationError("pack key must be exactly 32 bytes")
    blocks = []
    for counter in range((len(data) + 31) // 32):
        blocks.append(hashlib.sha256(key + counter.to_bytes(8, "big")).digest())
    stream = b"".join(blocks)[:len(data)]
    return (int.from_bytes(data, "big") ^ int.from_bytes(stream, "big")) \
        .to_bytes(len(data), "big") if data else b""


@lru_cache(maxsize=1)
def loader_stub_dex() -> bytes:
    """The fixed dex that replaces classes.dex in packed apps."""
    builder = DexBuilder()
    app = ClassSpec("Lcom/shell/ProxyApplication;",
                    superclass="Landroid/app/Application;")
    app.methods.append(MethodSpec("<init>"))
    app.methods.append(MethodSpec("onCreate", body=[
        ("const-string", 0, PACKED_DIR),
        ("invoke-virtual", MethodRef("Lcom/shell/ProxyApplication;",
                                     "loadEncryptedPayload", "V",
                                     ("Ljava/lang/String;",)), [0, 1]),
        ("return-void",),
    ]))
    app.methods.append(MethodSpec("loadEncryptedPayload",
                                  parameters=("Ljava/lang/String;",)))
    builder.add_class(app)
    return builder.build()


def apply_pack(apk: ApkArchive, key: bytes,
               identity: Optional[SigningIdentity] = None):
    """Encrypt every dex behind the loader stub; the key ships in the APK."""
    work = strip_signature(apk)
    names = dex_entry_names(work)
    for name in names:
        cipher = keystream_xor(work.read(name), key)
        work = work.without([name])
        work = work.with_entry(PACKED_DIR + name + ".bin", cipher, STORED)
    work = work.with_entry("classes.dex", loader_stub_dex(), STORED)
    model = ManifestModel.from_bytes(work.read(MANIFEST_ENTRY))
    model = set_application_class(model, STUB_APPLICATION_CLASS)
    work = work.with_entry(MANIFEST_ENTRY, model.to_bytes())
    work = work.with_entry(PACKED_KEY_ENTRY, key, STORED)
    identity = identity or _fresh("pack")
    out = sign_v1(work, identity)
    params = {"key_sha256": hashlib.sha256(key).hexdigest(),
              "payloads": names, "identity": identity.label}
    return out, _record(apk, out, TransformKind.PACK, params)


def unpack_payload(apk: ApkArchive) -> dict:
    """Recover the original dex bytes from a packed app (test helper)."""
    key = apk.read(PACKED_KEY_ENTRY)
    out = {}
    for entry in apk.entries:
        if entry.path.startswith(PACKED_DIR) and entry.path.endswith(".bin"):
            name = entry.path[len(PACKED_DIR):-len(".bin")]
            out[name] = keystream_xor(entry.data, key)
    return out


# -- dynamic loading ---------------------------------------------------------

def behavior_descriptor(ping_url: str, download_url: str,
                        trigger_action: Optional[str]) -> str:
    return "%sping=%s|get=%s|trig=%s" % (
        DESCRIPTOR_PREFIX, ping_url, download_url, trigger_action or "-")


def parse_behavior_descriptor(text: str) -> Optional[dict]:
    if not text.startswith(DESCRIPTOR_PREFIX):
        return None
    fields = {}
    for part in text[len(DESCRIPTOR_PREFIX):].split("|"):
        key, _, value = part.partition("=")
        fields[key] = value
    trig = fields.get("trig", "-")
    return {"ping": fields.get("ping", ""),
            "get": fields.get("get", ""),
            "trigger": None if trig in ("", "-") else trig}


def build_dynload_proxy(payload_url: str, tracking_base_url: str,
                        tracking_token: str,
                        trigger: Optional[TriggerSpec] = None,
                        identity: Optional[SigningIdentity] = None):
    """Emit a proxy APK whose dex declares ping/download behavior.

    The startup ping targets the tracking server under an opaque token path;
    the optional trigger gates the payload download and is registered as a
    manifest receiver when it is a deliverable broadcast.
    """
    ping_url = "%s/p/%s" % (tracking_base_url.rstrip("/"), tracking_token)
    descriptor = behavior_descriptor(
        ping_url, payload_url, trigger.action if trigger else None)

    package = "com.probe.p%s" % re.sub(r"[^a-z0-9]", "", tracking_token.lower())[:10]
    main_cls = package + ".Main"
    components = [{"kind": "activity", "name": main_cls, "launcher": True}]
    receiver_cls = None
    if trigger is not None and trigger.kind in ("broadcast", "sms"):
        receiver_cls = package + ".TriggerReceiver"
        components.append({"kind": "receiver", "name": receiver_cls,
                           "exported": True, "actions": [trigger.action]})
    from .manifest import build_manifest  # local import avoids cycle at load
    model = build_manifest(package, permissions=("android.permission.INTERNET",),
                           components=components)
    if trigger is not None and trigger.permission_required and trigger.permission:
        model = add_uses_permission(model, trigger.permission)

    builder = DexBuilder()
    main = ClassSpec("L%s;" % main_cls.replace(".", "/"),
                     superclass="Landroid/app/Activity;")
    main.methods.append(MethodSpec("<init>"))
    main.methods.append(MethodSpec("onCreate", body=[
        ("const-string", 0, descriptor),
        ("return-void",),
    ]))
    builder.add_class(main)
    if receiver_cls:
        recv = ClassSpec("L%s;" % receiver_cls.replace(".", "/"),
                         superclass="Landroid/content/BroadcastReceiver;")
        recv.methods.append(MethodSpec("<init>"))
        recv.methods.append(MethodSpec("onReceive", body=[
            ("const-string", 0, trigger.action),
            ("return-void",),
        ]))
        builder.add_class(recv)

    archive = ApkArchive()
    archive = archive.with_entry(MANIFEST_ENTRY, model.to_bytes())
    archive = archive.with_entry("classes.dex", builder.build(), STORED)
    identity = identity or _fresh("dynproxy")
    out = sign_v1(archive, identity)

    kind = TransformKind.DYN_TRIG if trigger else TransformKind.DYN
    params = {"token": tracking_token, "payload_url": payload_url,
              "ping_url": ping_url}
    if trigger:
        params["trigger"] = trigger.host_id
    empty_sha = compute_digests(b"").sha256
    added = sorted(out.paths())
    record = TransformRecord(empty_sha, compute_digests(out.to_bytes()).sha256,
                             kind.value, params, added, [], [])
    return out, record


# -- module variants ----------------------------------------------------------

def build_module_variants(apk: ApkArchive, clusters,
                          identity_factory=None) -> list:
    """One keep-one variant per cluster plus an all-stubbed baseline.

    ``clusters`` come from the modularizer; the variant for cluster i leaves
    that cluster's code intact and stubs everything else.
    """
    clusters = list(clusters)
    if not clusters:
        raise ValidationError("cluster list is empty")
    if identity_factory is None:
        identity_factory = lambda tag: _fresh("modvar-%s" % tag)  # noqa: E731

    stripped = strip_signature(apk)
    dex_names = dex_entry_names(stripped)
    parsed = {name: parse_dex(stripped.read(name)) for name in dex_names}

    variants = []
    for cluster in clusters:
        keep = set(cluster.classes)
        work = stripped
        for name in dex_names:
            dex = parsed[name]
            selector = dex.defined_class_names() - keep
            outcome = stub_method_bodies(dex, selector)
            work = work.with_entry(name, outcome.dex.to_bytes(), STORED)
        out = sign_v1(work, identity_factory(str(cluster.id)))
        record = _record(apk, out, TransformKind.MODVAR,
                         {"cluster_id": cluster.id,
                          "cluster_size": len(cluster.classes)})
        variants.append((out, record))

    work = stripped
    for name in dex_names:
        outcome = stub_method_bodies(parsed[name], ALL)
        work = work.with_entry(name, outcome.dex.to_bytes(), STORED)
    out = sign_v1(work, identity_factory("baseline"))
    record = _record(apk, out, TransformKind.MODVAR,
                     {"cluster_id": None, "baseline": True})
    variants.append((out, record))
    return variants
