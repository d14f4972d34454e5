"""Deterministic synthetic APK generation for tests and measurements.

Real corpora cannot ship with the repository, so measurement runs are fed
from generated apps whose detectable surface is precisely controlled: token
strings planted in dex code, native libraries, or manifest permissions, and
class clusters with known connection structure.
"""

from __future__ import annotations

import hashlib
import random
from typing import Optional

from .archive import ApkArchive, STORED
from .dex import ClassSpec, DexBuilder, FieldRef, FieldSpec, MethodRef, MethodSpec
from .manifest import build_manifest
from .signing import SeededIdentityFactory, SigningIdentity, sign_v1

_ELF_MAGIC = b"\x7fELF\x02\x01\x01\x00" + b"\x00" * 8


def identity_for(seed: int, tag: str) -> SigningIdentity:
    """Deterministic identity derived from a run seed and a purpose tag."""
    digest = hashlib.sha256(("%d:%s" % (seed, tag)).encode()).digest()
    return SeededIdentityFactory(int.from_bytes(digest[:8], "big")).identity(tag)


def pack_key_for(seed: int, tag: str) -> bytes:
    return hashlib.sha256(("%d:%s:pack" % (seed, tag)).encode()).digest()


def build_app(package: str, dex_bytes: bytes, *, permissions=(),
              components=None, extra_entries: Optional[dict] = None,
              identity: Optional[SigningIdentity] = None) -> ApkArchive:
    """Assemble and optionally sign an APK from prepared pieces."""
    if components is None:
        components = [{"kind": "activity", "name": package + ".Main",
                       "launcher": True}]
    model = build_manifest(package, permissions=permissions,
                           components=components)
    archive = ApkArchive()
    archive = archive.with_entry("AndroidManifest.xml", model.to_bytes())
    archive = archive.with_entry("classes.dex", dex_bytes, STORED)
    for path, data in (extra_entries or {}).items():
        archive = archive.with_entry(path, data, STORED)
    if identity is not None:
        archive = sign_v1(archive, identity)
    return archive


def token_app(package: str, *, dex_tokens=(), native_tokens=(),
              manifest_tokens=(), urls=(), rng: Optional[random.Random] = None,
              identity: Optional[SigningIdentity] = None) -> ApkArchive:
    """An app whose only flaggable features are the planted tokens.

    Dex tokens become instruction-referenced string constants (so code
    pruning removes them), native tokens are embedded in a lib/ ELF blob,
    and manifest tokens become uses-permission names.
    """
    rng = rng or random.Random(0)
    salt = "filler-%08x" % rng.getrandbits(32)

    builder = DexBuilder()
    main = ClassSpec("L%s/Main;" % package.replace(".", "/"),
                     superclass="Landroid/app/Activity;")
    body = [("const-string", 0, salt)]
    for i, token in enumerate(list(dex_tokens) + list(urls)):
        body.append(("const-string", (i + 1) % 4, token))
    body.append(("return-void",))
    main.methods.append(MethodSpec("onCreate", body=body))
    main.methods.append(MethodSpec("<init>"))
    builder.add_class(main)

    extra = {}
    if native_tokens:
        blob = _ELF_MAGIC + b"\x00".join(t.encode() for t in native_tokens)
        blob += bytes(rng.getrandbits(8) for _ in range(64))
        extra["lib/armeabi-v7a/libapp.so"] = blob

    permissions = ["android.permission.INTERNET"]
    permissions += ["com.synthetic.permission.%s" % t for t in manifest_tokens]
    return build_app(package, builder.build(), permissions=permissions,
                     extra_entries=extra, identity=identity)


def clustered_app(package: str, cluster_sizes, planted_cluster: int,
                  planted_tokens, *, rng: Optional[random.Random] = None,
                  identity: Optional[SigningIdentity] = None) -> ApkArchive:
    """An app with disconnected class clusters of the given sizes.

    Classes inside a cluster form a call chain; clusters never reference
    each other, so the connection graph's components are exactly the
    clusters. ``planted_tokens`` are referenced only from the planted
    cluster's first class.
    """
    rng = rng or random.Random(0)
    builder = DexBuilder()
    slash = package.replace(".", "/")

    for c, size in enumerate(cluster_sizes):
        descriptors = ["L%s/m%d/C%d;" % (slash, c, i) for i in range(size)]
        for i, descriptor in enumerate(descriptors):
            spec = ClassSpec(descriptor)
            spec.methods.append(MethodSpec("<init>"))
            body = [("const-string", 0, "c%d-%08x" % (c, rng.getrandbits(32)))]
            if c == planted_cluster and i == 0:
                for j, token in enumerate(planted_tokens):
                    body.append(("const-string", (j + 1) % 4, token))
            if i + 1 < size:
                body.append(("invoke-static",
                             MethodRef(descriptors[i + 1], "step", "V"), []))
            body.append(("return-void",))
            spec.methods.append(MethodSpec("step", static=True, body=body))
            builder.add_class(spec)

    launcher = "%s.m0.C0" % package
    components = [{"kind": "activity", "name": launcher, "launcher": True}]
    return build_app(package, builder.build(), components=components,
                     identity=identity)


def linked_classes_app(package: str, *, rng=None,
                       identity: Optional[SigningIdentity] = None) -> ApkArchive:
    """Small fixed app exercising call, field, and launch-string edges."""
    builder = DexBuilder()
    slash = package.replace(".", "/")
    store = ClassSpec("L%s/Store;" % slash,
                      fields=[FieldSpec("flag", "I", static=True)])
    store.methods.append(MethodSpec("<init>"))
    builder.add_class(store)

    worker = ClassSpec("L%s/Worker;" % slash)
    worker.methods.append(MethodSpec("<init>"))
    worker.methods.append(MethodSpec("run", static=True, body=[
        ("sget", FieldRef("L%s/Store;" % slash, "flag", "I"), 0),
        ("return-void",),
    ]))
    builder.add_class(worker)

    main = ClassSpec("L%s/Main;" % slash, superclass="Landroid/app/Activity;")
    main.methods.append(MethodSpec("<init>"))
    main.methods.append(MethodSpec("onCreate", body=[
        ("invoke-static", MethodRef("L%s/Worker;" % slash, "run", "V"), []),
        ("const-string", 0, package + ".Target"),
        ("invoke-virtual", MethodRef("Landroid/app/Activity;", "startActivity",
                                     "V", ("Landroid/content/Intent;",)), [0, 1]),
        ("return-void",),
    ]))
    builder.add_class(main)

    target = ClassSpec("L%s/Target;" % slash,
                       superclass="Landroid/app/Activity;")
    target.methods.append(MethodSpec("<init>"))
    builder.add_class(target)

    components = [
        {"kind": "activity", "name": package + ".Main", "launcher": True},
        {"kind": "activity", "name": package + ".Target"},
    ]
    return build_app(package, builder.build(), components=components,
                     identity=identity)
