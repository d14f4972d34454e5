"""Manifest model: projection, config pruning, fusion merging."""

import pytest

from apkprobe.errors import ValidationError
from apkprobe.manifest import (
    ManifestModel,
    add_uses_permission,
    build_manifest,
    merge_manifests,
    prune_config,
    set_application_class,
)


def model(package="com.host.app", permissions=(), components=(), features=()):
    return build_manifest(package, permissions=permissions,
                          components=components, features=features)


HOST_COMPONENTS = [
    {"kind": "activity", "name": "com.host.app.Main", "launcher": True},
    {"kind": "service", "name": "com.host.app.Sync"},
]


def reparsed(m: ManifestModel) -> ManifestModel:
    return ManifestModel.from_bytes(m.to_bytes())


def test_projection_fields():
    m = reparsed(model(permissions=["android.permission.INTERNET"],
                       components=HOST_COMPONENTS))
    assert m.package == "com.host.app"
    assert m.permissions == ["android.permission.INTERNET"]
    assert [c.kind for c in m.components] == ["activity", "service"]
    assert m.launcher_activity.name == "com.host.app.Main"


def test_duplicate_component_names_rejected():
    bad = [{"kind": "activity", "name": "com.host.app.A"},
           {"kind": "activity", "name": "com.host.app.A"}]
    with pytest.raises(ValidationError):
        model(components=bad)


def test_prune_removes_five_permissions():
    perms = ["android.permission.P%d" % i for i in range(5)]
    m = prune_config(model(permissions=perms, components=HOST_COMPONENTS))
    assert reparsed(m).permissions == []


def test_prune_is_identity_without_config():
    m = model(components=HOST_COMPONENTS)
    # strip the uses-sdk the builder adds, then prune is a no-op
    once = prune_config(m)
    assert reparsed(once).config_elements == []
    twice = prune_config(once)
    assert twice.to_bytes() == once.to_bytes()


def test_prune_keeps_components():
    m = model(permissions=["android.permission.X"], components=HOST_COMPONENTS)
    pruned = reparsed(prune_config(m))
    assert len(pruned.components) == 2
    assert not pruned.config_of_kind("uses-sdk")


def test_prune_is_idempotent():
    m = model(permissions=["android.permission.X"], components=HOST_COMPONENTS)
    once = prune_config(m)
    assert prune_config(once).to_bytes() == once.to_bytes()


def payload_model():
    return model("com.payload.app",
                 permissions=["android.permission.INTERNET",
                              "android.permission.SEND_SMS"],
                 components=[
                     {"kind": "activity", "name": "com.payload.app.Entry",
                      "launcher": True},
                     {"kind": "receiver", "name": "com.payload.app.Recv",
                      "actions": ["android.intent.action.BOOT_COMPLETED"]},
                 ])


def test_merge_unions_permissions():
    host = model(permissions=["android.permission.INTERNET"],
                 components=HOST_COMPONENTS)
    merged = reparsed(merge_manifests(host, payload_model()))
    assert merged.permissions == ["android.permission.INTERNET",
                                  "android.permission.SEND_SMS"]


def test_merge_keeps_host_identity():
    host = model(components=HOST_COMPONENTS)
    merged = reparsed(merge_manifests(host, payload_model()))
    assert merged.package == "com.host.app"


def test_payload_launcher_loses_filter():
    host = model(components=HOST_COMPONENTS)
    merged = reparsed(merge_manifests(host, payload_model()))
    entry = next(c for c in merged.components
                 if c.name == "com.payload.app.Entry")
    assert not entry.is_launcher
    assert entry.intent_filters == ()


def test_merge_has_single_launcher():
    host = model(components=HOST_COMPONENTS)
    merged = reparsed(merge_manifests(host, payload_model()))
    assert sum(1 for c in merged.components if c.is_launcher) == 1
    assert merged.launcher_activity.name == "com.host.app.Main"


def test_component_collision_keeps_host_definition():
    host = model(components=HOST_COMPONENTS)
    clash = model("com.payload.app", components=[
        {"kind": "service", "name": "com.host.app.Sync",
         "actions": ["com.payload.ACTION"]},
    ])
    merged = reparsed(merge_manifests(host, clash))
    matches = [c for c in merged.components if c.name == "com.host.app.Sync"]
    assert len(matches) == 1
    assert matches[0].intent_filters == ()  # host's filterless definition


def test_union_cardinality_bound():
    host = model(permissions=["android.permission.A", "android.permission.B"],
                 components=HOST_COMPONENTS)
    disjoint = model("com.p", permissions=["android.permission.C"],
                     components=[{"kind": "activity", "name": "com.p.M"}])
    overlapping = model("com.q", permissions=["android.permission.A"],
                        components=[{"kind": "activity", "name": "com.q.M"}])
    assert len(reparsed(merge_manifests(host, disjoint)).permissions) == 3
    assert len(reparsed(merge_manifests(host, overlapping)).permissions) == 2


def test_merge_unions_features():
    host = model(components=HOST_COMPONENTS,
                 features=["android.hardware.camera"])
    payload = model("com.p", features=["android.hardware.camera",
                                       "android.hardware.nfc"],
                    components=[{"kind": "activity", "name": "com.p.M"}])
    merged = reparsed(merge_manifests(host, payload))
    names = [c.name for c in merged.config_of_kind("uses-feature")]
    assert names == ["android.hardware.camera", "android.hardware.nfc"]


def test_set_application_class():
    m = set_application_class(model(components=HOST_COMPONENTS), "com.shell.App")
    assert reparsed(m).application_class == "com.shell.App"


def test_add_uses_permission_is_idempotent():
    m = model(permissions=["android.permission.X"], components=HOST_COMPONENTS)
    added = add_uses_permission(m, "android.permission.Y")
    again = add_uses_permission(added, "android.permission.Y")
    assert reparsed(again).permissions == ["android.permission.X",
                                           "android.permission.Y"]


def test_relative_component_names_resolve():
    m = model("com.rel", components=[{"kind": "activity", "name": ".Main",
                                      "launcher": True}])
    assert reparsed(m).components[0].name == "com.rel.Main"
