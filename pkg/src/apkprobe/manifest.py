"""AndroidManifest.xml model: projection, config pruning, fusion merging.

Edits operate on the underlying AXML node list and the model is re-projected
afterwards, so chunks the projection does not understand survive untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .axml import (
    ANDROID_NS,
    AxmlAttribute,
    AxmlDocument,
    CData,
    EndElement,
    EndNamespace,
    StartElement,
    StartNamespace,
    decode_axml,
)
from .errors import ValidationError

ACTION_MAIN = "android.intent.action.MAIN"
CATEGORY_LAUNCHER = "android.intent.category.LAUNCHER"

COMPONENT_KINDS = ("activity", "service", "receiver", "provider")

# Manifest elements that carry configuration rather than components.
CONFIG_KINDS = (
    "permission",
    "permission-group",
    "permission-tree",
    "uses-permission",
    "uses-configuration",
    "uses-feature",
    "uses-library",
    "uses-sdk",
)

# Element kinds whose entries are unioned by name when two apps are fused.
UNION_KINDS = ("uses-permission", "permission-group", "uses-feature",
               "uses-library")


@dataclass(frozen=True)
class IntentFilter:
    actions: tuple
    categories: tuple

    @property
    def is_launcher(self) -> bool:
        return ACTION_MAIN in self.actions and CATEGORY_LAUNCHER in self.categories


@dataclass(frozen=True)
class Component:
    kind: str
    name: str
    intent_filters: tuple

    @property
    def is_launcher(self) -> bool:
        return any(f.is_launcher for f in self.intent_filters)


@dataclass(frozen=True)
class ConfigElement:
    kind: str
    name: Optional[str]


@dataclass
class ManifestModel:
    """Read view over a manifest document; edits go through module functions."""

    document: AxmlDocument
    package: Optional[str] = None
    application_class: Optional[str] = None
    components: list = field(default_factory=list)
    config_elements: list = field(default_factory=list)

    @classmethod
    def from_document(cls, doc: AxmlDocument) -> "ManifestModel":
        model = cls(doc)
        model._project()
        return model

    @classmethod
    def from_bytes(cls, data: bytes) -> "ManifestModel":
        return cls.from_document(decode_axml(data))

    def to_bytes(self) -> bytes:
        return self.document.to_bytes()

    @property
    def launcher_activity(self) -> Optional[Component]:
        for c in self.components:
            if c.is_launcher:
                return c
        return None

    @property
    def permissions(self) -> list:
        return [c.name for c in self.config_elements
                if c.kind == "uses-permission" and c.name]

    def config_of_kind(self, kind: str) -> list:
        return [c for c in self.config_elements if c.kind == kind]

    def component_names(self) -> set:
        return {c.name for c in self.components}

    def resolve_name(self, name: Optional[str]) -> Optional[str]:
        if name and name.startswith(".") and self.package:
            return self.package + name
        return name

    def _project(self) -> None:
        nodes = self.document.nodes
        self.package = None
        self.application_class = None
        self.components = []
        self.config_elements = []
        seen_components = set()
        for i, node in enumerate(nodes):
            if not isinstance(node, StartElement):
                continue
            if node.name == "manifest":
                self.package = node.get("package", ns=None)
            elif node.name == "application":
                self.application_class = self.resolve_name(node.get("name"))
            elif node.name in COMPONENT_KINDS:
                comp = self._project_component(i, node)
                if comp.name in seen_components:
                    raise ValidationError(
                        "duplicate component name %s" % comp.name)
                seen_components.add(comp.name)
                self.components.append(comp)
            elif node.name in CONFIG_KINDS:
                self.config_elements.append(
                    ConfigElement(node.name, node.get("name")))

    def _project_component(self, index: int, node: StartElement) -> Component:
        end = subtree_end(self.document.nodes, index)
        filters = []
        j = index + 1
        nodes = self.document.nodes
        while j < end:
            inner = nodes[j]
            if isinstance(inner, StartElement) and inner.name == "intent-filter":
                fend = subtree_end(nodes, j)
                actions, categories = [], []
                for k in range(j + 1, fend):
                    n = nodes[k]
                    if isinstance(n, StartElement):
                        if n.name == "action" and n.get("name"):
                            actions.append(n.get("name"))
                        elif n.name == "category" and n.get("name"):
                            categories.append(n.get("name"))
                filters.append(IntentFilter(tuple(actions), tuple(categories)))
                j = fend + 1
            else:
                j += 1
        name = self.resolve_name(node.get("name")) or "<anonymous>"
        return Component(node.name, name, tuple(filters))


# -- node-list helpers -------------------------------------------------------

def subtree_end(nodes, start: int) -> int:
    """Index of the EndElement matching the StartElement at ``start``."""
    depth = 0
    for i in range(start, len(nodes)):
        node = nodes[i]
        if isinstance(node, StartElement):
            depth += 1
        elif isinstance(node, EndElement):
            depth -= 1
            if depth == 0:
                return i
    raise ValidationError("unbalanced element %r" % nodes[start].name)


def _remove_spans(nodes, spans):
    drop = set()
    for start, end in spans:
        drop.update(range(start, end + 1))
    return [n for i, n in enumerate(nodes) if i not in drop]


def _find_elements(nodes, names):
    """Top-down (index, end) spans of elements with the given names."""
    spans = []
    for i, node in enumerate(nodes):
        if isinstance(node, StartElement) and node.name in names:
            spans.append((i, subtree_end(nodes, i)))
    return spans


# -- edit operations ---------------------------------------------------------

def prune_config(model: ManifestModel) -> ManifestModel:
    """Drop all configuration elements; components stay untouched."""
    doc = model.document.copy()
    spans = _find_elements(doc.nodes, CONFIG_KINDS)
    if spans:
        doc.nodes = _remove_spans(doc.nodes, spans)
        doc.mark_dirty()
    return ManifestModel.from_document(doc)


def set_application_class(model: ManifestModel, class_name: str) -> ManifestModel:
    doc = model.document.copy()
    for node in doc.nodes:
        if isinstance(node, StartElement) and node.name == "application":
            node.set_attr(AxmlAttribute.of_string("name", class_name))
            doc.mark_dirty()
            return ManifestModel.from_document(doc)
    raise ValidationError("manifest has no application element")


def add_uses_permission(model: ManifestModel, permission: str) -> ManifestModel:
    if permission in model.permissions:
        return model
    doc = model.document.copy()
    insert_at = _application_start(doc.nodes)
    element = [
        StartElement(None, "uses-permission",
                     [AxmlAttribute.of_string("name", permission)]),
        EndElement(None, "uses-permission"),
    ]
    doc.nodes[insert_at:insert_at] = element
    doc.mark_dirty()
    return ManifestModel.from_document(doc)


def merge_manifests(host: ManifestModel, payload: ManifestModel) -> ManifestModel:
    """Fuse two manifests: host keeps its identity, payload contributes.

    Union semantics by android:name for the UNION_KINDS elements; all
    components of both are kept except that the payload launcher loses its
    MAIN/LAUNCHER intent filter, and name collisions keep the host's
    definition.
    """
    doc = host.document.copy()

    existing = {kind: {c.name for c in host.config_of_kind(kind)}
                for kind in UNION_KINDS}
    config_nodes = []
    payload_nodes = payload.document.nodes
    for start, end in _find_elements(payload_nodes, UNION_KINDS):
        el = payload_nodes[start]
        name = el.get("name")
        if name is None or name in existing[el.name]:
            continue
        existing[el.name].add(name)
        config_nodes.extend(_copy_slice(payload_nodes, start, end))

    host_names = host.component_names()
    component_nodes = []
    for start, end in _find_elements(payload_nodes, COMPONENT_KINDS):
        el = payload_nodes[start]
        name = payload.resolve_name(el.get("name"))
        if name in host_names:
            continue
        nodes = _copy_slice(payload_nodes, start, end)
        nodes = _strip_launcher_filters(nodes)
        nodes = _qualify_component_name(nodes, payload.package)
        component_nodes.extend(nodes)

    app_start = _application_start(doc.nodes)
    app_end = subtree_end(doc.nodes, app_start)
    doc.nodes[app_end:app_end] = component_nodes
    doc.nodes[app_start:app_start] = config_nodes
    doc.mark_dirty()
    return ManifestModel.from_document(doc)


def _application_start(nodes) -> int:
    for i, node in enumerate(nodes):
        if isinstance(node, StartElement) and node.name == "application":
            return i
    raise ValidationError("manifest has no application element")


def _copy_slice(nodes, start, end):
    out = []
    for n in nodes[start:end + 1]:
        if isinstance(n, StartElement):
            out.append(StartElement(n.ns, n.name, list(n.attributes), n.line))
        elif isinstance(n, EndElement):
            out.append(EndElement(n.ns, n.name, n.line))
        elif isinstance(n, CData):
            out.append(CData(n.text, n.line))
        else:
            out.append(n)
    return out


def _strip_launcher_filters(nodes):
    spans = []
    for i, node in enumerate(nodes):
        if isinstance(node, StartElement) and node.name == "intent-filter":
            end = subtree_end(nodes, i)
            actions, categories = set(), set()
            for k in range(i + 1, end):
                n = nodes[k]
                if isinstance(n, StartElement):
                    if n.name == "action":
                        actions.add(n.get("name"))
                    elif n.name == "category":
                        categories.add(n.get("name"))
            if ACTION_MAIN in actions and CATEGORY_LAUNCHER in categories:
                spans.append((i, end))
    return _remove_spans(nodes, spans)


def _qualify_component_name(nodes, package):
    """Expand a leading-dot component name so it survives re-hosting."""
    head = nodes[0]
    name = head.get("name")
    if name and name.startswith(".") and package:
        head.set_attr(AxmlAttribute.of_string("name", package + name))
    return nodes


# -- construction ------------------------------------------------------------

def build_manifest(package: str,
                   application_class: Optional[str] = None,
                   permissions: () = (),
                   features: () = (),
                   components: () = (),
                   min_sdk: int = 21,
                   target_sdk: int = 33,
                   version_code: int = 1) -> ManifestModel:
    """Assemble a manifest document from scratch.

    ``components`` is a sequence of dicts: {kind, name, actions?, categories?,
    launcher?: bool, exported?: bool}.
    """
    nodes: list = [
        StartNamespace("android", ANDROID_NS),
        StartElement(None, "manifest", [
            AxmlAttribute.of_int("versionCode", version_code),
            AxmlAttribute(None, "package", 0x03, 0, package),
        ]),
        StartElement(None, "uses-sdk", [
            AxmlAttribute.of_int("minSdkVersion", min_sdk),
            AxmlAttribute.of_int("targetSdkVersion", target_sdk),
        ]),
        EndElement(None, "uses-sdk"),
    ]
    for perm in permissions:
        nodes += [StartElement(None, "uses-permission",
                               [AxmlAttribute.of_string("name", perm)]),
                  EndElement(None, "uses-permission")]
    for feat in features:
        nodes += [StartElement(None, "uses-feature",
                               [AxmlAttribute.of_string("name", feat)]),
                  EndElement(None, "uses-feature")]

    app_attrs = [AxmlAttribute.of_string("label", package)]
    if application_class:
        app_attrs.append(AxmlAttribute.of_string("name", application_class))
    nodes.append(StartElement(None, "application", app_attrs))

    for comp in components:
        attrs = [AxmlAttribute.of_string("name", comp["name"])]
        if comp.get("exported") is not None:
            attrs.append(AxmlAttribute.of_bool("exported", comp["exported"]))
        nodes.append(StartElement(None, comp["kind"], attrs))
        actions = list(comp.get("actions", ()))
        categories = list(comp.get("categories", ()))
        if comp.get("launcher"):
            actions.append(ACTION_MAIN)
            categories.append(CATEGORY_LAUNCHER)
        if actions or categories:
            nodes.append(StartElement(None, "intent-filter", []))
            for action in actions:
                nodes += [StartElement(None, "action",
                                       [AxmlAttribute.of_string("name", action)]),
                          EndElement(None, "action")]
            for cat in categories:
                nodes += [StartElement(None, "category",
                                       [AxmlAttribute.of_string("name", cat)]),
                          EndElement(None, "category")]
            nodes.append(EndElement(None, "intent-filter"))
        nodes.append(EndElement(None, comp["kind"]))

    nodes += [EndElement(None, "application"),
              EndElement(None, "manifest"),
              EndNamespace("android", ANDROID_NS)]
    return ManifestModel.from_document(AxmlDocument(nodes))
