"""Class-connection extraction: calls, field references, component launches.

Launch detection is string-constant based and intraprocedural: a method that
invokes one of the component-launch APIs and also holds a class-name string
constant naming an app class yields an ``icc`` edge to that class.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .format import (
    IGET_IPUT_OPS,
    INVOKE_OPS,
    INVOKE_RANGE_OPS,
    OP_CONST_STRING,
    OP_CONST_STRING_JUMBO,
    SGET_SPUT_OPS,
    DexFile,
    descriptor_to_dotted,
    iter_instructions,
)

DEFAULT_EXCLUDED_PREFIXES = ("android.", "androidx.", "java.", "kotlin.")

LAUNCH_APIS = frozenset({
    "startActivity", "startActivityForResult", "startService", "stopService",
    "bindService", "sendBroadcast", "sendOrderedBroadcast",
    "sendStickyBroadcast",
})

_CLASS_NAME_RE = re.compile(r"^[A-Za-z_$][\w$]*(\.[A-Za-z_$][\w$]*)+$")
_RESOURCE_RE = re.compile(r"(^|\.)(R|R\$\w+|BuildConfig)$")

CALL = "call"
FIELD_REF = "field-ref"
ICC = "icc"


@dataclass(frozen=True)
class Edge:
    src: str
    dst: str
    kind: str


@dataclass
class ClassGraph:
    """App-class nodes and their connection edges."""

    nodes: set = field(default_factory=set)
    edges: list = field(default_factory=list)
    excluded_prefixes: tuple = DEFAULT_EXCLUDED_PREFIXES

    def restricted(self) -> "ClassGraph":
        """Drop edges whose endpoints are not defined app classes."""
        kept = [e for e in self.edges if e.src in self.nodes and e.dst in self.nodes]
        return ClassGraph(set(self.nodes), kept, self.excluded_prefixes)

    def undirected_adjacency(self) -> dict:
        adj = {n: set() for n in self.nodes}
        for e in self.edges:
            if e.src in adj and e.dst in adj:
                adj[e.src].add(e.dst)
                adj[e.dst].add(e.src)
        return adj

    @classmethod
    def merged(cls, graphs) -> "ClassGraph":
        graphs = list(graphs)
        out = cls(excluded_prefixes=graphs[0].excluded_prefixes if graphs
                  else DEFAULT_EXCLUDED_PREFIXES)
        for g in graphs:
            out.nodes |= g.nodes
            out.edges += g.edges
        return out.restricted()


def is_excluded(dotted: str, prefixes=DEFAULT_EXCLUDED_PREFIXES) -> bool:
    return dotted.startswith(tuple(prefixes)) or bool(_RESOURCE_RE.search(dotted))


def referenced_strings(dex: DexFile) -> list:
    """String constants loaded by live instructions, in code order.

    Stubbed methods reference nothing, so this view (unlike the raw string
    pool, which in-place edits never shrink) reflects what pruning removed.
    """
    data = dex.raw
    out = []
    for method in dex.all_methods():
        if method.code is None:
            continue
        units = method.code.units(data)
        for pos, op, _width in iter_instructions(units):
            if op == OP_CONST_STRING:
                out.append(dex.strings[units[pos + 1]])
            elif op == OP_CONST_STRING_JUMBO:
                out.append(dex.strings[units[pos + 1] | (units[pos + 2] << 16)])
    return out


def extract_class_refs(dex: DexFile, manifest=None,
                       excluded_prefixes=DEFAULT_EXCLUDED_PREFIXES) -> ClassGraph:
    """Edges from one dex. Targets may live in a sibling dex; merge with
    :meth:`ClassGraph.merged` to prune references that stay unresolved."""
    component_names = set()
    if manifest is not None:
        component_names = set(manifest.component_names())

    nodes = {c.dotted for c in dex.classes
             if not is_excluded(c.dotted, excluded_prefixes)}
    name_like = nodes | component_names
    data = dex.raw
    edges: list[Edge] = []

    for cls in dex.classes:
        src = cls.dotted
        if src not in nodes:
            continue
        for method in cls.methods:
            if method.code is None:
                continue
            units = method.code.units(data)
            strings: list[str] = []
            launches = False
            for pos, op, width in iter_instructions(units):
                if op in INVOKE_OPS or op in INVOKE_RANGE_OPS:
                    owner, name, _proto = dex.method_ids[units[pos + 1]]
                    dst = descriptor_to_dotted(owner)
                    if name in LAUNCH_APIS:
                        launches = True
                    if dst != src and not is_excluded(dst, excluded_prefixes):
                        edges.append(Edge(src, dst, CALL))
                elif op in IGET_IPUT_OPS or op in SGET_SPUT_OPS:
                    owner, _name, _typ = dex.field_ids[units[pos + 1]]
                    dst = descriptor_to_dotted(owner)
                    if dst != src and not is_excluded(dst, excluded_prefixes):
                        edges.append(Edge(src, dst, FIELD_REF))
                elif op == OP_CONST_STRING:
                    strings.append(dex.strings[units[pos + 1]])
                elif op == OP_CONST_STRING_JUMBO:
                    idx = units[pos + 1] | (units[pos + 2] << 16)
                    strings.append(dex.strings[idx])
            if launches:
                for s in strings:
                    if (s != src and s in name_like
                            and _CLASS_NAME_RE.match(s)
                            and not is_excluded(s, excluded_prefixes)):
                        edges.append(Edge(src, s, ICC))

    return ClassGraph(nodes, edges, tuple(excluded_prefixes))
