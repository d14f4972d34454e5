"""Cluster application classes into independent modules.

Modules are the connected components of the undirected class-connection
graph. Ordering is total: descending size, ties broken by the smallest class
name, with ids assigned in that order, so module variant ids are stable
across runs.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

from .archive import ApkArchive
from .dex import DEFAULT_EXCLUDED_PREFIXES, ClassGraph, extract_class_refs, parse_dex
from .dex.multidex import dex_entry_names
from .manifest import ManifestModel
from .transforms import MANIFEST_ENTRY


@dataclass(frozen=True)
class ModuleCluster:
    id: int
    classes: frozenset
    edge_count: int

    @property
    def size(self) -> int:
        return len(self.classes)


def build_connection_graph(apk: ApkArchive,
                           excluded_prefixes=DEFAULT_EXCLUDED_PREFIXES) -> ClassGraph:
    """Union of per-dex reference graphs, manifest-aware for launch edges."""
    manifest = None
    if apk.has(MANIFEST_ENTRY):
        manifest = ManifestModel.from_bytes(apk.read(MANIFEST_ENTRY))
    graphs = []
    for name in dex_entry_names(apk):
        dex = parse_dex(apk.read(name))
        graphs.append(extract_class_refs(dex, manifest, excluded_prefixes))
    if not graphs:
        return ClassGraph(excluded_prefixes=tuple(excluded_prefixes))
    return ClassGraph.merged(graphs)


def cluster_classes(graph: ClassGraph) -> list:
    """Connected components of the undirected projection, stably ordered."""
    adjacency = graph.undirected_adjacency()
    components = []
    seen = set()
    for node in sorted(adjacency):
        if node in seen:
            continue
        stack = [node]
        members = set()
        while stack:
            cur = stack.pop()
            if cur in members:
                continue
            members.add(cur)
            stack.extend(adjacency[cur] - members)
        seen |= members
        components.append(members)

    internal = {}
    for i, members in enumerate(components):
        internal[i] = sum(1 for e in graph.edges
                          if e.src in members and e.dst in members)

    order = sorted(range(len(components)),
                   key=lambda i: (-len(components[i]), min(components[i])))
    return [ModuleCluster(rank, frozenset(components[i]), internal[i])
            for rank, i in enumerate(order)]


def clusters_to_csv(app_sha256: str, clusters) -> str:
    """CSV listing: app-sha256, cluster-id, size, class list."""
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["app_sha256", "cluster_id", "size", "classes"])
    for cluster in clusters:
        writer.writerow([app_sha256, cluster.id, cluster.size,
                         " ".join(sorted(cluster.classes))])
    return buf.getvalue()
