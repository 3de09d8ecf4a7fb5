"""Heterogeneous knowledge-graph data model, TSV interchange, and statistics.

Internal node ids are dense: entities occupy ``[0, entity_count)`` and
concepts ``[entity_count, entity_count + concept_count)``.  Semantic edges
are stored once, directed entity -> concept; adjacency materializes both
directions, tagging concept -> entity as the inverse orientation of the same
relation.  Co-engagement links (EELs) are undirected entity pairs.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

EEL_RELATION_NAME = "EEL"

GROUP_BOUNDS = (3, 6)  # group0: deg<=3, group1: 3<deg<=6, group2: deg>6


class GraphFormatError(ValueError):
    """Malformed or inconsistent graph input."""


@dataclass(frozen=True)
class RelationType:
    """Edge-type label. Exactly one relation per graph has kind 'eel'."""

    id: int
    name: str
    kind: str  # "semantic" | "eel"


@dataclass
class HeteroGraph:
    """Immutable heterogeneous KG; safe for concurrent reads once built.

    semantic_edges: (S, 3) int64 rows (entity, relation_id, concept)
    eel_edges: (M, 2) int64 rows (u, v) with u < v
    directed_eels: (D, 2) int64 rows (src, dst); produced only by EEL
        augmentation, they pass messages one way and never round-trip
        through the TSV format.
    """

    entity_count: int
    concept_count: int
    relations: list[RelationType]
    semantic_edges: np.ndarray
    eel_edges: np.ndarray
    directed_eels: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    node_names: list[str] | None = None
    external_ids: list[str] | None = None

    def __post_init__(self):
        self.semantic_edges = np.asarray(self.semantic_edges, dtype=np.int64).reshape(-1, 3)
        self.eel_edges = np.asarray(self.eel_edges, dtype=np.int64).reshape(-1, 2)
        self.directed_eels = np.asarray(self.directed_eels, dtype=np.int64).reshape(-1, 2)
        self._validate()
        self._eel_degrees = np.zeros(self.entity_count, dtype=np.int64)
        for col in (0, 1):
            np.add.at(self._eel_degrees, self.eel_edges[:, col], 1)

    # -- invariants ----------------------------------------------------------

    def _validate(self):
        ne, nc = self.entity_count, self.concept_count
        eel_kinds = [r for r in self.relations if r.kind == "eel"]
        if len(eel_kinds) != 1:
            raise GraphFormatError("exactly one relation must have kind 'eel'")
        sem_names = [r.name for r in self.relations if r.kind == "semantic"]
        if len(sem_names) != len(set(sem_names)):
            raise GraphFormatError("semantic relation names must be unique")
        if list(r.id for r in self.relations) != list(range(len(self.relations))):
            raise GraphFormatError("relation ids must be dense and ordered")

        s = self.semantic_edges
        if s.size:
            if s[:, 0].min() < 0 or s[:, 0].max() >= ne:
                raise GraphFormatError("semantic edge source must be an entity")
            if s[:, 2].min() < ne or s[:, 2].max() >= ne + nc:
                raise GraphFormatError("semantic edge target must be a concept")
            sem_ids = {r.id for r in self.relations if r.kind == "semantic"}
            if not set(np.unique(s[:, 1])) <= sem_ids:
                raise GraphFormatError("semantic edge uses a non-semantic relation id")
        e = self.eel_edges
        if e.size:
            if e.min() < 0 or e.max() >= ne:
                raise GraphFormatError("EEL endpoint is not an entity")
            if np.any(e[:, 0] == e[:, 1]):
                raise GraphFormatError("self-loop EEL")
            if np.any(e[:, 0] > e[:, 1]):
                raise GraphFormatError("EEL rows must be stored with u < v")
        d = self.directed_eels
        if d.size:
            if d.min() < 0 or d.max() >= ne:
                raise GraphFormatError("directed EEL endpoint is not an entity")
            if np.any(d[:, 0] == d[:, 1]):
                raise GraphFormatError("self-loop directed EEL")
        for name, arr in (("semantic", s), ("EEL", e), ("directed EEL", d)):
            if arr.size and np.unique(arr, axis=0).shape[0] != arr.shape[0]:
                raise GraphFormatError(f"duplicate {name} edge")

    # -- basic accessors -------------------------------------------------------

    @property
    def node_count(self) -> int:
        return self.entity_count + self.concept_count

    @property
    def eel_relation(self) -> RelationType:
        return next(r for r in self.relations if r.kind == "eel")

    def relation_by_name(self, name: str) -> RelationType:
        for r in self.relations:
            if r.name == name:
                return r
        raise GraphFormatError(f"unknown relation name '{name}'")

    def is_entity(self, v: int) -> bool:
        return 0 <= v < self.entity_count

    def eel_adjacency_sets(self) -> list[set]:
        """Per-entity set of EEL neighbors (undirected)."""
        adj = [set() for _ in range(self.entity_count)]
        for u, v in self.eel_edges:
            adj[u].add(int(v))
            adj[v].add(int(u))
        return adj

    def adjacency(self) -> list[list[tuple[int, RelationType, bool]]]:
        """Per-node in-neighbor list of (neighbor, relation, is_inverse).

        EELs appear symmetrically; each semantic edge contributes the stored
        entity->concept direction plus the inverse concept->entity direction
        under the same relation.
        """
        out: list[list[tuple[int, RelationType, bool]]] = [[] for _ in range(self.node_count)]
        rel = {r.id: r for r in self.relations}
        for t, rid, c in self.semantic_edges:
            out[c].append((int(t), rel[int(rid)], False))
            out[t].append((int(c), rel[int(rid)], True))
        eel = self.eel_relation
        for u, v in self.eel_edges:
            out[v].append((int(u), eel, False))
            out[u].append((int(v), eel, False))
        for s, d in self.directed_eels:
            out[d].append((int(s), eel, False))
        return out


# -- degree utilities ----------------------------------------------------------


def eel_degree(g: HeteroGraph, v: int) -> int:
    """Number of undirected EELs incident to entity v."""
    if not g.is_entity(v):
        raise GraphFormatError(f"node {v} is a concept, not an entity")
    return int(g._eel_degrees[v])


def degree_group(g: HeteroGraph, v: int) -> int:
    """Popularity bucket from EEL degree: 0 (<=3), 1 (4..6), 2 (>6)."""
    d = eel_degree(g, v)
    lo, hi = GROUP_BOUNDS
    if d <= lo:
        return 0
    if d <= hi:
        return 1
    return 2


def degree_groups_all(g: HeteroGraph) -> np.ndarray:
    """Vectorized degree_group over every entity."""
    d = g._eel_degrees
    lo, hi = GROUP_BOUNDS
    return np.where(d <= lo, 0, np.where(d <= hi, 1, 2)).astype(np.int64)


@dataclass
class GraphStats:
    entity_count: int
    concept_count: int
    entity_ratio: float
    semantic_edge_count: int
    eel_count: int
    semantic_edge_fraction: float
    eel_degree_histogram: dict[int, int]
    zero_eel_fraction: float

    def to_dict(self) -> dict:
        return {
            "entity_count": self.entity_count,
            "concept_count": self.concept_count,
            "entity_ratio": self.entity_ratio,
            "semantic_edge_count": self.semantic_edge_count,
            "eel_count": self.eel_count,
            "semantic_edge_fraction": self.semantic_edge_fraction,
            "eel_degree_histogram": {str(k): v for k, v in self.eel_degree_histogram.items()},
            "zero_eel_fraction": self.zero_eel_fraction,
        }


def graph_stats(g: HeteroGraph) -> GraphStats:
    degrees = g._eel_degrees
    total_edges = len(g.semantic_edges) + len(g.eel_edges)
    values, counts = np.unique(degrees, return_counts=True)
    return GraphStats(
        entity_count=g.entity_count,
        concept_count=g.concept_count,
        entity_ratio=g.entity_count / max(g.node_count, 1),
        semantic_edge_count=len(g.semantic_edges),
        eel_count=len(g.eel_edges),
        semantic_edge_fraction=len(g.semantic_edges) / total_edges if total_edges else 0.0,
        eel_degree_histogram={int(v): int(c) for v, c in zip(values, counts)},
        zero_eel_fraction=float(np.mean(degrees == 0)) if g.entity_count else 0.0,
    )


# -- TSV interchange -------------------------------------------------------------
#
# Nodes: node_id<TAB>node_type<TAB>name          node_type in {entity, concept}
# Edges: src_id<TAB>relation_name<TAB>dst_id     relation "EEL" is undirected
# UTF-8, LF endings, no header.  Canonical save order: nodes by internal id,
# edges lexicographically by (relation, src, dst).


def load_graph(nodes_path, edges_path, known_relations: list[str] | None = None) -> HeteroGraph:
    """Load and validate a graph, densely re-indexing external ids.

    The external-id -> internal-id map is kept on the returned graph
    (``external_ids``, ordered by internal id).  With `known_relations`
    given, any other semantic relation name in the edges file is an error.
    """
    nodes_path, edges_path = Path(nodes_path), Path(edges_path)
    entities: list[tuple[str, str]] = []
    concepts: list[tuple[str, str]] = []
    for lineno, raw in enumerate(nodes_path.read_text(encoding="utf-8").splitlines(), 1):
        if not raw:
            continue
        parts = raw.split("\t")
        if len(parts) != 3:
            raise GraphFormatError(f"{nodes_path.name}:{lineno}: expected 3 tab-separated fields")
        ext_id, node_type, name = parts
        if node_type == "entity":
            entities.append((ext_id, name))
        elif node_type == "concept":
            concepts.append((ext_id, name))
        else:
            raise GraphFormatError(f"{nodes_path.name}:{lineno}: unknown node type '{node_type}'")

    external_ids = [e[0] for e in entities] + [c[0] for c in concepts]
    if len(set(external_ids)) != len(external_ids):
        raise GraphFormatError(f"{nodes_path.name}: duplicate node id")
    node_names = [e[1] for e in entities] + [c[1] for c in concepts]
    index = {ext: i for i, ext in enumerate(external_ids)}
    ne = len(entities)

    sem_rows: list[tuple[int, str, int]] = []
    eel_rows: list[tuple[int, int]] = []
    for lineno, raw in enumerate(edges_path.read_text(encoding="utf-8").splitlines(), 1):
        if not raw:
            continue
        parts = raw.split("\t")
        if len(parts) != 3:
            raise GraphFormatError(f"{edges_path.name}:{lineno}: expected 3 tab-separated fields")
        src, rel_name, dst = parts
        if src not in index or dst not in index:
            missing = src if src not in index else dst
            raise GraphFormatError(f"{edges_path.name}:{lineno}: unknown node id '{missing}'")
        s, d = index[src], index[dst]
        if rel_name == EEL_RELATION_NAME:
            if s >= ne or d >= ne:
                raise GraphFormatError(f"{edges_path.name}:{lineno}: EEL endpoint is not an entity")
            if s == d:
                raise GraphFormatError(f"{edges_path.name}:{lineno}: self-loop EEL")
            eel_rows.append((min(s, d), max(s, d)))
        else:
            if known_relations is not None and rel_name not in known_relations:
                raise GraphFormatError(f"{edges_path.name}:{lineno}: unknown relation name '{rel_name}'")
            if s >= ne:
                raise GraphFormatError(
                    f"{edges_path.name}:{lineno}: semantic edge source '{src}' is not an entity"
                )
            if d < ne:
                raise GraphFormatError(
                    f"{edges_path.name}:{lineno}: semantic edge '{src}'->'{dst}' touches two entities"
                )
            sem_rows.append((s, rel_name, d))

    if len(set(eel_rows)) != len(eel_rows):
        raise GraphFormatError(f"{edges_path.name}: duplicate EEL edge")
    if len(set(sem_rows)) != len(sem_rows):
        raise GraphFormatError(f"{edges_path.name}: duplicate semantic edge")

    sem_names = sorted({name for _, name, _ in sem_rows})
    if known_relations is not None:
        sem_names = sorted(set(known_relations) - {EEL_RELATION_NAME})
    relations = [RelationType(i, name, "semantic") for i, name in enumerate(sem_names)]
    relations.append(RelationType(len(relations), EEL_RELATION_NAME, "eel"))
    rel_id = {r.name: r.id for r in relations}

    semantic = np.array(
        [(s, rel_id[name], d) for s, name, d in sem_rows], dtype=np.int64
    ).reshape(-1, 3)
    eels = np.array(sorted(set(eel_rows)), dtype=np.int64).reshape(-1, 2)
    return HeteroGraph(
        entity_count=ne,
        concept_count=len(concepts),
        relations=relations,
        semantic_edges=semantic,
        eel_edges=eels,
        node_names=node_names,
        external_ids=external_ids,
    )


def save_graph(g: HeteroGraph, nodes_path, edges_path) -> None:
    """Write the canonical TSV pair (nodes by id; edge rows are src, relation, dst)."""
    ext = g.external_ids or [f"n{i}" for i in range(g.node_count)]
    names = g.node_names or ext
    lines = []
    for i in range(g.node_count):
        kind = "entity" if i < g.entity_count else "concept"
        lines.append(f"{ext[i]}\t{kind}\t{names[i]}")
    Path(nodes_path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")

    rel = {r.id: r.name for r in g.relations}
    rows = [(ext[int(s)], rel[int(rid)], ext[int(d)]) for s, rid, d in g.semantic_edges]
    rows += [(ext[int(u)], EEL_RELATION_NAME, ext[int(v)]) for u, v in g.eel_edges]
    rows.sort(key=lambda r: (r[1], r[0], r[2]))
    text = "\n".join("\t".join(r) for r in rows)
    Path(edges_path).write_text(text + ("\n" if rows else ""), encoding="utf-8")


def graph_hash(g: HeteroGraph) -> str:
    """Stable content hash over the canonical serialization."""
    h = hashlib.sha256()
    ext = g.external_ids or [f"n{i}" for i in range(g.node_count)]
    h.update(json.dumps([g.entity_count, g.concept_count]).encode())
    h.update("\x1f".join(ext).encode())
    rel = {r.id: r.name for r in g.relations}
    rows = [(rel[int(rid)], int(s), int(d)) for s, rid, d in g.semantic_edges]
    rows += [(EEL_RELATION_NAME, int(u), int(v)) for u, v in g.eel_edges]
    rows += [("EEL_DIRECTED", int(s), int(d)) for s, d in g.directed_eels]
    for row in sorted(rows):
        h.update(repr(row).encode())
    return h.hexdigest()
