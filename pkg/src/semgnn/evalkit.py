"""Ranking evaluation, inductive scoring, and embedding-driven link growth.

Embeddings are judged by mean average precision at K: for each query
entity, every other entity is ranked by dot-product score (ties broken by
ascending node id), and AP@K is normalized by min(K, relevant count) so a
perfect prefix scores 1 regardless of how large the relevant set is.
Reports break MAP down by the two truth sources and by EEL-degree group.

The augmentation path turns trained embeddings back into graph edits: each
entity proposes its top-k nearest neighbors by L2 distance as new links,
either as ordinary undirected links or as one-way messages from high-degree
entities into sparse ones.  Re-inference over the augmented graph reuses
the frozen model.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rgnn
from .kgraph import HeteroGraph, degree_groups_all, graph_hash
from .syngen import PlantedTruth
from .trainer import EmbeddingArtifact

_log = logging.getLogger("semgnn.evalkit")

KS = (10, 50, 100)
GROUPS = ("0", "1", "2", "all")
POPULAR_EEL_DEGREE = 6  # group2 boundary; directed augmentation sources


class EvalError(ValueError):
    pass


@dataclass
class SimilarityGroundTruth:
    source: str
    relevant: dict[int, set[int]]

    def __post_init__(self):
        for q, rel in self.relevant.items():
            if q in rel:
                raise EvalError(f"query {q} lists itself as relevant")

    def valid_queries(self) -> list[int]:
        return sorted(q for q, rel in self.relevant.items() if rel)


def truth_from_pairs(source: str, pairs) -> SimilarityGroundTruth:
    relevant: dict[int, set[int]] = {}
    for u, v in pairs:
        u, v = int(u), int(v)
        relevant.setdefault(u, set()).add(v)
        relevant.setdefault(v, set()).add(u)
    return SimilarityGroundTruth(source, relevant)


def truths_from_planted(truth: PlantedTruth) -> dict[str, SimilarityGroundTruth]:
    return {
        "co_sim": truth_from_pairs("co_sim", truth.co_sim_pairs),
        "hc_sim": truth_from_pairs("hc_sim", truth.hc_sim_pairs),
    }


def _ap_from_ranking(ranked: np.ndarray, relevant: set[int], ks) -> dict[int, float]:
    max_k = max(ks)
    head = ranked[:max_k]
    flags = np.fromiter((int(r) in relevant for r in head), dtype=bool, count=len(head))
    cum = np.cumsum(flags)
    hits = np.flatnonzero(flags)
    out = {}
    for k in ks:
        k_hits = hits[hits < k]
        denom = min(k, len(relevant))
        # fsum gives the correctly rounded sum, so AP is reproducible no
        # matter how the hit terms would otherwise be accumulated.
        out[k] = math.fsum(cum[k_hits] / (k_hits + 1)) / denom
    return out


def _ap_table(embeddings, relevant_by_query, ks, queries, chunk=256):
    """Per-query AP@k for each k, one ranking pass per query."""
    n = embeddings.shape[0]
    aps = {k: np.empty(len(queries)) for k in ks}
    qarr = np.asarray(queries, dtype=np.int64)
    if qarr.size and (qarr.min() < 0 or qarr.max() >= n):
        raise EvalError("query id outside the embedding table")
    for c0 in range(0, len(qarr), chunk):
        block = qarr[c0 : c0 + chunk]
        scores = embeddings[block] @ embeddings.T
        scores[np.arange(len(block)), block] = -np.inf  # never rank the query itself
        order = np.argsort(-scores, axis=1, kind="stable")  # stable = ascending-id ties
        for row, q in enumerate(block):
            per_k = _ap_from_ranking(order[row], relevant_by_query[int(q)], ks)
            for k in ks:
                aps[k][c0 + row] = per_k[k]
    return aps


def map_at_k(
    embeddings: np.ndarray,
    truth: SimilarityGroundTruth,
    k: int,
    query_ids=None,
) -> float:
    """Mean AP@k over queries with nonempty relevant sets."""
    if k <= 0:
        raise EvalError("K must be positive")
    queries = truth.valid_queries() if query_ids is None else [
        q for q in sorted(set(int(x) for x in query_ids)) if truth.relevant.get(q)
    ]
    if not queries:
        raise EvalError("no queries with a nonempty relevant set")
    aps = _ap_table(embeddings, truth.relevant, (k,), queries)
    return math.fsum(aps[k]) / len(queries)


@dataclass
class EvalReport:
    rows: list[dict]
    metadata: dict = field(default_factory=dict)

    def lookup(self, source: str, k: int, group: str) -> dict:
        for row in self.rows:
            if row["source"] == source and row["K"] == k and row["group"] == group:
                return row
        raise EvalError(f"no row for ({source}, {k}, {group})")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["setting", "source", "K", "group", "map", "query_count"])
            for row in self.rows:
                value = "" if row["map"] is None else f"{row['map']:.10f}"
                writer.writerow(
                    [row["setting"], row["source"], row["K"], row["group"], value, row["query_count"]]
                )

    def to_json(self, path) -> None:
        Path(path).write_text(
            json.dumps({"metadata": self.metadata, "rows": self.rows}, indent=2),
            encoding="utf-8",
        )


def evaluate(
    embeddings: np.ndarray,
    truths: dict[str, SimilarityGroundTruth],
    graph: HeteroGraph,
    setting: str = "transductive",
    ks=KS,
    query_filter=None,
    artifact_hash: str = "",
) -> EvalReport:
    """MAP@{ks} per truth source, overall and per EEL-degree group."""
    if embeddings.shape[0] < graph.entity_count:
        raise EvalError("embeddings do not cover every entity")
    groups = degree_groups_all(graph)
    allowed = None if query_filter is None else {int(q) for q in query_filter}
    rows = []
    for source in sorted(truths):
        truth = truths[source]
        queries = truth.valid_queries()
        if allowed is not None:
            queries = [q for q in queries if q in allowed]
        aps = _ap_table(embeddings, truth.relevant, ks, queries) if queries else None
        qgroups = groups[np.asarray(queries, dtype=np.int64)] if queries else np.zeros(0, dtype=np.int64)
        for k in ks:
            for group in GROUPS:
                if queries:
                    mask = np.ones(len(queries), dtype=bool) if group == "all" else qgroups == int(group)
                else:
                    mask = np.zeros(0, dtype=bool)
                count = int(mask.sum())
                value = float(np.mean(aps[k][mask])) if count else None
                rows.append(
                    {
                        "setting": setting,
                        "source": source,
                        "K": int(k),
                        "group": group,
                        "map": value,
                        "query_count": count,
                    }
                )
    skipped = {
        source: len(truths[source].relevant) - len(truths[source].valid_queries())
        for source in sorted(truths)
    }
    return EvalReport(rows, {"setting": setting, "artifact_hash": artifact_hash, "empty_relevant_skipped": skipped})


def evaluate_inductive(
    model: rgnn.RGnnModel,
    full_graph: HeteroGraph,
    features: np.ndarray,
    holdout_ids,
    truths: dict[str, SimilarityGroundTruth],
    ks=KS,
) -> EvalReport:
    """Frozen-weight encode of the full graph, scored on held-out queries."""
    holdout = np.asarray(sorted(int(h) for h in holdout_ids), dtype=np.int64)
    if holdout.size and holdout.max() >= full_graph.entity_count:
        raise EvalError("holdout entity missing from the full graph")
    embeddings = rgnn.encode(full_graph, features, model)[: full_graph.entity_count]
    query_filter = None if holdout.size == 0 else holdout
    return evaluate(embeddings, truths, full_graph, setting="inductive", ks=ks, query_filter=query_filter)


def augment_eels(
    embeddings,
    graph: HeteroGraph,
    top_k: int = 3,
    directed: bool = False,
    popular_threshold: int = POPULAR_EEL_DEGREE,
) -> tuple[HeteroGraph, dict]:
    """Propose links from embedding-space nearest neighbors (L2 distance).

    Undirected mode adds plain links.  Directed mode keeps a proposal only
    when it points from a high-degree entity (EEL degree > threshold) into a
    lower-degree one, and the link passes messages that way only.
    """
    if isinstance(embeddings, EmbeddingArtifact):
        embeddings = embeddings.embeddings
    ne = graph.entity_count
    if embeddings.shape[0] < ne:
        raise EvalError("embeddings do not cover every entity")
    if top_k < 0:
        raise EvalError("top_k must be non-negative")
    if top_k >= ne:
        raise EvalError(f"top_k {top_k} must be below the entity count {ne}")
    before_und = len(graph.eel_edges)
    before_dir = len(graph.directed_eels)
    if top_k == 0:
        report = {
            "eel_count_before": before_und,
            "eel_count_after": before_und,
            "directed_count_before": before_dir,
            "directed_count_after": before_dir,
            "new_undirected": 0,
            "new_directed": 0,
            "growth_factor": 1.0 if (before_und + before_dir) else None,
        }
        return graph, report

    emb = np.asarray(embeddings[:ne], dtype=np.float64)
    sq = np.sum(emb * emb, axis=1)
    adjacency = graph.eel_adjacency_sets()
    degrees = np.array([len(adjacency[i]) for i in range(ne)], dtype=np.int64)
    proposals: list[tuple[int, int]] = []  # (query, neighbor)
    chunk = 256
    for c0 in range(0, ne, chunk):
        block = np.arange(c0, min(c0 + chunk, ne))
        d2 = sq[block, None] + sq[None, :] - 2.0 * (emb[block] @ emb.T)
        for row, q in enumerate(block):
            d2[row, q] = np.inf
            if adjacency[q]:
                d2[row, list(adjacency[q])] = np.inf
        order = np.argsort(d2, axis=1, kind="stable")
        for row, q in enumerate(block):
            for n in order[row, :top_k]:
                proposals.append((int(q), int(n)))

    report = {
        "eel_count_before": before_und,
        "directed_count_before": before_dir,
    }
    if not directed:
        existing = {(int(u), int(v)) for u, v in graph.eel_edges}
        new_pairs = sorted(
            {(min(q, n), max(q, n)) for q, n in proposals} - existing
        )
        eels = np.concatenate(
            [graph.eel_edges, np.array(new_pairs, dtype=np.int64).reshape(-1, 2)]
        )
        eels = eels[np.lexsort((eels[:, 1], eels[:, 0]))]
        out = HeteroGraph(
            entity_count=graph.entity_count,
            concept_count=graph.concept_count,
            relations=list(graph.relations),
            semantic_edges=graph.semantic_edges,
            eel_edges=eels,
            directed_eels=graph.directed_eels,
            node_names=graph.node_names,
            external_ids=graph.external_ids,
        )
        report.update(new_undirected=len(new_pairs), new_directed=0)
    else:
        existing_dir = {(int(s), int(d)) for s, d in graph.directed_eels}
        new_dir = sorted(
            {
                (n, q)
                for q, n in proposals
                if degrees[n] > popular_threshold and degrees[q] <= popular_threshold
            }
            - existing_dir
        )
        dirs = np.concatenate(
            [graph.directed_eels, np.array(new_dir, dtype=np.int64).reshape(-1, 2)]
        )
        dirs = dirs[np.lexsort((dirs[:, 1], dirs[:, 0]))]
        out = HeteroGraph(
            entity_count=graph.entity_count,
            concept_count=graph.concept_count,
            relations=list(graph.relations),
            semantic_edges=graph.semantic_edges,
            eel_edges=graph.eel_edges,
            directed_eels=dirs,
            node_names=graph.node_names,
            external_ids=graph.external_ids,
        )
        report.update(new_undirected=0, new_directed=len(new_dir))
    after_und = len(out.eel_edges)
    after_dir = len(out.directed_eels)
    total_before = before_und + before_dir
    report.update(
        eel_count_after=after_und,
        directed_count_after=after_dir,
        growth_factor=((after_und + after_dir) / total_before) if total_before else None,
    )
    _log.info(
        "augment: %d -> %d undirected, %d -> %d directed",
        before_und,
        after_und,
        before_dir,
        after_dir,
    )
    return out, report


def reinfer(model: rgnn.RGnnModel, graph: HeteroGraph, features: np.ndarray) -> EmbeddingArtifact:
    """Frozen-weight encode; the artifact for an edited or extended graph."""
    embeddings = rgnn.encode(graph, features, model)[: graph.entity_count]
    ids = graph.external_ids or [str(i) for i in range(graph.entity_count)]
    return EmbeddingArtifact(
        embeddings,
        list(ids[: graph.entity_count]),
        meta={"graph_hash": graph_hash(graph), "model_hash": rgnn.model_hash(model)},
    )
