"""Subgraph generation: partition entities, duplicate concepts everywhere.

Training memory is dominated by entities, so entities are split into N
disjoint, size-balanced parts while cutting as few co-engagement links as
possible.  Concept nodes are cheap and shared; every subgraph receives the
full concept set, which keeps each entity's semantic neighborhood intact
inside its own subgraph.  Links whose endpoints land in different parts are
excluded from subgraph training but kept in a ledger for reporting and for
full-graph inference.

The partitioner is a classic multilevel scheme: coarsen by heavy-edge
matching, partition the small graph (component packing plus randomized
greedy starts), then uncoarsen with gain-based move refinement under the
balance bounds.  Each refinement pass applies a move sequence and rolls
back to the best prefix, so a pass never increases the cut.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .kgraph import HeteroGraph

_log = logging.getLogger("semgnn.hasp")

DEFAULT_EPSILON = 0.05
_COARSEST_SIZE = 64
_RESTARTS = 8
_MAX_PASSES = 10


class PartitionError(ValueError):
    pass


@dataclass
class SamplingRule:
    node_type: str  # "entity" or "concept"
    sample_count: int
    seed: int = 0

    def validate(self) -> None:
        if self.node_type not in ("entity", "concept"):
            raise PartitionError(f"unknown node_type {self.node_type!r}")
        if self.sample_count < 0:
            raise PartitionError("sample_count must be non-negative")


@dataclass
class HaspPlan:
    partition_count: int
    assignment: np.ndarray  # partition index per entity
    cut_eels: np.ndarray  # (C, 2) links spanning partitions
    sampled: dict[str, list[list[int]]] = field(default_factory=dict)

    def subgraph_entities(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == k)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.partition_count)


class _Csr:
    """Compact adjacency over contiguous vertex ids with edge weights."""

    def __init__(self, n: int, edges: np.ndarray, weights: np.ndarray):
        self.n = n
        if len(edges) == 0:
            self.indptr = np.zeros(n + 1, dtype=np.int64)
            self.indices = np.zeros(0, dtype=np.int64)
            self.weights = np.zeros(0)
            return
        u = np.concatenate([edges[:, 0], edges[:, 1]])
        v = np.concatenate([edges[:, 1], edges[:, 0]])
        w = np.concatenate([weights, weights])
        order = np.lexsort((v, u))
        u, v, w = u[order], v[order], w[order]
        self.indptr = np.zeros(n + 1, dtype=np.int64)
        np.add.at(self.indptr, u + 1, 1)
        self.indptr = np.cumsum(self.indptr)
        self.indices = v
        self.weights = w

    def neighbors(self, v: int) -> tuple[np.ndarray, np.ndarray]:
        s, e = self.indptr[v], self.indptr[v + 1]
        return self.indices[s:e], self.weights[s:e]


def balance_bounds(total: int, n_parts: int, epsilon: float) -> tuple[int, int]:
    """Integer part-size bounds: each part holds between floor and cap nodes.

    The cap never drops below the even split, so a feasible assignment
    always exists.
    """
    target = float(total) / n_parts
    cap = max(int(np.ceil((1 + epsilon) * target)), int(np.ceil(target)))
    floor = int(np.floor((1 - epsilon) * target))
    return floor, cap


def _cut_weight(edges, weights, labels) -> float:
    if len(edges) == 0:
        return 0.0
    return float(np.sum(weights[labels[edges[:, 0]] != labels[edges[:, 1]]]))


def _components(csr: _Csr) -> np.ndarray:
    comp = -np.ones(csr.n, dtype=np.int64)
    cur = 0
    for start in range(csr.n):
        if comp[start] >= 0:
            continue
        stack = [start]
        comp[start] = cur
        while stack:
            v = stack.pop()
            nbrs, _ = csr.neighbors(v)
            for u in nbrs:
                if comp[u] < 0:
                    comp[u] = cur
                    stack.append(int(u))
        cur += 1
    return comp


def _pack_components(csr, vweights, n_parts, floor, cap) -> np.ndarray | None:
    """First-fit-decreasing of whole components; None if bounds infeasible."""
    comp = _components(csr)
    comp_w = np.bincount(comp, weights=vweights)
    order = np.argsort(-comp_w, kind="stable")
    part_w = np.zeros(n_parts)
    comp_part = np.empty(len(comp_w), dtype=np.int64)
    for c in order:
        dest = int(np.argmin(part_w))
        if part_w[dest] + comp_w[c] > cap:
            return None
        comp_part[c] = dest
        part_w[dest] += comp_w[c]
    if np.any(part_w < floor) or np.any(part_w > cap):
        return None
    return comp_part[comp]


def _greedy_balanced(vweights, n_parts, rng) -> np.ndarray:
    order = rng.permutation(len(vweights))
    order = order[np.argsort(-vweights[order], kind="stable")]
    labels = np.empty(len(vweights), dtype=np.int64)
    part_w = np.zeros(n_parts)
    for v in order:
        dest = int(np.argmin(part_w))
        labels[v] = dest
        part_w[dest] += vweights[v]
    return labels


def _refine_pass(csr, edges, eweights, vweights, labels, n_parts, floor, cap) -> float:
    """One best-prefix move pass; returns the (non-positive) cut delta."""
    n = csr.n
    conn = np.zeros((n, n_parts))
    for v in range(n):
        nbrs, w = csr.neighbors(v)
        np.add.at(conn[v], labels[nbrs], w)
    part_w = np.bincount(labels, weights=vweights, minlength=n_parts)
    moved = np.zeros(n, dtype=bool)
    history: list[tuple[int, int, int]] = []
    deltas: list[float] = []
    stall = 0
    while stall < 50 and len(history) < n:
        own = conn[np.arange(n), labels]
        gains = conn - own[:, None]
        gains[np.arange(n), labels] = -np.inf
        gains[moved] = -np.inf
        feasible_dst = part_w[None, :] + vweights[:, None] <= cap
        feasible_src = (part_w[labels] - vweights) >= floor
        gains[~feasible_dst] = -np.inf
        gains[~feasible_src] = -np.inf
        flat = int(np.argmax(gains))
        v, dest = flat // n_parts, flat % n_parts
        best = gains[v, dest]
        if not np.isfinite(best):
            break
        src = int(labels[v])
        labels[v] = dest
        part_w[src] -= vweights[v]
        part_w[dest] += vweights[v]
        nbrs, w = csr.neighbors(v)
        np.add.at(conn[:, src], nbrs, -w)
        np.add.at(conn[:, dest], nbrs, w)
        moved[v] = True
        history.append((int(v), src, dest))
        deltas.append(-float(best))
        stall = stall + 1 if best <= 0 else 0
    if not history:
        return 0.0
    cum = np.cumsum(deltas)
    best_prefix = int(np.argmin(cum)) + 1 if cum.min() < 0 else 0
    for v, src, dest in reversed(history[best_prefix:]):
        labels[v] = src
        part_w[dest] -= vweights[v]
        part_w[src] += vweights[v]
    return float(cum[best_prefix - 1]) if best_prefix else 0.0


def _refine(csr, edges, eweights, vweights, labels, n_parts, floor, cap) -> None:
    before = _cut_weight(edges, eweights, labels)
    for _ in range(_MAX_PASSES):
        delta = _refine_pass(csr, edges, eweights, vweights, labels, n_parts, floor, cap)
        after = _cut_weight(edges, eweights, labels)
        if after > before + 1e-9:
            raise AssertionError("refinement pass increased the cut")
        before = after
        if delta >= 0:
            break


def _flat_partition(n, edges, eweights, vweights, n_parts, floor, cap, rng) -> np.ndarray:
    csr = _Csr(n, edges, eweights)
    candidates: list[np.ndarray] = []
    packed = _pack_components(csr, vweights, n_parts, floor, cap)
    if packed is not None:
        candidates.append(packed)
    for _ in range(_RESTARTS):
        candidates.append(_greedy_balanced(vweights, n_parts, rng))
    best, best_cut = None, np.inf
    for labels in candidates:
        _refine(csr, edges, eweights, vweights, labels, n_parts, floor, cap)
        cut = _cut_weight(edges, eweights, labels)
        if cut < best_cut:
            best, best_cut = labels, cut
    return best


def _heavy_edge_matching(csr, vweights, merge_cap, rng) -> np.ndarray:
    match = -np.ones(csr.n, dtype=np.int64)
    for v in rng.permutation(csr.n):
        if match[v] >= 0:
            continue
        nbrs, w = csr.neighbors(v)
        best_u, best_w = -1, -1.0
        for u, wu in zip(nbrs, w):
            if match[u] >= 0 or u == v:
                continue
            if vweights[v] + vweights[u] > merge_cap:
                continue
            if wu > best_w or (wu == best_w and u < best_u):
                best_u, best_w = int(u), float(wu)
        if best_u >= 0:
            match[v], match[best_u] = best_u, v
        else:
            match[v] = v
    return match


def _contract(n, edges, eweights, vweights, match):
    coarse_id = -np.ones(n, dtype=np.int64)
    nxt = 0
    for v in range(n):
        if coarse_id[v] >= 0:
            continue
        coarse_id[v] = nxt
        coarse_id[match[v]] = nxt
        nxt += 1
    cw = np.zeros(nxt)
    np.add.at(cw, coarse_id, vweights)
    if len(edges):
        cu = coarse_id[edges[:, 0]]
        cv = coarse_id[edges[:, 1]]
        keep = cu != cv
        lo = np.minimum(cu[keep], cv[keep])
        hi = np.maximum(cu[keep], cv[keep])
        key = lo * nxt + hi
        uniq, inverse = np.unique(key, return_inverse=True)
        w = np.zeros(len(uniq))
        np.add.at(w, inverse, eweights[keep])
        ce = np.stack([uniq // nxt, uniq % nxt], axis=1)
    else:
        ce = np.zeros((0, 2), dtype=np.int64)
        w = np.zeros(0)
    return nxt, ce, w, cw, coarse_id


def _partition_multilevel(n, edges, eweights, vweights, n_parts, floor, cap, rng) -> np.ndarray:
    if n <= max(_COARSEST_SIZE, 10 * n_parts):
        return _flat_partition(n, edges, eweights, vweights, n_parts, floor, cap, rng)
    total = vweights.sum()
    merge_cap = max(total / (3.0 * n_parts), 2.0 * vweights.max())
    csr = _Csr(n, edges, eweights)
    match = _heavy_edge_matching(csr, vweights, merge_cap, rng)
    cn, ce, cw_e, cw_v, coarse_id = _contract(n, edges, eweights, vweights, match)
    if cn > 0.95 * n:  # matching found nothing useful; stop coarsening
        return _flat_partition(n, edges, eweights, vweights, n_parts, floor, cap, rng)
    coarse_labels = _partition_multilevel(cn, ce, cw_e, cw_v, n_parts, floor, cap, rng)
    labels = coarse_labels[coarse_id]
    _refine(csr, edges, eweights, vweights, labels, n_parts, floor, cap)
    return labels


def partition_eel_subgraph(
    graph: HeteroGraph,
    n_parts: int,
    epsilon: float = DEFAULT_EPSILON,
    seed: int = 0,
    bounds: tuple[int, int] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Partition the link-incident entities; returns (entity ids, labels).

    Every part's entity count stays within the balance bounds derived from
    epsilon (or the explicit override); the cut is minimized heuristically.
    """
    if n_parts < 1:
        raise PartitionError("partition count must be at least 1")
    if epsilon < 0:
        raise PartitionError("balance tolerance must be non-negative")
    degrees = np.zeros(graph.entity_count, dtype=np.int64)
    if len(graph.eel_edges):
        np.add.at(degrees, graph.eel_edges[:, 0], 1)
        np.add.at(degrees, graph.eel_edges[:, 1], 1)
    nodes = np.flatnonzero(degrees > 0)
    if n_parts > nodes.size:
        raise PartitionError(
            f"cannot split {nodes.size} link-incident entities into {n_parts} parts"
        )
    if n_parts == 1:
        return nodes, np.zeros(nodes.size, dtype=np.int64)
    compact = -np.ones(graph.entity_count, dtype=np.int64)
    compact[nodes] = np.arange(nodes.size)
    edges = compact[graph.eel_edges]
    eweights = np.ones(len(edges))
    vweights = np.ones(nodes.size)
    floor, cap = bounds if bounds is not None else balance_bounds(nodes.size, n_parts, epsilon)
    rng = np.random.default_rng(seed)
    labels = _partition_multilevel(nodes.size, edges, eweights, vweights, n_parts, floor, cap, rng)
    sizes = np.bincount(labels, minlength=n_parts)
    if sizes.max() > cap or sizes.min() < floor:
        raise AssertionError(f"partition sizes {sizes.tolist()} violate bounds [{floor}, {cap}]")
    return nodes, labels


def assign_eel_free(
    assignment: dict[int, int] | tuple[np.ndarray, np.ndarray],
    free_entities: np.ndarray,
    n_parts: int,
) -> dict[int, int]:
    """Water-fill link-free entities, always into the currently smallest part."""
    if isinstance(assignment, tuple):
        ids, labels = assignment
        completed = {int(i): int(p) for i, p in zip(ids, labels)}
    else:
        completed = dict(assignment)
    counts = np.zeros(n_parts, dtype=np.int64)
    for p in completed.values():
        counts[p] += 1
    for v in np.sort(np.asarray(free_entities)):
        dest = int(np.argmin(counts))  # argmin takes the lowest index on ties
        completed[int(v)] = dest
        counts[dest] += 1
    return completed


def build_plan(
    graph: HeteroGraph,
    n_parts: int,
    rules: list[SamplingRule] | None = None,
    seed: int = 0,
    epsilon: float = DEFAULT_EPSILON,
) -> HaspPlan:
    """Full plan: partition, water-fill, duplicate concepts, apply sampling."""
    if n_parts < 1:
        raise PartitionError("partition count must be at least 1")
    rules = rules or []
    for rule in rules:
        rule.validate()
    degrees = np.zeros(graph.entity_count, dtype=np.int64)
    if len(graph.eel_edges):
        np.add.at(degrees, graph.eel_edges[:, 0], 1)
        np.add.at(degrees, graph.eel_edges[:, 1], 1)
    free = np.flatnonzero(degrees == 0)
    incident = int(np.count_nonzero(degrees > 0))
    floor, cap = balance_bounds(graph.entity_count, n_parts, epsilon)
    if incident:
        # Balance is judged on full part sizes, so the incident phase may run
        # under a floor relaxed by the fill budget; the fill tops up the
        # smallest part first and usually restores it.  The rare miss falls
        # back to strict incident-only bounds, which the fill cannot break.
        relaxed = (max(0, floor - free.size), cap)
        ids, labels = partition_eel_subgraph(graph, n_parts, epsilon, seed, bounds=relaxed)
        completed = assign_eel_free((ids, labels), free, n_parts)
        sizes = np.bincount(list(completed.values()), minlength=n_parts)
        if free.size and sizes.min() < floor:
            ids, labels = partition_eel_subgraph(graph, n_parts, epsilon, seed)
            completed = assign_eel_free((ids, labels), free, n_parts)
    else:
        completed = assign_eel_free({}, free, n_parts)
    assignment = np.empty(graph.entity_count, dtype=np.int64)
    for v, p in completed.items():
        assignment[v] = p

    eel = graph.eel_edges
    if len(eel):
        crossing = assignment[eel[:, 0]] != assignment[eel[:, 1]]
        cut = eel[crossing]
    else:
        cut = np.zeros((0, 2), dtype=np.int64)
    _log.info(
        "plan: N=%d sizes=%s cut=%d/%d", n_parts, np.bincount(assignment, minlength=n_parts).tolist(), len(cut), len(eel)
    )

    sampled: dict[str, list[list[int]]] = {}
    for i, rule in enumerate(rules):
        per_subgraph = []
        for k in range(n_parts):
            if rule.node_type == "entity":
                pool = np.flatnonzero(assignment == k)
            else:
                pool = np.arange(graph.entity_count, graph.node_count)
            if rule.sample_count > pool.size:
                raise PartitionError(
                    f"rule {i}: sample_count {rule.sample_count} exceeds pool {pool.size} in subgraph {k}"
                )
            rng = np.random.default_rng([rule.seed, seed, i, k])
            take = rng.choice(pool, size=rule.sample_count, replace=False)
            per_subgraph.append(sorted(int(x) for x in take))
        sampled[f"rule{i}_{rule.node_type}{rule.sample_count}"] = per_subgraph

    return HaspPlan(n_parts, assignment, cut, sampled)


def materialize_subgraph(graph: HeteroGraph, plan: HaspPlan, k: int) -> tuple[HeteroGraph, np.ndarray]:
    """Build subgraph k: its entities re-indexed densely, all concepts kept.

    Returns the subgraph and the full-graph node id for each local node.
    """
    if not 0 <= k < plan.partition_count:
        raise PartitionError(f"subgraph index {k} out of range")
    entities = plan.subgraph_entities(k)
    local_entity = -np.ones(graph.entity_count, dtype=np.int64)
    local_entity[entities] = np.arange(entities.size)
    ne_local = entities.size

    sem = graph.semantic_edges
    owned = sem[np.isin(sem[:, 0], entities)] if len(sem) else sem
    sem_local = np.stack(
        [local_entity[owned[:, 0]], owned[:, 1], owned[:, 2] - graph.entity_count + ne_local],
        axis=1,
    ) if len(owned) else np.zeros((0, 3), dtype=np.int64)

    eel = graph.eel_edges
    if len(eel):
        inside = (plan.assignment[eel[:, 0]] == k) & (plan.assignment[eel[:, 1]] == k)
        kept = eel[inside]
        eel_local = np.sort(
            np.stack([local_entity[kept[:, 0]], local_entity[kept[:, 1]]], axis=1), axis=1
        ) if len(kept) else np.zeros((0, 2), dtype=np.int64)
    else:
        eel_local = np.zeros((0, 2), dtype=np.int64)

    local_to_full = np.concatenate([entities, np.arange(graph.entity_count, graph.node_count)])
    names = graph.node_names
    ext = graph.external_ids
    sub = HeteroGraph(
        entity_count=ne_local,
        concept_count=graph.concept_count,
        relations=list(graph.relations),
        semantic_edges=sem_local,
        eel_edges=eel_local,
        node_names=[names[i] for i in local_to_full] if names else None,
        external_ids=[ext[i] for i in local_to_full] if ext else None,
    )
    return sub, local_to_full


def plan_report(plan: HaspPlan, graph: HeteroGraph, dim: int = 64) -> dict:
    """Balance and cut summary plus a crude per-subgraph memory proxy."""
    sizes = plan.sizes()
    eel_total = len(graph.eel_edges)
    subgraphs = []
    eel_inside_total = 0
    for k in range(plan.partition_count):
        entities = plan.subgraph_entities(k)
        sem_count = int(np.isin(graph.semantic_edges[:, 0], entities).sum()) if len(graph.semantic_edges) else 0
        if len(graph.eel_edges):
            inside = (plan.assignment[graph.eel_edges[:, 0]] == k) & (
                plan.assignment[graph.eel_edges[:, 1]] == k
            )
            eel_count = int(inside.sum())
        else:
            eel_count = 0
        eel_inside_total += eel_count
        node_count = int(entities.size) + graph.concept_count
        edge_count = sem_count + eel_count
        subgraphs.append(
            {
                "entities": int(entities.size),
                "nodes": node_count,
                "eel_edges": eel_count,
                "semantic_edges": sem_count,
                "memory_proxy": node_count * dim + edge_count,
            }
        )
    if eel_inside_total + len(plan.cut_eels) != eel_total:
        raise AssertionError("cut ledger does not account for every link")
    return {
        "partition_count": plan.partition_count,
        "balance_factor": float(sizes.max() / sizes.mean()) if sizes.size else 1.0,
        "cut_eel_count": int(len(plan.cut_eels)),
        "cut_ratio": float(len(plan.cut_eels) / eel_total) if eel_total else 0.0,
        "subgraphs": subgraphs,
    }


def save_plan(plan: HaspPlan, path) -> None:
    data = {
        "N": plan.partition_count,
        "assignments": [int(p) for p in plan.assignment],
        "sampled": plan.sampled,
        "cut_eels": [[int(u), int(v)] for u, v in plan.cut_eels],
    }
    Path(path).write_text(json.dumps(data), encoding="utf-8")


def load_plan(path) -> HaspPlan:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    cut = np.array(data["cut_eels"], dtype=np.int64).reshape(-1, 2)
    return HaspPlan(
        int(data["N"]),
        np.asarray(data["assignments"], dtype=np.int64),
        cut,
        {k: [list(map(int, s)) for s in v] for k, v in data["sampled"].items()},
    )
