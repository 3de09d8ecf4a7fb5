"""Synthetic semantic KGs with planted similarity structure.

Entities are split into communities.  Each (community, category) pair
prefers a couple of that category's concepts, so same-community entities
share concepts far more often than strangers; concept base popularity is
power-law, producing the hub concepts that make naive neighbor sampling
explode.  Co-engagement links are sampled within communities over a
"popular" entity subset with mildly skewed per-node rates, leaving the
configured fraction of entities with no EEL at all and a heavy-tailed
degree profile for the rest.

Two similarity ground truths are planted: pairs that share a community and
enough concepts (semantic flavor), and EELs held out of the training graph
entirely (engagement flavor).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, asdict
from pathlib import Path

import numpy as np

from .kgraph import EEL_RELATION_NAME, HeteroGraph, RelationType, degree_groups_all

CATEGORY_NAMES = [
    "genre",
    "maturity_level",
    "storyline",
    "era",
    "format",
    "mood",
    "audience",
    "origin",
    "style",
    "theme",
]

# preference sharpening for a community's favored concepts within a category
CONCEPT_BOOST = 8.0
# per-node EEL rate skew; 0 recovers plain per-pair Bernoulli sampling
WEIGHT_EXPONENT = 0.5


class ConfigError(ValueError):
    """Invalid or infeasible generator configuration."""


@dataclass
class SynGenConfig:
    entity_count: int = 5000
    category_count: int = 10
    concepts_per_category: list[int] = field(default_factory=lambda: [5] * 10)
    concepts_per_entity_range: list[tuple[int, int]] = field(
        default_factory=lambda: [(0, 2)] * 10
    )
    planted_community_count: int = 20
    eel_within_community_prob: float = 0.045
    eel_cross_community_prob: float = 0.0001
    zero_eel_entity_fraction: float = 0.6
    co_sim_holdout_fraction: float = 0.2
    hc_sim_min_shared_concepts: int = 4
    seed: int = 0

    def validate(self) -> None:
        if self.entity_count < 2:
            raise ConfigError("entity_count must be at least 2")
        if self.category_count != len(self.concepts_per_category):
            raise ConfigError("concepts_per_category must list one count per category")
        if self.category_count != len(self.concepts_per_entity_range):
            raise ConfigError("concepts_per_entity_range must list one (min, max) per category")
        for k, (lo, hi) in enumerate(self.concepts_per_entity_range):
            if not (0 <= lo <= hi <= self.concepts_per_category[k]):
                raise ConfigError(f"bad concepts_per_entity_range for category {k}: ({lo}, {hi})")
        for name in (
            "eel_within_community_prob",
            "eel_cross_community_prob",
            "zero_eel_entity_fraction",
            "co_sim_holdout_fraction",
        ):
            p = getattr(self, name)
            if not (0.0 <= p <= 1.0):
                raise ConfigError(f"{name} must be a probability, got {p}")
        if self.eel_within_community_prob < self.eel_cross_community_prob:
            raise ConfigError("within-community EEL probability must exceed the cross rate")
        if self.planted_community_count < 1 or self.planted_community_count > self.entity_count:
            raise ConfigError("planted_community_count must be in [1, entity_count]")
        if self.hc_sim_min_shared_concepts < 1:
            raise ConfigError("hc_sim_min_shared_concepts must be positive")

    @classmethod
    def from_json(cls, path) -> "SynGenConfig":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls.from_dict(data)

    @classmethod
    def from_dict(cls, data: dict) -> "SynGenConfig":
        allowed = {f.name for f in fields(cls)}
        unknown = set(data) - allowed
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**data)
        cfg.concepts_per_entity_range = [tuple(r) for r in cfg.concepts_per_entity_range]
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["concepts_per_entity_range"] = [list(r) for r in self.concepts_per_entity_range]
        return d


@dataclass
class PlantedTruth:
    """Ground truth the generator knows and the graph does not reveal."""

    community_of: np.ndarray  # (entity_count,)
    hc_sim_pairs: set[tuple[int, int]]  # same community + concept overlap
    co_sim_pairs: set[tuple[int, int]]  # held-out EELs, absent from the graph

    def to_dict(self) -> dict:
        return {
            "community_of": [int(c) for c in self.community_of],
            "hc_sim_pairs": sorted([list(p) for p in self.hc_sim_pairs]),
            "co_sim_pairs": sorted([list(p) for p in self.co_sim_pairs]),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PlantedTruth":
        return cls(
            community_of=np.asarray(data["community_of"], dtype=np.int64),
            hc_sim_pairs={(int(i), int(j)) for i, j in data["hc_sim_pairs"]},
            co_sim_pairs={(int(i), int(j)) for i, j in data["co_sim_pairs"]},
        )


def save_truth(truth: PlantedTruth, path) -> None:
    Path(path).write_text(json.dumps(truth.to_dict(), sort_keys=True), encoding="utf-8")


def load_truth(path) -> PlantedTruth:
    return PlantedTruth.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _category_name(k: int) -> str:
    return CATEGORY_NAMES[k] if k < len(CATEGORY_NAMES) else f"category{k:02d}"


def _draw_concepts(rng, member_rows, m, probs, lo, hi):
    """Vectorized per-entity concept draws (0..2 distinct) for one category."""
    counts = rng.integers(lo, hi + 1, size=member_rows.size)
    rows, cols = [], []
    one = member_rows[counts >= 1]
    if one.size:
        first = rng.choice(m, size=one.size, p=probs)
        rows.append(one)
        cols.append(first)
        two = counts[counts >= 1] >= 2
        pending = one[two]
        taken = first[two]
        while pending.size:  # resample collisions; distinct concepts per entity
            second = rng.choice(m, size=pending.size, p=probs)
            ok = second != taken
            rows.append(pending[ok])
            cols.append(second[ok])
            pending, taken = pending[~ok], taken[~ok]
    extra = counts > 2  # ranges wider than (0,2) fall back to per-entity draws
    for ent, want in zip(member_rows[extra], counts[extra]):
        picks = rng.choice(m, size=want, replace=False, p=probs)
        rows.append(np.full(want, ent))
        cols.append(picks)
    if not rows:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate(rows), np.concatenate(cols)


def generate(cfg: SynGenConfig) -> tuple[HeteroGraph, PlantedTruth]:
    """Build a graph and its planted truth, deterministically for a seed."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    ne = cfg.entity_count
    ncommunities = cfg.planted_community_count

    community_of = rng.permutation(np.arange(ne) % ncommunities).astype(np.int64)

    # concepts: per-category power-law popularity, sharpened per community
    concept_offsets = np.cumsum([0] + list(cfg.concepts_per_category))
    nc = int(concept_offsets[-1])
    relations = [RelationType(k, f"has_{_category_name(k)}", "semantic") for k in range(cfg.category_count)]
    relations.append(RelationType(cfg.category_count, EEL_RELATION_NAME, "eel"))

    sem_entity, sem_rel, sem_concept = [], [], []
    concept_matrix = np.zeros((ne, nc), dtype=np.int8)  # for overlap counting
    members_by_community = [np.flatnonzero(community_of == c) for c in range(ncommunities)]
    for k in range(cfg.category_count):
        m = cfg.concepts_per_category[k]
        if m == 0:
            continue
        lo, hi = cfg.concepts_per_entity_range[k]
        base = 1.0 / np.arange(1, m + 1)
        for c in range(ncommunities):
            probs = base.copy()
            preferred = rng.choice(m, size=min(2, m), replace=False)
            probs[preferred] *= CONCEPT_BOOST
            probs /= probs.sum()
            rows, cols = _draw_concepts(rng, members_by_community[c], m, probs, lo, hi)
            if rows.size:
                sem_entity.append(rows)
                sem_rel.append(np.full(rows.size, k, dtype=np.int64))
                sem_concept.append(ne + concept_offsets[k] + cols)
                concept_matrix[rows, concept_offsets[k] + cols] = 1

    if sem_entity:
        semantic = np.stack(
            [np.concatenate(sem_entity), np.concatenate(sem_rel), np.concatenate(sem_concept)],
            axis=1,
        )
    else:
        semantic = np.zeros((0, 3), dtype=np.int64)

    # popular subset gets all the EELs; the rest stay engagement-free
    n_popular = int(round((1.0 - cfg.zero_eel_entity_fraction) * ne))
    popular = np.sort(rng.choice(ne, size=n_popular, replace=False))
    node_weight = np.zeros(ne)
    for c in range(ncommunities):
        members = popular[np.isin(popular, members_by_community[c])]
        if members.size == 0:
            continue
        order = rng.permutation(members.size)
        w = (1.0 + np.arange(members.size)) ** (-WEIGHT_EXPONENT)
        w = w / w.mean()
        node_weight[members[order]] = w

    all_pairs: set[tuple[int, int]] = set()
    for c in range(ncommunities):
        members = popular[np.isin(popular, members_by_community[c])]
        m = members.size
        if m < 2:
            continue
        w = node_weight[members]
        p = np.minimum(cfg.eel_within_community_prob * np.outer(w, w), 1.0)
        draws = rng.random((m, m))
        iu, ju = np.triu_indices(m, k=1)
        hits = draws[iu, ju] < p[iu, ju]
        for i, j in zip(members[iu[hits]], members[ju[hits]]):
            all_pairs.add((min(int(i), int(j)), max(int(i), int(j))))

    # cross-community noise over the popular subset
    if cfg.eel_cross_community_prob > 0 and n_popular >= 2:
        community_sizes = np.array([np.isin(popular, mem).sum() for mem in members_by_community])
        cross_pair_count = (n_popular * (n_popular - 1)) // 2 - int(
            np.sum(community_sizes * (community_sizes - 1) // 2)
        )
        want = int(rng.binomial(max(cross_pair_count, 0), cfg.eel_cross_community_prob))
        attempts = 0
        added = 0
        while added < want and attempts < 50 * max(want, 1):
            attempts += 1
            i, j = rng.choice(n_popular, size=2, replace=False)
            u, v = int(popular[i]), int(popular[j])
            if community_of[u] == community_of[v]:
                continue
            key = (min(u, v), max(u, v))
            if key in all_pairs:
                continue
            all_pairs.add(key)
            added += 1

    pair_list = sorted(all_pairs)
    n_holdout = int(round(cfg.co_sim_holdout_fraction * len(pair_list)))
    order = rng.permutation(len(pair_list))
    holdout_idx = set(order[:n_holdout].tolist())
    co_sim = {pair_list[i] for i in holdout_idx}
    train_eels = [pair_list[i] for i in range(len(pair_list)) if i not in holdout_idx]
    eels = np.array(train_eels, dtype=np.int64).reshape(-1, 2)

    # semantic ground truth: same community plus enough shared concepts
    hc_sim: set[tuple[int, int]] = set()
    for c in range(ncommunities):
        members = members_by_community[c]
        if members.size < 2:
            continue
        overlap = concept_matrix[members].astype(np.int32) @ concept_matrix[members].T.astype(np.int32)
        iu, ju = np.triu_indices(members.size, k=1)
        hits = overlap[iu, ju] >= cfg.hc_sim_min_shared_concepts
        for i, j in zip(members[iu[hits]], members[ju[hits]]):
            hc_sim.add((min(int(i), int(j)), max(int(i), int(j))))

    external_ids = [f"e{i:05d}" for i in range(ne)]
    node_names = [f"entity_{i:05d}" for i in range(ne)]
    for k in range(cfg.category_count):
        for j in range(cfg.concepts_per_category[k]):
            external_ids.append(f"c_{_category_name(k)}_{j:03d}")
            node_names.append(f"{_category_name(k)}:{j:03d}")

    graph = HeteroGraph(
        entity_count=ne,
        concept_count=nc,
        relations=relations,
        semantic_edges=semantic,
        eel_edges=eels,
        node_names=node_names,
        external_ids=external_ids,
    )
    truth = PlantedTruth(community_of=community_of, hc_sim_pairs=hc_sim, co_sim_pairs=co_sim)
    return graph, truth


@dataclass
class InductiveSplit:
    """Training graph with held-out entities removed, plus the id bookkeeping."""

    train_graph: HeteroGraph
    holdout_entities: np.ndarray  # full-graph entity ids, sorted
    train_to_full: np.ndarray  # full-graph node id for each train-graph node


def split_inductive(
    g: HeteroGraph, truth: PlantedTruth, holdout_fraction: float, seed: int
) -> InductiveSplit:
    """Hold out entities stratified by EEL-degree group; drop their edges.

    The returned train graph is densely re-indexed; concepts are all kept.
    """
    if not (0.0 < holdout_fraction < 1.0):
        raise ConfigError("holdout_fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    groups = degree_groups_all(g)
    holdout: list[np.ndarray] = []
    for grp in range(3):
        members = np.flatnonzero(groups == grp)
        if members.size < 2:
            raise ConfigError(f"degree group {grp} has fewer than 2 entities; cannot stratify")
        take = max(1, int(round(holdout_fraction * members.size)))
        take = min(take, members.size - 1)  # keep at least one member trainable
        holdout.append(np.sort(rng.choice(members, size=take, replace=False)))
    holdout_ids = np.sort(np.concatenate(holdout))

    keep_mask = np.ones(g.entity_count, dtype=bool)
    keep_mask[holdout_ids] = False
    kept_entities = np.flatnonzero(keep_mask)
    new_entity_id = -np.ones(g.entity_count, dtype=np.int64)
    new_entity_id[kept_entities] = np.arange(kept_entities.size)
    ne_new = kept_entities.size

    sem = g.semantic_edges
    sem_keep = sem[keep_mask[sem[:, 0]]]
    sem_new = np.stack(
        [
            new_entity_id[sem_keep[:, 0]],
            sem_keep[:, 1],
            sem_keep[:, 2] - g.entity_count + ne_new,
        ],
        axis=1,
    ) if sem_keep.size else np.zeros((0, 3), dtype=np.int64)

    eel = g.eel_edges
    eel_keep = eel[keep_mask[eel[:, 0]] & keep_mask[eel[:, 1]]] if eel.size else eel
    eel_new = np.stack(
        [new_entity_id[eel_keep[:, 0]], new_entity_id[eel_keep[:, 1]]], axis=1
    ) if eel_keep.size else np.zeros((0, 2), dtype=np.int64)
    eel_new = np.sort(eel_new, axis=1) if eel_new.size else eel_new

    train_to_full = np.concatenate(
        [kept_entities, np.arange(g.entity_count, g.node_count)]
    )
    ext = g.external_ids
    names = g.node_names
    train_graph = HeteroGraph(
        entity_count=ne_new,
        concept_count=g.concept_count,
        relations=list(g.relations),
        semantic_edges=sem_new,
        eel_edges=eel_new,
        node_names=[names[i] for i in train_to_full] if names else None,
        external_ids=[ext[i] for i in train_to_full] if ext else None,
    )
    return InductiveSplit(train_graph, holdout_ids, train_to_full)
