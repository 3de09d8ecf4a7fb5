"""Translation-based embedding pretraining over the semantic triples.

Concept nodes carry no usable input features of their own, so we pretrain
node and relation embeddings with a margin ranking loss: a true triple
(entity, relation, concept) should score higher than a corrupted one.  The
score is the negative Euclidean distance f(h, r, t) = -|h + r - t|, which
makes "higher is more plausible" line up with the hinge

    loss = sum over triples of [f(neg) - f(pos) + margin]+

Corruption swaps the head for a random entity or the tail for a random
concept (fair coin), rejecting corruptions that collide with a known true
triple.  Embedding rows are projected back into the unit ball after every
step so the loss cannot be gamed by norm inflation.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .kgraph import HeteroGraph

_log = logging.getLogger("semgnn.kge")


class KgeError(ValueError):
    pass


@dataclass
class KgeConfig:
    dim: int = 64
    margin: float = 1.0
    lr: float = 0.1
    epochs: int = 50
    batch_size: int = 1024
    negatives_per_positive: int = 1
    seed: int = 0

    def validate(self) -> None:
        if self.dim < 1:
            raise KgeError("dim must be positive")
        if self.margin <= 0:
            raise KgeError("margin must be positive")
        if self.negatives_per_positive < 1:
            raise KgeError("negatives_per_positive must be at least 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise KgeError("epochs and batch_size must be positive")


@dataclass
class KgeModel:
    """Trained lookup tables; node rows cover entities then concepts."""

    node_embeddings: np.ndarray  # (entity_count + concept_count, dim)
    relation_embeddings: np.ndarray  # (semantic relation count, dim)
    margin: float
    dim: int
    loss_history: list[float] = field(default_factory=list)


def transe_score(h: np.ndarray, r: np.ndarray, t: np.ndarray) -> float:
    """Plausibility of a triple: zero for a perfect translation, else negative."""
    h, r, t = (np.asarray(x, dtype=np.float64) for x in (h, r, t))
    if not (h.shape == r.shape == t.shape):
        raise nc.ShapeError(f"mismatched triple shapes {h.shape}, {r.shape}, {t.shape}")
    return -float(np.linalg.norm(h + r - t))


def known_triple_set(graph: HeteroGraph) -> set[tuple[int, int, int]]:
    return {(int(h), int(r), int(t)) for h, r, t in graph.semantic_edges}


def corrupt_triple(
    triple,
    rng: np.random.Generator,
    graph: HeteroGraph,
    known: set[tuple[int, int, int]] | None = None,
    max_retries: int = 100,
) -> tuple[int, int, int]:
    """Corrupt head (random entity) or tail (random concept), coin-flipped.

    The corruption is rejected and redrawn while it reproduces a known true
    triple; a degenerate node pool therefore raises instead of spinning.
    """
    if known is None:
        known = known_triple_set(graph)
    h, r, t = (int(x) for x in triple)
    ne, total = graph.entity_count, graph.node_count
    for _ in range(max_retries):
        if rng.random() < 0.5:
            cand = (int(rng.integers(0, ne)), r, t)
        else:
            cand = (h, r, int(rng.integers(ne, total)))
        if cand not in known:
            return cand
    raise KgeError(f"could not corrupt triple {triple}: candidate pool exhausted")


def _corrupt_batch(triples, rng, graph, known, max_rounds=100):
    """Vectorized rejection sampling; one negative per input row."""
    ne, total = graph.entity_count, graph.node_count
    neg = triples.copy()
    pending = np.arange(len(triples))
    for _ in range(max_rounds):
        if pending.size == 0:
            return neg
        coin = rng.random(pending.size) < 0.5
        cand = triples[pending].copy()
        heads = rng.integers(0, ne, size=pending.size)
        tails = rng.integers(ne, total, size=pending.size)
        cand[coin, 0] = heads[coin]
        cand[~coin, 2] = tails[~coin]
        ok = np.array([tuple(row) not in known for row in cand], dtype=bool)
        neg[pending[ok]] = cand[ok]
        pending = pending[~ok]
    raise KgeError(f"{pending.size} triples could not be corrupted; pool exhausted")


def _renorm_rows(table: np.ndarray) -> None:
    norms = np.linalg.norm(table, axis=1, keepdims=True)
    np.divide(table, norms, out=table, where=norms > 1.0)


def pretrain(graph: HeteroGraph, cfg: KgeConfig) -> KgeModel:
    """Minibatch SGD on the margin ranking loss over all semantic triples."""
    cfg.validate()
    triples = graph.semantic_edges
    if len(triples) == 0:
        raise KgeError("graph has no semantic triples to pretrain on")
    rng = np.random.default_rng(cfg.seed)
    bound = 6.0 / np.sqrt(cfg.dim)
    nodes = rng.uniform(-bound, bound, size=(graph.node_count, cfg.dim))
    rels = rng.uniform(-bound, bound, size=(len(graph.relations) - 1, cfg.dim))
    _renorm_rows(nodes)
    _renorm_rows(rels)

    known = known_triple_set(graph)
    model = KgeModel(nodes, rels, cfg.margin, cfg.dim)
    n = len(triples)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = triples[order[start : start + cfg.batch_size]]
            if cfg.negatives_per_positive > 1:
                batch = np.repeat(batch, cfg.negatives_per_positive, axis=0)
            neg = _corrupt_batch(batch, rng, graph, known)

            tape = nc.Tape()
            node_var = tape.input(nodes)
            rel_var = tape.input(rels)
            r = tape.row_gather(rel_var, batch[:, 1])
            d_pos = tape.l2_norm_rows(
                tape.sub(tape.add(tape.row_gather(node_var, batch[:, 0]), r), tape.row_gather(node_var, batch[:, 2]))
            )
            d_neg = tape.l2_norm_rows(
                tape.sub(tape.add(tape.row_gather(node_var, neg[:, 0]), r), tape.row_gather(node_var, neg[:, 2]))
            )
            # [f(neg) - f(pos) + margin]+ in distance form: [d_pos - d_neg + margin]+
            per_triple = tape.hinge(tape.sub(d_pos, d_neg), cfg.margin)
            loss = tape.scale(tape.reduce_sum(per_triple), 1.0 / len(batch))
            tape.backward(loss)
            nc.sgd_step(
                {"nodes": nodes, "relations": rels},
                {"nodes": nc.grad_of(node_var), "relations": nc.grad_of(rel_var)},
                cfg.lr,
            )
            _renorm_rows(nodes)
            _renorm_rows(rels)
            epoch_loss += float(np.sum(per_triple.value))
        mean_loss = epoch_loss / (n * cfg.negatives_per_positive)
        model.loss_history.append(mean_loss)
        _log.info("kge epoch %d mean hinge %.6f", epoch, mean_loss)
    return model


def evaluate_filtered_mrr(
    model: KgeModel,
    eval_triples: np.ndarray,
    known: set[tuple[int, int, int]],
    graph: HeteroGraph,
) -> float:
    """Mean reciprocal rank of the true node among filtered candidates.

    Each held-out triple is scored twice: rank the true tail against every
    concept, and the true head against every entity, removing candidates
    that would form a different known-true triple.
    """
    if len(eval_triples) == 0:
        raise KgeError("no evaluation triples")
    ne = graph.entity_count
    nodes, rels = model.node_embeddings, model.relation_embeddings
    entity_rows = nodes[:ne]
    concept_rows = nodes[ne:]
    ranks = []
    for h, r, t in eval_triples:
        h, r, t = int(h), int(r), int(t)
        query = nodes[h] + rels[r]
        dist = np.linalg.norm(query[None, :] - concept_rows, axis=1)
        mask = np.array([(h, r, ne + j) in known and ne + j != t for j in range(len(concept_rows))])
        dist[mask] = np.inf
        ranks.append(1 + int(np.sum(dist < dist[t - ne])))

        query = nodes[t] - rels[r]
        dist = np.linalg.norm(query[None, :] - entity_rows, axis=1)
        mask_h = np.array([(i, r, t) in known and i != h for i in range(ne)])
        dist[mask_h] = np.inf
        ranks.append(1 + int(np.sum(dist < dist[h])))
    return float(np.mean(1.0 / np.asarray(ranks)))


def random_mrr_baseline(candidate_counts) -> float:
    """Expected MRR of uniform random ranking: mean over queries of H(n)/n."""
    vals = []
    for n in candidate_counts:
        if n < 1:
            raise KgeError("candidate count must be positive")
        vals.append(np.sum(1.0 / np.arange(1, n + 1)) / n)
    return float(np.mean(vals))


def filtered_candidate_counts(
    eval_triples: np.ndarray, known: set[tuple[int, int, int]], graph: HeteroGraph
) -> list[int]:
    """Candidate-pool sizes matching evaluate_filtered_mrr's two queries."""
    ne, nc_ = graph.entity_count, graph.concept_count
    counts = []
    for h, r, t in eval_triples:
        h, r, t = int(h), int(r), int(t)
        tail_filtered = sum(1 for j in range(nc_) if (h, r, ne + j) in known and ne + j != t)
        counts.append(nc_ - tail_filtered)
        head_filtered = sum(1 for i in range(ne) if (i, r, t) in known and i != h)
        counts.append(ne - head_filtered)
    return counts


def _keyed_random_rows(seed: int, keys: list[str], d: float) -> np.ndarray:
    """One normal row per key, a function of (seed, key) only.

    Keying by node identity rather than matrix position keeps a node's row
    identical between a training subgraph and the full graph.
    """
    rows = np.empty((len(keys), d))
    for i, key in enumerate(keys):
        digest = hashlib.sha256(f"{seed}:{key}".encode()).digest()
        child = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        rows[i] = child.normal(0.0, 1.0 / np.sqrt(d), size=d)
    return rows


def features_from_kge(
    model: KgeModel | None,
    graph: HeteroGraph,
    entity_init: str,
    seed: int,
    dim: int | None = None,
) -> np.ndarray:
    """Assemble the GNN input feature matrix for every node.

    Concept rows come from pretraining whenever a model is given.  Entity
    rows are either the pretrained entity rows ("kge") or per-node random
    rows keyed by external id ("random"); random is the only option for
    entities that were never pretrained, e.g. nodes added after training.
    """
    if entity_init not in ("kge", "random"):
        raise KgeError(f"unknown entity_init {entity_init!r}")
    if model is None and entity_init == "kge":
        raise KgeError("entity_init='kge' requires a pretrained model")
    d = model.dim if model is not None else dim
    if d is None:
        raise KgeError("feature dim required when no pretrained model is given")
    feats = np.zeros((graph.node_count, d))
    ne = graph.entity_count
    ids = graph.external_ids if graph.external_ids else [str(i) for i in range(graph.node_count)]
    if entity_init == "kge":
        if model.node_embeddings.shape[0] != graph.node_count:
            raise KgeError("pretrained model does not cover this graph's nodes")
        feats[:ne] = model.node_embeddings[:ne]
    else:
        feats[:ne] = _keyed_random_rows(seed, ids[:ne], d)
    if model is not None:
        if model.node_embeddings.shape[0] < graph.concept_count:
            raise KgeError("pretrained model has fewer rows than this graph has concepts")
        feats[ne:] = model.node_embeddings[model.node_embeddings.shape[0] - graph.concept_count :]
    else:
        feats[ne:] = _keyed_random_rows(seed + 1, ids[ne:], d)
    return feats
