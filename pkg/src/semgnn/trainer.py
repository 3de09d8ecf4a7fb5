"""Link-prediction training over co-engagement links, subgraph by subgraph.

The loss is mean binary cross-entropy on pair scores p = sigmoid(h_i . h_j):
observed links are positives, uniformly sampled non-adjacent pairs (first
endpoint kept, second resampled) are negatives.

Training proceeds in synchronous rounds.  Each round takes one minibatch
from every subgraph that still has batches left this epoch, computes each
subgraph's gradient against the same frozen parameter snapshot, averages
them in schedule order, and applies a single optimizer update.  The
parallel_workers setting is purely a concurrency width: results are bitwise
identical for any worker count, and a one-partition plan reduces to plain
full-graph minibatch training.  Links that span partitions are excluded
from supervision but counted in the log.

The final artifact is always produced by one frozen-weight encode of the
full graph.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from . import rgnn
from .hasp import HaspPlan, build_plan, materialize_subgraph
from .kgraph import HeteroGraph, graph_hash

_log = logging.getLogger("semgnn.trainer")

MAGIC = b"SGNN"
FORMAT_VERSION = 1


class TrainError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 1e-3
    optimizer: str = "adam"
    negatives_per_positive: int = 1
    seed: int = 0
    partition_count: int = 4
    parallel_workers: int = 1
    batch_size: int = 1024

    def validate(self) -> None:
        if self.negatives_per_positive < 1:
            raise TrainError("negatives_per_positive must be at least 1")
        if self.partition_count < 1:
            raise TrainError("partition_count must be at least 1")
        if self.parallel_workers < 1:
            raise TrainError("parallel_workers must be at least 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise TrainError("epochs and batch_size must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise TrainError(f"unknown optimizer {self.optimizer!r}")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()


@dataclass
class EmbeddingArtifact:
    embeddings: np.ndarray  # one row per entity of the inference graph
    external_ids: list[str]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.embeddings.shape[0] != len(self.external_ids):
            raise TrainError("artifact rows must match the external id list")
        if not np.all(np.isfinite(self.embeddings)):
            raise TrainError("artifact contains non-finite values")


def link_prediction_loss(tape: nc.Tape, h: nc.Var, positives: np.ndarray, negatives: np.ndarray) -> nc.Var:
    """Mean BCE over positive and negative pairs; logs clamped at 1e-12.

    log(1 - sigmoid(x)) is evaluated as log(sigmoid(-x)), which is the same
    function without the cancellation.
    """
    if len(positives) == 0:
        raise TrainError("no positive pairs")
    pos_logits = tape.sum_rows(
        tape.mul(tape.row_gather(h, positives[:, 0]), tape.row_gather(h, positives[:, 1]))
    )
    terms = [tape.reduce_sum(tape.log_clamped(tape.sigmoid(pos_logits)))]
    count = len(positives)
    if len(negatives):
        neg_logits = tape.sum_rows(
            tape.mul(tape.row_gather(h, negatives[:, 0]), tape.row_gather(h, negatives[:, 1]))
        )
        terms.append(tape.reduce_sum(tape.log_clamped(tape.sigmoid(tape.scale(neg_logits, -1.0)))))
        count += len(negatives)
    total = terms[0] if len(terms) == 1 else tape.add(terms[0], terms[1])
    return tape.scale(total, -1.0 / count)


def eel_pair_set(graph: HeteroGraph) -> set[tuple[int, int]]:
    return {(int(u), int(v)) for u, v in graph.eel_edges}


def sample_negatives(
    graph: HeteroGraph,
    positives: np.ndarray,
    k: int,
    rng: np.random.Generator,
    eel_set: set[tuple[int, int]] | None = None,
    max_rounds: int = 200,
) -> np.ndarray:
    """For each positive (i, j), draw k pairs (i, j') with no link i-j'.

    Uniform over admissible j' via rejection; a near-complete link graph
    exhausts the retry budget and raises.
    """
    if len(positives) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    if eel_set is None:
        eel_set = eel_pair_set(graph)
    ne = graph.entity_count
    anchors = np.repeat(positives[:, 0], k)
    out = np.empty((anchors.size, 2), dtype=np.int64)
    out[:, 0] = anchors
    pending = np.arange(anchors.size)
    for _ in range(max_rounds):
        if pending.size == 0:
            return out
        cand = rng.integers(0, ne, size=pending.size)
        a = anchors[pending]
        ok = cand != a
        lo = np.minimum(a, cand)
        hi = np.maximum(a, cand)
        for idx in np.flatnonzero(ok):
            if (int(lo[idx]), int(hi[idx])) in eel_set:
                ok[idx] = False
        out[pending[ok], 1] = cand[ok]
        pending = pending[~ok]
    raise TrainError("negative sampling exhausted retries; link graph is near-complete")


@dataclass
class _Subgraph:
    graph: HeteroGraph
    local_to_full: np.ndarray
    index: rgnn.EdgeIndex
    features: np.ndarray
    positives: np.ndarray  # local EEL pairs
    eel_set: set[tuple[int, int]]


@dataclass
class TrainResult:
    model: rgnn.RGnnModel
    artifact: EmbeddingArtifact
    log_records: list[dict]


def _round_gradient(sub: _Subgraph, model: rgnn.RGnnModel, batch: np.ndarray, negatives: np.ndarray):
    tape = nc.Tape()
    h, params = rgnn.encode_on_tape(tape, sub.index, sub.features, model)
    loss = link_prediction_loss(tape, h, batch, negatives)
    tape.backward(loss)
    return params.grads(), float(loss.value)


def train(
    graph: HeteroGraph,
    features: np.ndarray,
    model: rgnn.RGnnModel,
    cfg: TrainConfig,
    plan: HaspPlan | None = None,
) -> TrainResult:
    cfg.validate()
    if plan is None:
        plan = build_plan(graph, cfg.partition_count, seed=cfg.seed)
    n_parts = plan.partition_count

    subgraphs: list[_Subgraph] = []
    for k in range(n_parts):
        sub, l2f = materialize_subgraph(graph, plan, k)
        if len(sub.eel_edges) == 0:
            _log.warning("subgraph %d has no links; skipped from supervision", k)
        subgraphs.append(
            _Subgraph(sub, l2f, rgnn.build_edge_index(sub), features[l2f], sub.eel_edges, eel_pair_set(sub))
        )

    params = model.param_dict()
    state = nc.AdamState() if cfg.optimizer == "adam" else None
    records: list[dict] = []
    cut_count = int(len(plan.cut_eels))

    for epoch in range(cfg.epochs):
        started = time.monotonic()
        schedule_rng = np.random.default_rng([cfg.seed, epoch])
        order = schedule_rng.permutation(n_parts)
        epoch_rngs = {k: np.random.default_rng([cfg.seed, epoch, int(k)]) for k in order}
        batches: dict[int, list[np.ndarray]] = {}
        for k in order:
            sub = subgraphs[k]
            if len(sub.positives) == 0:
                batches[k] = []
                continue
            perm = epoch_rngs[k].permutation(len(sub.positives))
            batches[k] = [
                sub.positives[perm[s : s + cfg.batch_size]]
                for s in range(0, len(perm), cfg.batch_size)
            ]
        rounds = max((len(b) for b in batches.values()), default=0)
        losses = []
        for r in range(rounds):
            jobs = []
            for k in order:
                if r >= len(batches[k]):
                    continue
                sub = subgraphs[k]
                batch = batches[k][r]
                negatives = sample_negatives(
                    sub.graph, batch, cfg.negatives_per_positive, epoch_rngs[k], sub.eel_set
                )
                jobs.append((sub, batch, negatives))
            if not jobs:
                continue
            if cfg.parallel_workers == 1 or len(jobs) == 1:
                results = [_round_gradient(s, model, b, n) for s, b, n in jobs]
            else:
                with ThreadPoolExecutor(max_workers=cfg.parallel_workers) as pool:
                    results = list(pool.map(lambda j: _round_gradient(j[0], model, j[1], j[2]), jobs))
            grads = {name: g.copy() for name, g in results[0][0].items()}
            for other, _ in results[1:]:
                for name in grads:
                    grads[name] += other[name]
            for name in grads:
                grads[name] /= len(results)
            if cfg.optimizer == "adam":
                nc.adam_step(params, state, grads, cfg.lr)
            else:
                nc.sgd_step(params, grads, cfg.lr)
            losses.append(float(np.mean([loss for _, loss in results])))
        record = {
            "epoch": epoch,
            "loss": float(np.mean(losses)) if losses else None,
            "cut_eel_count": cut_count,
            "seconds": round(time.monotonic() - started, 3),
        }
        records.append(record)
        _log.info("epoch %d loss %s", epoch, record["loss"])

    embeddings = rgnn.encode(graph, features, model)[: graph.entity_count]
    ids = graph.external_ids or [str(i) for i in range(graph.entity_count)]
    artifact = EmbeddingArtifact(
        embeddings,
        list(ids[: graph.entity_count]),
        meta={
            "graph_hash": graph_hash(graph),
            "model_hash": rgnn.model_hash(model),
            "config_hash": cfg.digest(),
        },
    )
    return TrainResult(model, artifact, records)


def write_matrix(path, matrix: np.ndarray) -> None:
    """Row-major float64 little-endian with a fixed self-describing header."""
    matrix = np.ascontiguousarray(matrix, dtype="<f8")
    if matrix.ndim != 2:
        raise TrainError("only matrices are written to embedding files")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQI", FORMAT_VERSION, matrix.shape[0], matrix.shape[1]))
        fh.write(matrix.tobytes())


def read_matrix(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise TrainError(f"{path}: not an embedding file (bad magic)")
    version, rows, cols = struct.unpack("<IQI", raw[4:20])
    if version != FORMAT_VERSION:
        raise TrainError(f"{path}: unsupported version {version}")
    expected = 20 + rows * cols * 8
    if len(raw) != expected:
        raise TrainError(f"{path}: expected {expected} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f8", offset=20).reshape(rows, cols).copy()


def write_artifact(artifact: EmbeddingArtifact, bin_path, meta_path) -> None:
    write_matrix(bin_path, artifact.embeddings)
    meta = dict(artifact.meta)
    meta["external_ids"] = artifact.external_ids
    Path(meta_path).write_text(json.dumps(meta), encoding="utf-8")


def read_artifact(bin_path, meta_path) -> EmbeddingArtifact:
    matrix = read_matrix(bin_path)
    meta = json.loads(Path(meta_path).read_text(encoding="utf-8"))
    ids = meta.pop("external_ids")
    return EmbeddingArtifact(matrix, ids, meta)


def write_train_log(records: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record) + "\n")
