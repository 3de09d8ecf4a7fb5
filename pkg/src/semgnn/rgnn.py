"""Relation-aware attention GNN over the heterogeneous graph.

Each layer passes messages along every in-edge.  A message is a linear map
of the sender's state concatenated with the edge's relation embedding:

    msg = W_v . concat(h_src, r)

Attention over a node's in-neighbors is scaled dot-product between the
transformed message (key) and the transformed receiver state (query),
multiplied by a learnable per-relation scalar beta_r before the softmax, so
the model can discount or amplify whole relation types.  The update is
residual:

    h_tgt' = h_tgt + act(sum over in-edges of attention * msg)

Nodes with no in-edges keep their state unchanged through every layer.
Semantic edges send messages both ways, co-engagement links are symmetric,
and both orientations of a relation share its embedding and beta.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .kgraph import HeteroGraph

ACTIVATIONS = ("leaky_relu", "relu", "zero")

FORMAT_TAG = "rgnn-v1"


class ModelFormatError(ValueError):
    pass


@dataclass
class RGnnConfig:
    layer_count: int = 2
    dim: int = 64
    feature_dim: int | None = None  # defaults to dim
    activation: str = "leaky_relu"
    seed: int = 0

    def validate(self) -> None:
        if self.layer_count < 0:
            raise ModelFormatError("layer_count must be non-negative")
        if self.dim < 1:
            raise ModelFormatError("dim must be positive")
        if self.activation not in ACTIVATIONS:
            raise ModelFormatError(f"activation must be one of {ACTIVATIONS}")


@dataclass
class LayerWeights:
    w_v: np.ndarray  # (2d, d), right-multiplies concat(h_src, r)
    w_k: np.ndarray  # (d, d)
    w_q: np.ndarray  # (d, d)


@dataclass
class RGnnModel:
    w_in: np.ndarray  # (feature_dim, d)
    layers: list[LayerWeights]
    rel_embeddings: np.ndarray  # (relation count incl. EEL, d)
    beta: np.ndarray  # (relation count, 1)
    relation_names: list[str]
    activation: str = "leaky_relu"

    @property
    def dim(self) -> int:
        return self.w_in.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.w_in.shape[0]

    def param_dict(self) -> dict[str, np.ndarray]:
        """Named live parameter arrays; the optimizer/gradient contract."""
        params = {"w_in": self.w_in}
        for i, layer in enumerate(self.layers):
            params[f"layer{i}.w_v"] = layer.w_v
            params[f"layer{i}.w_k"] = layer.w_k
            params[f"layer{i}.w_q"] = layer.w_q
        params["rel_embeddings"] = self.rel_embeddings
        params["beta"] = self.beta
        return params


def _glorot(rng, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def init_model(relation_names: list[str], cfg: RGnnConfig) -> RGnnModel:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    d = cfg.dim
    feat = cfg.feature_dim if cfg.feature_dim is not None else d
    w_in = _glorot(rng, feat, d)
    layers = [
        LayerWeights(_glorot(rng, 2 * d, d), _glorot(rng, d, d), _glorot(rng, d, d))
        for _ in range(cfg.layer_count)
    ]
    rel = rng.normal(0.0, 1.0 / np.sqrt(d), size=(len(relation_names), d))
    beta = np.ones((len(relation_names), 1))
    return RGnnModel(w_in, layers, rel, beta, list(relation_names), cfg.activation)


@dataclass
class EdgeIndex:
    """Directed message edges sorted by (target, relation, source).

    The sort is the accumulation order inside segment reductions, so two
    graphs with identical in-neighborhoods for a node produce bitwise
    identical aggregates for that node.
    """

    src: np.ndarray
    tgt: np.ndarray
    rel: np.ndarray
    seg_ids: np.ndarray  # dense segment index per edge
    target_nodes: np.ndarray  # unique targets, ascending
    node_count: int

    @property
    def edge_count(self) -> int:
        return int(self.src.size)


def build_edge_index(graph: HeteroGraph) -> EdgeIndex:
    eel_rel = graph.eel_relation.id
    srcs, tgts, rels = [], [], []
    sem = graph.semantic_edges
    if len(sem):
        srcs += [sem[:, 0], sem[:, 2]]
        tgts += [sem[:, 2], sem[:, 0]]
        rels += [sem[:, 1], sem[:, 1]]
    eel = graph.eel_edges
    if len(eel):
        srcs += [eel[:, 0], eel[:, 1]]
        tgts += [eel[:, 1], eel[:, 0]]
        ones = np.full(len(eel), eel_rel, dtype=np.int64)
        rels += [ones, ones]
    deel = graph.directed_eels
    if len(deel):
        srcs.append(deel[:, 0])
        tgts.append(deel[:, 1])
        rels.append(np.full(len(deel), eel_rel, dtype=np.int64))
    if not srcs:
        empty = np.zeros(0, dtype=np.int64)
        return EdgeIndex(empty, empty, empty.copy(), empty.copy(), empty.copy(), graph.node_count)
    src = np.concatenate(srcs)
    tgt = np.concatenate(tgts)
    rel = np.concatenate(rels)
    order = np.lexsort((src, rel, tgt))
    src, tgt, rel = src[order], tgt[order], rel[order]
    boundary = np.empty(tgt.size, dtype=bool)
    boundary[0] = True
    boundary[1:] = tgt[1:] != tgt[:-1]
    seg_ids = np.cumsum(boundary) - 1
    return EdgeIndex(src, tgt, rel, seg_ids, tgt[boundary], graph.node_count)


@dataclass
class TapeParams:
    """Tape variables for the model parameters, keyed like param_dict()."""

    variables: dict[str, nc.Var] = field(default_factory=dict)

    def grads(self) -> dict[str, np.ndarray]:
        return {name: nc.grad_of(v) for name, v in self.variables.items()}


def _apply_activation(tape: nc.Tape, x: nc.Var, name: str) -> nc.Var:
    if name == "leaky_relu":
        return tape.leaky_relu(x)
    if name == "relu":
        return tape.relu(x)
    if name == "zero":
        return tape.scale(x, 0.0)
    raise ModelFormatError(f"unknown activation {name!r}")


def encode_on_tape(
    tape: nc.Tape, index: EdgeIndex, features: np.ndarray, model: RGnnModel
) -> tuple[nc.Var, TapeParams]:
    """Differentiable encode; returns final states and the parameter vars."""
    if features.shape[0] != index.node_count:
        raise nc.ShapeError(
            f"feature rows {features.shape[0]} != node count {index.node_count}"
        )
    if features.shape[1] != model.feature_dim:
        raise nc.ShapeError(
            f"feature dim {features.shape[1]} != input projection {model.feature_dim}"
        )
    params = TapeParams()
    w_in = tape.input(model.w_in)
    params.variables["w_in"] = w_in
    layer_vars = []
    for i, layer in enumerate(model.layers):
        trio = (tape.input(layer.w_v), tape.input(layer.w_k), tape.input(layer.w_q))
        params.variables[f"layer{i}.w_v"] = trio[0]
        params.variables[f"layer{i}.w_k"] = trio[1]
        params.variables[f"layer{i}.w_q"] = trio[2]
        layer_vars.append(trio)
    rel_var = tape.input(model.rel_embeddings)
    beta_var = tape.input(model.beta)
    params.variables["rel_embeddings"] = rel_var
    params.variables["beta"] = beta_var

    d = model.dim
    h = tape.matmul(tape.input(features), w_in)
    if index.edge_count == 0:
        return h, params
    for w_v, w_k, w_q in layer_vars:
        h_src = tape.row_gather(h, index.src)
        r_rows = tape.row_gather(rel_var, index.rel)
        msg = tape.matmul(tape.concat_cols(h_src, r_rows), w_v)
        keys = tape.matmul(msg, w_k)
        queries = tape.matmul(tape.row_gather(h, index.tgt), w_q)
        raw = tape.sum_rows(tape.mul(keys, queries))
        scored = tape.mul(tape.scale(raw, 1.0 / np.sqrt(d)), tape.row_gather(beta_var, index.rel))
        weights = tape.segment_softmax(scored, index.seg_ids)
        agg = tape.segment_weighted_sum(msg, weights, index.seg_ids, index.target_nodes.size)
        spread = tape.row_scatter(agg, index.target_nodes, index.node_count)
        h = tape.add(h, _apply_activation(tape, spread, model.activation))
    return h, params


def encode(graph: HeteroGraph, features: np.ndarray, model: RGnnModel) -> np.ndarray:
    """Forward-only encode of every node; pure function of its arguments."""
    index = build_edge_index(graph)
    tape = nc.Tape()
    h, _ = encode_on_tape(tape, index, features, model)
    return h.value


def attention_weights(
    graph: HeteroGraph, features: np.ndarray, model: RGnnModel, layer: int = 0
) -> tuple[EdgeIndex, np.ndarray]:
    """Per-edge attention weights at the given layer, for inspection/tests."""
    if not 0 <= layer < len(model.layers):
        raise ModelFormatError(f"layer {layer} out of range")
    index = build_edge_index(graph)
    if index.edge_count == 0:
        return index, np.zeros((0, 1))
    tape = nc.Tape()
    h, _ = encode_on_tape(tape, index, features, _truncated(model, layer))
    lw = model.layers[layer]
    d = model.dim
    h_src = h.value[index.src]
    msg = np.concatenate([h_src, model.rel_embeddings[index.rel]], axis=1) @ lw.w_v
    raw = np.sum((msg @ lw.w_k) * (h.value[index.tgt] @ lw.w_q), axis=1, keepdims=True)
    scored = raw / np.sqrt(d) * model.beta[index.rel]
    tape2 = nc.Tape()
    weights = tape2.segment_softmax(tape2.input(scored), index.seg_ids)
    return index, weights.value


def _truncated(model: RGnnModel, layer_count: int) -> RGnnModel:
    return RGnnModel(
        model.w_in,
        model.layers[:layer_count],
        model.rel_embeddings,
        model.beta,
        model.relation_names,
        model.activation,
    )


def _packed_arrays(model: RGnnModel) -> list[tuple[str, np.ndarray]]:
    named = [("w_in", model.w_in)]
    for i, layer in enumerate(model.layers):
        named += [(f"layer{i}.w_v", layer.w_v), (f"layer{i}.w_k", layer.w_k), (f"layer{i}.w_q", layer.w_q)]
    named += [("rel_embeddings", model.rel_embeddings), ("beta", model.beta)]
    return named


def model_hash(model: RGnnModel) -> str:
    h = hashlib.sha256()
    for name, arr in _packed_arrays(model):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    h.update(model.activation.encode())
    h.update("|".join(model.relation_names).encode())
    return h.hexdigest()


def save_model(model: RGnnModel, bin_path, meta_path) -> None:
    named = _packed_arrays(model)
    with open(bin_path, "wb") as fh:
        for _, arr in named:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    meta = {
        "format": FORMAT_TAG,
        "layer_count": len(model.layers),
        "dim": model.dim,
        "feature_dim": model.feature_dim,
        "activation": model.activation,
        "relation_names": model.relation_names,
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in named],
        "model_hash": model_hash(model),
    }
    Path(meta_path).write_text(json.dumps(meta, indent=2), encoding="utf-8")


def load_model(bin_path, meta_path) -> RGnnModel:
    meta = json.loads(Path(meta_path).read_text(encoding="utf-8"))
    if meta.get("format") != FORMAT_TAG:
        raise ModelFormatError(f"unsupported model format {meta.get('format')!r}")
    raw = Path(bin_path).read_bytes()
    arrays = {}
    offset = 0
    for spec in meta["arrays"]:
        count = int(np.prod(spec["shape"]))
        try:
            chunk = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        except ValueError as exc:
            raise ModelFormatError(f"model file shorter than its metadata claims: {exc}")
        arrays[spec["name"]] = chunk.reshape(spec["shape"]).copy()
        offset += count * 8
    if offset != len(raw):
        raise ModelFormatError("model file length does not match its metadata")
    layers = [
        LayerWeights(arrays[f"layer{i}.w_v"], arrays[f"layer{i}.w_k"], arrays[f"layer{i}.w_q"])
        for i in range(meta["layer_count"])
    ]
    model = RGnnModel(
        arrays["w_in"],
        layers,
        arrays["rel_embeddings"],
        arrays["beta"],
        list(meta["relation_names"]),
        meta["activation"],
    )
    stored = meta.get("model_hash")
    if stored is not None and stored != model_hash(model):
        raise ModelFormatError("model file content does not match its recorded hash")
    return model
