"""Link-prediction loss, negative sampling, and the synchronous round loop."""

import json

import numpy as np
import pytest
from scipy import stats

import oracles
from semgnn import numcore as nc
from semgnn import rgnn, syngen, trainer
from semgnn.hasp import build_plan, materialize_subgraph
from semgnn.kgraph import HeteroGraph, RelationType
from semgnn.trainer import EmbeddingArtifact, TrainConfig, TrainError


def eel_graph(ne, eels, sem=()):
    rels = [RelationType(0, "has_genre", "semantic"), RelationType(1, "EEL", "eel")]
    return HeteroGraph(
        entity_count=ne,
        concept_count=1,
        relations=rels,
        semantic_edges=np.array(sem, dtype=np.int64).reshape(-1, 3),
        eel_edges=np.array(
            sorted({(min(u, v), max(u, v)) for u, v in eels}), dtype=np.int64
        ).reshape(-1, 2),
    )


def loss_value(h, positives, negatives):
    tape = nc.Tape()
    hv = tape.input(h)
    return float(trainer.link_prediction_loss(tape, hv, positives, negatives).value)


@pytest.fixture(scope="module")
def small_run():
    cfg = syngen.SynGenConfig(
        entity_count=200,
        planted_community_count=6,
        eel_within_community_prob=0.25,
        zero_eel_entity_fraction=0.3,
        seed=1,
    )
    graph, _ = syngen.generate(cfg)
    features = __import__("semgnn.kge", fromlist=["features_from_kge"]).features_from_kge(
        None, graph, "random", seed=7, dim=16
    )
    return graph, features


def fresh_model(graph, dim=16, layers=2, seed=3):
    cfg = rgnn.RGnnConfig(layer_count=layers, dim=dim, feature_dim=dim, seed=seed)
    return rgnn.init_model([r.name for r in graph.relations], cfg)


# ---------------------------------------------------------------- loss


def test_zero_logits_give_ln_two():
    h = np.zeros((4, 3))
    pos = np.array([[0, 1]])
    neg = np.array([[2, 3]])
    assert loss_value(h, pos, neg) == pytest.approx(np.log(2.0), abs=1e-12)


def test_saturated_logits_drive_loss_to_zero():
    # strongly aligned positive, strongly opposed negative
    h = np.zeros((4, 2))
    h[0] = h[1] = [8.0, 8.0]
    h[2] = [8.0, 8.0]
    h[3] = [-8.0, -8.0]
    val = loss_value(h, np.array([[0, 1]]), np.array([[2, 3]]))
    assert 0.0 <= val < 1e-10


def test_loss_matches_scalar_oracle():
    rng = np.random.default_rng(11)
    for _ in range(20):
        n = int(rng.integers(4, 12))
        h = rng.normal(size=(n, 5))
        pos = rng.integers(0, n, size=(int(rng.integers(1, 6)), 2))
        neg = rng.integers(0, n, size=(int(rng.integers(0, 6)), 2))
        want = oracles.bce_link_loss(h, pos, neg)
        assert loss_value(h, pos, neg) == pytest.approx(want, rel=1e-12)


def test_loss_requires_positives():
    with pytest.raises(TrainError, match="positive"):
        loss_value(np.zeros((2, 2)), np.zeros((0, 2), dtype=np.int64), np.array([[0, 1]]))


def test_clamp_keeps_loss_finite_at_extreme_logits():
    h = np.zeros((2, 1))
    h[0] = [1e4]
    h[1] = [-1e4]
    val = loss_value(h, np.array([[0, 1]]), np.zeros((0, 2), dtype=np.int64))
    assert np.isfinite(val)
    assert val <= -np.log(1e-12) + 1e-9


# ---------------------------------------------------------------- negatives


def test_complete_link_graph_has_no_negatives():
    g = eel_graph(3, [(0, 1), (0, 2), (1, 2)])
    with pytest.raises(TrainError, match="retries"):
        trainer.sample_negatives(g, g.eel_edges, 1, np.random.default_rng(0))


def test_negatives_keep_anchor_and_avoid_links():
    rng = np.random.default_rng(5)
    g = eel_graph(30, [(i, i + 1) for i in range(0, 28, 2)])
    eel_set = trainer.eel_pair_set(g)
    pos = np.tile(g.eel_edges, (700, 1))  # ~10k draws
    out = trainer.sample_negatives(g, pos, 1, rng)
    assert np.array_equal(out[:, 0], pos[:, 0])
    for i, j in out:
        assert i != j
        assert (min(int(i), int(j)), max(int(i), int(j))) not in eel_set


def test_negative_endpoint_uniform_over_non_neighbors():
    # one anchor, 50k draws, chi-squared test against the uniform pmf
    g = eel_graph(20, [(0, 1), (0, 2), (0, 3), (4, 5)])
    pos = np.tile([[0, 1]], (50_000, 1))
    out = trainer.sample_negatives(g, pos, 1, np.random.default_rng(9))
    admissible = [j for j in range(20) if j not in (0, 1, 2, 3)]
    counts = np.bincount(out[:, 1], minlength=20)
    assert counts[[0, 1, 2, 3]].sum() == 0
    p = stats.chisquare(counts[admissible]).pvalue
    assert p > 0.01


def test_multiple_negatives_per_positive():
    g = eel_graph(12, [(0, 1), (2, 3)])
    out = trainer.sample_negatives(g, g.eel_edges, 3, np.random.default_rng(2))
    assert out.shape == (6, 2)
    assert list(out[:, 0]) == [0, 0, 0, 2, 2, 2]


# ---------------------------------------------------------------- config


def test_config_validation():
    for bad in (
        {"negatives_per_positive": 0},
        {"partition_count": 0},
        {"parallel_workers": 0},
        {"epochs": 0},
        {"batch_size": 0},
        {"optimizer": "rmsprop"},
    ):
        with pytest.raises(TrainError):
            TrainConfig(**bad).validate()


def test_config_digest_tracks_fields():
    a = TrainConfig(seed=1)
    b = TrainConfig(seed=1)
    c = TrainConfig(seed=2)
    assert a.digest() == b.digest()
    assert a.digest() != c.digest()


# ---------------------------------------------------------------- training loop


def test_gradient_averaging_equals_concatenated_batch(small_run):
    # two half batches against the same frozen snapshot, equal sizes
    graph, features = small_run
    model = fresh_model(graph)
    plan = build_plan(graph, 1, seed=0)
    sub, l2f = materialize_subgraph(graph, plan, 0)
    index = rgnn.build_edge_index(sub)
    feats = features[l2f]
    eel_set = trainer.eel_pair_set(sub)
    rng = np.random.default_rng(4)
    pos = sub.eel_edges[rng.permutation(len(sub.eel_edges))[:40]]
    neg = trainer.sample_negatives(sub, pos, 1, rng, eel_set)

    def grads_of(p, n):
        tape = nc.Tape()
        h, params = rgnn.encode_on_tape(tape, index, feats, model)
        tape.backward(trainer.link_prediction_loss(tape, h, p, n))
        return params.grads()

    g1 = grads_of(pos[:20], neg[:20])
    g2 = grads_of(pos[20:], neg[20:])
    whole = grads_of(pos, neg)
    for name in whole:
        avg = (g1[name] + g2[name]) / 2.0
        denom = max(1.0, float(np.abs(whole[name]).max()))
        assert np.abs(avg - whole[name]).max() / denom < 1e-10


def test_single_partition_matches_handrolled_loop(small_run):
    graph, features = small_run
    cfg = TrainConfig(epochs=3, lr=1e-3, seed=5, partition_count=1, batch_size=64)
    result = trainer.train(graph, features, fresh_model(graph), cfg)

    # replica of the documented schedule: one part, per-epoch generator keyed
    # by [seed, epoch, part], permutation first, then negatives per round
    model = fresh_model(graph)
    plan = build_plan(graph, 1, seed=cfg.seed)
    sub, l2f = materialize_subgraph(graph, plan, 0)
    index = rgnn.build_edge_index(sub)
    feats = features[l2f]
    eel_set = trainer.eel_pair_set(sub)
    params = model.param_dict()
    state = nc.AdamState()
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, epoch, 0])
        perm = rng.permutation(len(sub.eel_edges))
        for s in range(0, len(perm), cfg.batch_size):
            batch = sub.eel_edges[perm[s : s + cfg.batch_size]]
            negatives = trainer.sample_negatives(sub, batch, 1, rng, eel_set)
            tape = nc.Tape()
            h, tracked = rgnn.encode_on_tape(tape, index, feats, model)
            tape.backward(trainer.link_prediction_loss(tape, h, batch, negatives))
            nc.adam_step(params, state, tracked.grads(), cfg.lr)
    manual = rgnn.encode(graph, features, model)[: graph.entity_count]
    assert np.array_equal(result.artifact.embeddings, manual)


def test_worker_count_does_not_change_results(small_run):
    graph, features = small_run
    runs = []
    for workers in (1, 4):
        cfg = TrainConfig(epochs=2, seed=8, partition_count=4, parallel_workers=workers, batch_size=32)
        runs.append(trainer.train(graph, features, fresh_model(graph), cfg))
    a, b = runs
    assert np.array_equal(a.artifact.embeddings, b.artifact.embeddings)
    assert rgnn.model_hash(a.model) == rgnn.model_hash(b.model)
    assert len(a.log_records) == len(b.log_records) == 2


def test_training_is_deterministic(small_run):
    graph, features = small_run
    cfg = TrainConfig(epochs=2, seed=3, partition_count=2, batch_size=64)
    a = trainer.train(graph, features, fresh_model(graph), cfg)
    b = trainer.train(graph, features, fresh_model(graph), cfg)
    assert np.array_equal(a.artifact.embeddings, b.artifact.embeddings)
    assert a.artifact.meta == b.artifact.meta
    assert [r["loss"] for r in a.log_records] == [r["loss"] for r in b.log_records]


def test_loss_drops_below_initial(small_run):
    graph, features = small_run
    model = fresh_model(graph)

    h0 = rgnn.encode(graph, features, model)
    rng = np.random.default_rng(0)
    neg = trainer.sample_negatives(graph, graph.eel_edges, 1, rng)
    tape = nc.Tape()
    initial = float(
        trainer.link_prediction_loss(tape, tape.input(h0), graph.eel_edges, neg).value
    )

    cfg = TrainConfig(epochs=2, lr=1e-2, seed=0, partition_count=1, batch_size=128)
    result = trainer.train(graph, features, model, cfg)
    assert result.log_records[1]["loss"] < initial


def test_cut_links_counted_but_not_supervised():
    # two rings joined by one bridge; rings stay sparse so in-part negatives exist
    left = [(i, (i + 1) % 5) for i in range(5)]
    right = [(5 + i, 5 + (i + 1) % 5) for i in range(5)]
    g = eel_graph(10, left + right + [(4, 5)], sem=[(i, 0, 10) for i in range(10)])
    plan = build_plan(g, 2, seed=0)
    assert len(plan.cut_eels) == 1

    supervised = 0
    for k in range(2):
        sub, _ = materialize_subgraph(g, plan, k)
        supervised += len(sub.eel_edges)
    assert supervised == len(g.eel_edges) - 1

    features = np.eye(11, 4)[: g.node_count]
    cfg = TrainConfig(epochs=1, seed=0, partition_count=2, batch_size=8)
    result = trainer.train(g, features, fresh_model(g, dim=4, layers=1), cfg, plan=plan)
    assert all(r["cut_eel_count"] == 1 for r in result.log_records)


def test_linkless_subgraph_is_skipped_with_warning(caplog):
    from semgnn.hasp import HaspPlan

    g = eel_graph(6, [(0, 1), (0, 2)], sem=[(i, 0, 6) for i in range(6)])
    plan = HaspPlan(
        2,
        np.array([0, 0, 0, 0, 1, 1], dtype=np.int64),
        np.zeros((0, 2), dtype=np.int64),
        {},
    )
    features = np.eye(7, 4)
    cfg = TrainConfig(epochs=1, seed=0, partition_count=2, batch_size=4)
    with caplog.at_level("WARNING", logger="semgnn.trainer"):
        result = trainer.train(g, features, fresh_model(g, dim=4, layers=1), cfg, plan=plan)
    assert any("no links" in r.message for r in caplog.records)
    assert result.log_records[0]["loss"] is not None


def test_log_records_have_the_documented_fields(small_run, tmp_path):
    graph, features = small_run
    cfg = TrainConfig(epochs=2, seed=1, partition_count=2, batch_size=64)
    result = trainer.train(graph, features, fresh_model(graph), cfg)
    path = tmp_path / "log.jsonl"
    trainer.write_train_log(result.log_records, path)
    lines = path.read_text().splitlines()
    assert len(lines) == 2
    for i, line in enumerate(lines):
        record = json.loads(line)
        assert set(record) == {"epoch", "loss", "cut_eel_count", "seconds"}
        assert record["epoch"] == i
        assert record["loss"] > 0
        assert record["seconds"] >= 0


# ---------------------------------------------------------------- artifact io


def test_matrix_round_trip(tmp_path):
    m = np.random.default_rng(0).normal(size=(7, 3))
    path = tmp_path / "m.bin"
    trainer.write_matrix(path, m)
    assert np.array_equal(trainer.read_matrix(path), m)
    raw = path.read_bytes()
    assert raw[:4] == b"SGNN"
    assert len(raw) == 20 + 7 * 3 * 8


def test_matrix_write_is_deterministic(tmp_path):
    m = np.random.default_rng(1).normal(size=(5, 4))
    trainer.write_matrix(tmp_path / "a.bin", m)
    trainer.write_matrix(tmp_path / "b.bin", m)
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_matrix_rejects_bad_magic(tmp_path):
    path = tmp_path / "m.bin"
    trainer.write_matrix(path, np.zeros((2, 2)))
    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(TrainError, match="magic"):
        trainer.read_matrix(path)


def test_matrix_rejects_truncation(tmp_path):
    path = tmp_path / "m.bin"
    trainer.write_matrix(path, np.zeros((4, 4)))
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(TrainError, match="bytes"):
        trainer.read_matrix(path)


def test_matrix_rejects_unknown_version(tmp_path):
    path = tmp_path / "m.bin"
    trainer.write_matrix(path, np.zeros((2, 2)))
    raw = bytearray(path.read_bytes())
    raw[4] = 99
    path.write_bytes(bytes(raw))
    with pytest.raises(TrainError, match="version"):
        trainer.read_matrix(path)


def test_artifact_round_trip(tmp_path):
    emb = np.random.default_rng(2).normal(size=(4, 6))
    art = EmbeddingArtifact(emb, [f"e{i}" for i in range(4)], meta={"graph_hash": "abc"})
    trainer.write_artifact(art, tmp_path / "e.bin", tmp_path / "e.meta.json")
    back = trainer.read_artifact(tmp_path / "e.bin", tmp_path / "e.meta.json")
    assert np.array_equal(back.embeddings, emb)
    assert back.external_ids == art.external_ids
    assert back.meta["graph_hash"] == "abc"


def test_artifact_validates_rows_and_finiteness():
    with pytest.raises(TrainError, match="rows"):
        EmbeddingArtifact(np.zeros((3, 2)), ["a", "b"])
    bad = np.zeros((2, 2))
    bad[1, 1] = np.nan
    with pytest.raises(TrainError, match="non-finite"):
        EmbeddingArtifact(bad, ["a", "b"])
