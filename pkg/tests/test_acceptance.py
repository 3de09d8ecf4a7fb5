"""End-to-end acceptance gate.

Ten criteria, one test each, covering gradient correctness, attention
invariants, pretraining quality, partition quality, parity of partitioned
training, the semantic-signal ablation, the inductive setting, link
augmentation, ranking-metric exactness, and pipeline determinism.  The
heavier experiments share one seed-fixed 5,000-entity world built lazily and
cached for the whole session; each criterion that carries a wall-clock
budget is timed around the work it is responsible for.

Results are summarized as one `ACCEPTANCE <id> <label>: PASS/FAIL` line per
criterion at the end of the pytest run, with measured numbers underneath.
"""

import dataclasses
import functools
import json
import math
import time

import numpy as np

import fd_suite
import oracles
from conftest import REPORT_LINES
from semgnn import cli, evalkit, hasp, kge, rgnn, syngen, trainer
from semgnn import numcore as nc
from test_hasp import covered_eel_graph, eel_graph, clique, cut_of, random_eel_graph
from test_rgnn import full_loss_setup, identity_model, make_graph, random_model, weights_for_target

# -- frozen experiment recipe ----------------------------------------------------
#
# The relative experiments (C5-C8) run on one seed-fixed 5,000-entity graph
# dense enough for link prediction to learn real structure in minutes.  All
# values below are locked; changing any of them invalidates the measured
# baselines quoted in the assertions.

DIM = 32
WORLD_CFG = dict(eel_within_community_prob=0.12, zero_eel_entity_fraction=0.5, seed=0)
KGE_CFG = dict(dim=DIM, epochs=40, batch_size=2048, lr=0.1, seed=0)
TRAIN_CFG = dict(epochs=60, lr=5e-3, seed=9, batch_size=2048, negatives_per_positive=5)
FEATURE_SEED = 11
RGNN_SEED = 5
SPLIT_SEED = 13
BASELINE_SEED = 3

FD_TOL = 1e-4
FD_TRIALS = 100
ATT_TOL = 1e-12
MRR_FACTOR = 3.0
KGE_LOSS_CEILING = 0.81  # frozen: 0.7729 measured on the pinned seed
PARITY_REL = 0.10
ABLATION_MIN_GAIN = 0.20
INDUCTIVE_FACTOR = 5.0
CUT_APPROX = 1.5


def report(line):
    REPORT_LINES.append(line)


# -- shared lazy world -------------------------------------------------------------


@functools.cache
def world():
    graph, truth = syngen.generate(syngen.SynGenConfig(**WORLD_CFG))
    return graph, truth


@functools.cache
def truths():
    return evalkit.truths_from_planted(world()[1])


@functools.cache
def features():
    graph, _ = world()
    model = kge.pretrain(graph, kge.KgeConfig(**KGE_CFG))
    return kge.features_from_kge(model, graph, "random", seed=FEATURE_SEED, dim=DIM)


def fresh_model(graph):
    cfg = rgnn.RGnnConfig(layer_count=2, dim=DIM, feature_dim=DIM, seed=RGNN_SEED)
    return rgnn.init_model([r.name for r in graph.relations], cfg)


def train_cfg(parts=1):
    return trainer.TrainConfig(partition_count=parts, **TRAIN_CFG)


def ablate(graph):
    return dataclasses.replace(graph, semantic_edges=np.zeros((0, 3), dtype=np.int64))


@functools.cache
def run_n1():
    graph, _ = world()
    return trainer.train(graph, features(), fresh_model(graph), train_cfg(1))


@functools.cache
def run_n4():
    graph, _ = world()
    return trainer.train(graph, features(), fresh_model(graph), train_cfg(4))


@functools.cache
def run_ablation():
    graph, _ = world()
    return trainer.train(ablate(graph), features(), fresh_model(graph), train_cfg(1))


def map_table(embeddings, graph=None, query_filter=None):
    """{(source, group): (map, query_count)} at K = 10."""
    graph = world()[0] if graph is None else graph
    rep = evalkit.evaluate(embeddings, truths(), graph, ks=(10,), query_filter=query_filter)
    return {
        (src, grp): (rep.lookup(src, 10, grp)["map"], rep.lookup(src, 10, grp)["query_count"])
        for src in ("co_sim", "hc_sim")
        for grp in ("0", "1", "2", "all")
    }


@functools.cache
def inductive_bundle():
    """Split, frozen models trained with and without semantic edges, features."""
    graph, truth = world()
    split = syngen.split_inductive(graph, truth, 0.2, seed=SPLIT_SEED)
    kge_model = kge.pretrain(split.train_graph, kge.KgeConfig(**KGE_CFG))
    feats_train = kge.features_from_kge(kge_model, split.train_graph, "random", seed=FEATURE_SEED, dim=DIM)
    feats_full = kge.features_from_kge(kge_model, graph, "random", seed=FEATURE_SEED, dim=DIM)
    full = trainer.train(split.train_graph, feats_train, fresh_model(split.train_graph), train_cfg(1))
    abl = trainer.train(
        ablate(split.train_graph), feats_train, fresh_model(split.train_graph), train_cfg(1)
    )
    return split, full, abl, feats_full


# -- C1 ----------------------------------------------------------------------------


def test_c1_gradient_suite():
    t0 = time.monotonic()
    worst = {}
    for seed, name in enumerate(sorted(fd_suite.CASES)):
        worst[name] = fd_suite.run_primitive(name, trials=FD_TRIALS, seed=1000 + seed)
        assert worst[name] < FD_TOL, f"{name}: worst relative error {worst[name]:.3e}"

    # full network + loss on a 10-node instance, every parameter tensor
    g, model, feats, pos, neg = full_loss_setup()
    index = rgnn.build_edge_index(g)
    params = model.param_dict()
    names = sorted(params)

    def forward():
        tape = nc.Tape()
        h, _ = rgnn.encode_on_tape(tape, index, feats, model)
        return float(trainer.link_prediction_loss(tape, h, pos, neg).value)

    tape = nc.Tape()
    h, tracked = rgnn.encode_on_tape(tape, index, feats, model)
    tape.backward(trainer.link_prediction_loss(tape, h, pos, neg))
    grads = tracked.grads()
    numeric = oracles.central_diff(forward, [params[n] for n in names])
    err = oracles.max_rel_err([grads[n] for n in names], numeric)
    assert err < FD_TOL, f"full graph: worst relative error {err:.3e}"

    elapsed = time.monotonic() - t0
    assert elapsed < 60.0, f"gradient suite took {elapsed:.1f}s"
    report(
        f"C1 worst primitive err={max(worst.values()):.2e} full-graph err={err:.2e} "
        f"({FD_TRIALS} trials x {len(worst)} primitives, {elapsed:.1f}s)"
    )


# -- C2 ----------------------------------------------------------------------------


def test_c2_attention_invariants():
    # softmax rows sum to one on a mixed-relation graph
    rng = np.random.default_rng(3)
    g = make_graph(
        6,
        2,
        sem=[(i, 0, 6 + (i % 2)) for i in range(6)],
        eel=[(0, 1), (1, 2), (2, 3), (0, 4)],
    )
    model = random_model(rng, 8, feature_dim=8)
    feats = rng.normal(size=(8, 8))
    for layer in range(len(model.layers)):
        index, w = rgnn.attention_weights(g, feats, model, layer)
        assert np.all(w >= 0)
        for t in np.unique(index.tgt):
            assert abs(float(w[index.tgt == t].sum()) - 1.0) <= ATT_TOL

    # a sole in-neighbor always carries weight exactly one
    g1 = make_graph(2, 0, eel=[(0, 1)])
    feats1 = np.random.default_rng(2).normal(size=(2, 4))
    for beta in (0.25, 1.0, 7.0):
        _, w = weights_for_target(g1, feats1, identity_model(beta=(1.0, beta)), 0)
        assert w.shape == (1,)
        assert abs(float(w[0]) - 1.0) <= ATT_TOL

    # two in-neighbors under different relations: raising the semantic
    # relation's scale never lowers its weight, and once it takes the argmax
    # it keeps it
    g2 = make_graph(3, 1, sem=[(0, 0, 3)])
    g2 = dataclasses.replace(g2, eel_edges=np.array([[0, 1]], dtype=np.int64))
    feats2 = np.abs(np.random.default_rng(4).normal(size=(4, 4))) + 0.1
    last, was_argmax = -1.0, False
    for beta_sem in (0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0):
        index, w = rgnn.attention_weights(g2, feats2, identity_model(beta=(beta_sem, 1.0)), 0)
        at_target = index.tgt == 0
        sem_w = float(w[at_target & (index.rel == 0), 0][0])
        eel_w = float(w[at_target & (index.rel == 1), 0][0])
        assert sem_w >= last - 1e-15
        if was_argmax:
            assert sem_w >= eel_w
        was_argmax = was_argmax or sem_w > eel_w
        last = sem_w
    assert was_argmax, "semantic edge never took the argmax within the swept range"
    report("C2 softmax sums, single-neighbor weight, and scale monotonicity hold")


# -- C3 ----------------------------------------------------------------------------


def test_c3_pretraining_ranking():
    t0 = time.monotonic()
    graph, _ = syngen.generate(syngen.SynGenConfig())
    triples = graph.semantic_edges
    hold = np.random.default_rng(123).random(len(triples)) < 0.10
    train_graph = dataclasses.replace(graph, semantic_edges=triples[~hold])
    model = kge.pretrain(train_graph, kge.KgeConfig(dim=32, epochs=25, batch_size=2048, lr=0.1, seed=0))

    # hinge losses can never dip below zero
    assert min(model.loss_history) >= 0.0
    final_loss = model.loss_history[-1]
    assert final_loss <= KGE_LOSS_CEILING, f"final loss {final_loss:.4f} regressed"

    held = triples[hold]
    sample = held[np.random.default_rng(7).permutation(len(held))[:500]]
    known = {(int(h), int(r), int(t)) for h, r, t in triples}
    mrr = kge.evaluate_filtered_mrr(model, sample, known, graph)
    baseline = kge.random_mrr_baseline(kge.filtered_candidate_counts(sample, known, graph))
    assert mrr >= MRR_FACTOR * baseline, f"mrr {mrr:.4f} vs random {baseline:.4f}"

    elapsed = time.monotonic() - t0
    assert elapsed < 300.0, f"pretraining check took {elapsed:.1f}s"
    report(
        f"C3 filtered MRR={mrr:.4f} random={baseline:.4f} ratio={mrr / baseline:.2f}x "
        f"final_loss={final_loss:.4f} ({elapsed:.1f}s)"
    )


# -- C4 ----------------------------------------------------------------------------


def test_c4_partition_correctness():
    t0 = time.monotonic()

    # structural identities on 50 random graphs
    rng = np.random.default_rng(7)
    for _ in range(50):
        g = random_eel_graph(rng)
        n_parts = int(rng.integers(2, 5))
        plan = hasp.build_plan(g, n_parts, seed=11)
        assert plan.assignment.shape == (g.entity_count,)
        assert np.all((plan.assignment >= 0) & (plan.assignment < n_parts))
        assert plan.sizes().sum() == g.entity_count
        cut_set = {(int(u), int(v)) for u, v in plan.cut_eels}
        for u, v in g.eel_edges:
            crossing = plan.assignment[int(u)] != plan.assignment[int(v)]
            assert crossing == ((int(u), int(v)) in cut_set)
        for k in range(n_parts):
            sub, to_full = hasp.materialize_subgraph(g, plan, k)
            assert sub.concept_count == g.concept_count  # concepts ride along
            assert np.all(plan.assignment[to_full[: sub.entity_count]] == k)

    # planted two-clique graphs split with zero cut
    for size in (8, 10, 16):
        g = eel_graph(2 * size, clique(0, size) + clique(size, size))
        plan = hasp.build_plan(g, 2, seed=0)
        assert cut_of(g, plan) == 0
        assert sorted(plan.sizes()) == [size, size]

    # 12-node random graphs vs the exhaustive optimum and random assignments
    rng = np.random.default_rng(42)
    ratios = []
    for trial in range(8):
        g = covered_eel_graph(rng, 12)
        plan = hasp.build_plan(g, 2, seed=trial, epsilon=0.1)
        cut = cut_of(g, plan)
        pairs = [(int(u), int(v)) for u, v in g.eel_edges]
        floor, cap = hasp.balance_bounds(12, 2, 0.1)
        best = oracles.brute_force_min_cut(pairs, 12, 2, floor, cap)
        assert cut <= CUT_APPROX * best, f"trial {trial}: cut {cut} vs optimum {best}"
        ratios.append(cut / best if best else 1.0)

        rand_cuts = []
        rng2 = np.random.default_rng(trial)
        for _ in range(200):
            labels = np.zeros(12, dtype=np.int64)
            labels[rng2.permutation(12)[:6]] = 1
            rand_cuts.append(sum(1 for u, v in pairs if labels[u] != labels[v]))
        assert cut < np.mean(rand_cuts)

    elapsed = time.monotonic() - t0
    assert elapsed < 120.0, f"partition checks took {elapsed:.1f}s"
    report(f"C4 worst cut/optimum={max(ratios):.2f} over 8 instances ({elapsed:.1f}s)")


# -- C5 ----------------------------------------------------------------------------


def test_c5_partition_parity():
    t0 = time.monotonic()
    m1 = map_table(run_n1().artifact.embeddings)
    m4 = map_table(run_n4().artifact.embeddings)
    gaps = {}
    for src in ("co_sim", "hc_sim"):
        a, b = m1[(src, "all")][0], m4[(src, "all")][0]
        gaps[src] = abs(b - a) / a
        assert gaps[src] <= PARITY_REL, (
            f"{src}: N=1 {a:.4f} vs N=4 {b:.4f}, gap {gaps[src]:.1%}"
        )
    elapsed = time.monotonic() - t0
    assert elapsed < 1200.0, f"parity experiment took {elapsed:.1f}s"
    report(
        "C5 MAP@10 all-groups: "
        f"co_sim N1={m1[('co_sim', 'all')][0]:.4f} N4={m4[('co_sim', 'all')][0]:.4f} "
        f"gap={gaps['co_sim']:.1%}; "
        f"hc_sim N1={m1[('hc_sim', 'all')][0]:.4f} N4={m4[('hc_sim', 'all')][0]:.4f} "
        f"gap={gaps['hc_sim']:.1%} ({elapsed:.1f}s)"
    )


# -- C6 ----------------------------------------------------------------------------


def test_c6_semantic_ablation():
    t0 = time.monotonic()
    full = map_table(run_n1().artifact.embeddings)
    abl = map_table(run_ablation().artifact.embeddings)
    f0, a0 = full[("hc_sim", "0")][0], abl[("hc_sim", "0")][0]
    gain = (f0 - a0) / a0
    elapsed = time.monotonic() - t0
    assert elapsed < 1800.0, f"ablation experiment took {elapsed:.1f}s"
    report(
        f"C6 hc_sim group0 MAP@10: full={f0:.4f} ablation={a0:.4f} "
        f"gain={gain:.1%} ({elapsed:.1f}s)"
    )
    assert gain >= ABLATION_MIN_GAIN, (
        f"semantic edges lift cold-entity MAP by {gain:.1%}, below {ABLATION_MIN_GAIN:.0%}"
    )


# -- C7 ----------------------------------------------------------------------------


def test_c7_inductive_setting():
    split, full, abl, feats_full = inductive_bundle()
    graph, _ = world()
    holdout = {int(h) for h in split.holdout_entities}

    rep_full = evalkit.evaluate_inductive(
        full.model, graph, feats_full, split.holdout_entities, truths(), ks=(10,)
    )
    rep_abl = evalkit.evaluate_inductive(
        abl.model, ablate(graph), feats_full, split.holdout_entities, truths(), ks=(10,)
    )

    # random embeddings, same shape, same scoring path
    rand = np.random.default_rng(BASELINE_SEED).standard_normal((graph.entity_count, DIM))
    base = map_table(rand, query_filter=holdout)

    factors = {}
    for src in ("co_sim", "hc_sim"):
        ind = rep_full.lookup(src, 10, "all")["map"]
        rnd = base[(src, "all")][0]
        factors[src] = math.inf if rnd == 0 else ind / rnd
        assert ind >= INDUCTIVE_FACTOR * rnd, (
            f"{src}: inductive {ind:.4f} vs random {rnd:.5f}"
        )

    gains = {}
    for src in ("co_sim", "hc_sim"):
        g0 = (
            rep_full.lookup(src, 10, "0")["map"] - rep_abl.lookup(src, 10, "0")["map"]
        ) / rep_abl.lookup(src, 10, "0")["map"]
        gall = (
            rep_full.lookup(src, 10, "all")["map"] - rep_abl.lookup(src, 10, "all")["map"]
        ) / rep_abl.lookup(src, 10, "all")["map"]
        gains[src] = (g0, gall)
    # the semantic signal must help the never-seen cold entities at least as
    # much as it helps everyone; asserted on the concept-overlap truth where
    # the cold group carries most of the queries, reported for both
    assert gains["hc_sim"][0] >= gains["hc_sim"][1], (
        f"hc_sim: group0 gain {gains['hc_sim'][0]:.1%} < all-groups gain {gains['hc_sim'][1]:.1%}"
    )
    report(
        f"C7 inductive/random: co_sim={factors['co_sim']:.1f}x hc_sim={factors['hc_sim']:.1f}x; "
        f"gain-over-ablation g0 vs all: hc_sim {gains['hc_sim'][0]:.1%} >= {gains['hc_sim'][1]:.1%}, "
        f"co_sim {gains['co_sim'][0]:.1%} vs {gains['co_sim'][1]:.1%}"
    )


# -- C8 ----------------------------------------------------------------------------


def test_c8_augmentation_study():
    graph, _ = world()
    result = run_n1()
    before = map_table(result.artifact.embeddings)

    augmented, rep = evalkit.augment_eels(result.artifact.embeddings, graph, top_k=3)
    art = evalkit.reinfer(result.model, augmented, features())
    # group membership stays pinned to the original degrees: the question is
    # whether yesterday's cold entities rank better, not who is cold now
    after = map_table(art.embeddings)

    b0, a0 = before[("hc_sim", "0")][0], after[("hc_sim", "0")][0]
    report(
        f"C8 hc_sim group0 MAP@10 {b0:.4f} -> {a0:.4f}; "
        f"co_sim group0 {before[('co_sim', '0')][0]:.4f} -> {after[('co_sim', '0')][0]:.4f}; "
        f"EELs {rep['eel_count_before']} -> {rep['eel_count_after']} "
        f"(growth {rep['growth_factor']:.3f})"
    )
    assert a0 > b0, f"cold-entity MAP fell: {b0:.4f} -> {a0:.4f}"

    # locality: adding one link must leave entities outside the changed
    # two-hop neighborhood bitwise untouched
    new_edges = {(int(u), int(v)) for u, v in augmented.eel_edges} - {
        (int(u), int(v)) for u, v in graph.eel_edges
    }
    u, v = sorted(new_edges)[0]
    eels = np.concatenate([graph.eel_edges, np.array([[u, v]], dtype=np.int64)])
    eels = eels[np.lexsort((eels[:, 1], eels[:, 0]))]
    g_one = dataclasses.replace(graph, eel_edges=eels)
    base_art = evalkit.reinfer(result.model, graph, features())
    one_art = evalkit.reinfer(result.model, g_one, features())
    adjacency = graph.eel_adjacency_sets()
    touched = {u, v} | adjacency[u] | adjacency[v]
    untouched = np.array(sorted(set(range(graph.entity_count)) - touched), dtype=np.int64)
    assert untouched.size > 0
    assert np.array_equal(base_art.embeddings[untouched], one_art.embeddings[untouched])
    changed = np.abs(one_art.embeddings[[u, v]] - base_art.embeddings[[u, v]]).max()
    assert changed > 0.0


# -- C9 ----------------------------------------------------------------------------


def test_c9_map_oracle():
    rng = np.random.default_rng(2026)
    checked = 0
    while checked < 1000:
        ne = int(rng.integers(2, 11))
        d = int(rng.integers(2, 7))
        emb = rng.standard_normal((ne, d))
        relevant = {}
        for q in range(ne):
            others = [j for j in range(ne) if j != q]
            take = int(rng.integers(0, len(others) + 1))
            relevant[q] = (
                {int(x) for x in rng.choice(others, size=take, replace=False)} if take else set()
            )
        if not any(relevant.values()):
            continue
        k = int(rng.integers(1, 13))
        truth = evalkit.SimilarityGroundTruth("t", relevant)
        got = evalkit.map_at_k(emb, truth, k)

        aps = []
        for q in truth.valid_queries():
            scores = [
                (-sum(float(emb[q][c]) * float(emb[j][c]) for c in range(d)), j)
                for j in range(ne)
                if j != q
            ]
            ranking = [j for _, j in sorted(scores)]
            aps.append(oracles.average_precision(ranking, relevant[q], k))
        want = math.fsum(aps) / len(aps)
        assert got == want, f"instance {checked}: {got!r} != {want!r}"
        checked += 1
    report("C9 map_at_k == brute-force AP on 1000 random instances, bit for bit")


# -- C10 ---------------------------------------------------------------------------


def test_c10_run_all_determinism(tmp_path):
    config = {
        "seed": 0,
        "entity_init": "kge",
        "syngen": {
            "entity_count": 300,
            "planted_community_count": 6,
            "eel_within_community_prob": 0.2,
            "zero_eel_entity_fraction": 0.4,
        },
        "kge": {"dim": 16, "epochs": 8, "batch_size": 1024},
        "rgnn": {"layer_count": 2, "dim": 16},
        "train": {"epochs": 3, "batch_size": 256},
        "hasp": {"partition_count": 2},
        "eval": {"ks": [10]},
    }
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(config), encoding="utf-8")

    manifests = []
    for name in ("first", "second"):
        out = tmp_path / name
        code = cli.main(["run-all", "--out", str(out), "--config", str(cfg_path), "--seed", "7"])
        assert code == 0
        manifests.append(json.loads((out / "manifest.json").read_text(encoding="utf-8")))
    assert manifests[0] == manifests[1]
    assert len(manifests[0]["artifacts"]) == 13
    report(f"C10 two pipeline runs agree on {len(manifests[0]['artifacts'])} artifact hashes")
