"""Command-line pipelines over the library modules.

Every run lives in one output directory with fixed file names, so each
subcommand can find the previous stage's artifacts.  All randomness flows
from a single root seed: each module receives a child seed derived as the
first 8 bytes of sha256("<root>:<module>"), which makes `run-all --seed N`
reproducible end to end.  Every artifact records the resolved-config hash
and the graph hash it was built from; `eval` refuses mismatched inputs.

Exit code is 0 on success and 2 on any handled error, which is printed as a
single machine-parsable line: ``error: <module>: <message>``.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import evalkit, hasp, kge, rgnn, syngen, trainer
from . import numcore as nc
from .kgraph import GraphFormatError, HeteroGraph, graph_hash, graph_stats, load_graph, save_graph

_log = logging.getLogger("semgnn.cli")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class PipelineError(RuntimeError):
    def __init__(self, module: str, message: str):
        super().__init__(message)
        self.module = module


def child_seed(root_seed: int, module: str) -> int:
    """First 8 bytes (little-endian) of sha256("<root>:<module>")."""
    digest = hashlib.sha256(f"{root_seed}:{module}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass
class HaspSettings:
    partition_count: int = 4
    epsilon: float = 0.05


@dataclass
class AugmentSettings:
    top_k: int = 3
    directed: bool = False
    popular_threshold: int = 6


@dataclass
class EvalSettings:
    ks: list[int] = field(default_factory=lambda: [10, 50, 100])


@dataclass
class PipelineConfig:
    seed: int = 0
    entity_init: str = "kge"
    inductive_holdout_fraction: float = 0.2
    syngen: syngen.SynGenConfig = field(default_factory=syngen.SynGenConfig)
    kge: kge.KgeConfig = field(default_factory=kge.KgeConfig)
    rgnn: rgnn.RGnnConfig = field(default_factory=rgnn.RGnnConfig)
    train: trainer.TrainConfig = field(default_factory=trainer.TrainConfig)
    hasp: HaspSettings = field(default_factory=HaspSettings)
    augment: AugmentSettings = field(default_factory=AugmentSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        allowed = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - allowed
        if unknown:
            raise PipelineError("cli", f"unknown config keys: {sorted(unknown)}")
        cfg = cls()
        for key in ("seed", "entity_init", "inductive_holdout_fraction"):
            if key in data:
                setattr(cfg, key, data[key])
        if "syngen" in data:
            cfg.syngen = syngen.SynGenConfig.from_dict(data["syngen"])
        for key, section_cls in (
            ("kge", kge.KgeConfig),
            ("rgnn", rgnn.RGnnConfig),
            ("train", trainer.TrainConfig),
            ("hasp", HaspSettings),
            ("augment", AugmentSettings),
            ("eval", EvalSettings),
        ):
            if key in data:
                setattr(cfg, key, _section(section_cls, data[key], key))
        if cfg.entity_init not in ("kge", "random"):
            raise PipelineError("cli", f"entity_init must be kge or random, got {cfg.entity_init!r}")
        return cfg

    def resolve_seeds(self) -> None:
        """Derive per-module seeds from the root seed."""
        self.syngen.seed = child_seed(self.seed, "syngen")
        self.kge.seed = child_seed(self.seed, "kge")
        self.rgnn.seed = child_seed(self.seed, "rgnn")
        self.train.seed = child_seed(self.seed, "train")

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["syngen"] = self.syngen.to_dict()
        return out

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _section(cls, data, label: str):
    if not isinstance(data, dict):
        raise PipelineError("cli", f"config section '{label}' must be an object")
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - allowed
    if unknown:
        raise PipelineError("cli", f"unknown keys in config section '{label}': {sorted(unknown)}")
    return cls(**data)


@dataclass
class Paths:
    out: Path

    def __post_init__(self):
        self.out = Path(self.out)

    @property
    def config(self):
        return self.out / "config.json"

    @property
    def nodes(self):
        return self.out / "graph.nodes.tsv"

    @property
    def edges(self):
        return self.out / "graph.edges.tsv"

    @property
    def truth(self):
        return self.out / "truth.json"

    @property
    def kge_bin(self):
        return self.out / "kge_embeddings.bin"

    @property
    def kge_meta(self):
        return self.out / "kge_embeddings.meta.json"

    @property
    def plan(self):
        return self.out / "hasp_plan.json"

    @property
    def model_bin(self):
        return self.out / "rgnn_model.bin"

    @property
    def model_meta(self):
        return self.out / "rgnn_model.meta.json"

    @property
    def embeddings_bin(self):
        return self.out / "embeddings.bin"

    @property
    def embeddings_meta(self):
        return self.out / "embeddings.meta.json"

    @property
    def train_log(self):
        return self.out / "train_log.jsonl"

    @property
    def split(self):
        return self.out / "train_split.json"

    @property
    def augmented_edges(self):
        return self.out / "augmented.edges.json"

    @property
    def report_csv(self):
        return self.out / "report.csv"

    @property
    def report_json(self):
        return self.out / "report.json"

    @property
    def figures(self):
        return self.out / "figures"

    @property
    def manifest(self):
        return self.out / "manifest.json"


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise PipelineError("cli", f"missing {path.name} ({hint}); expected at {path}")
    return path


def _load_config(args, paths: Paths) -> PipelineConfig:
    if getattr(args, "config", None):
        data = json.loads(Path(args.config).read_text(encoding="utf-8"))
    elif paths.config.exists():
        data = json.loads(paths.config.read_text(encoding="utf-8"))
    else:
        data = {}
    cfg = PipelineConfig.from_dict(data)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "partitions", None) is not None:
        cfg.hasp.partition_count = args.partitions
        cfg.train.partition_count = args.partitions
    if getattr(args, "workers", None) is not None:
        cfg.train.parallel_workers = args.workers
    if getattr(args, "entity_init", None) is not None:
        cfg.entity_init = args.entity_init
    if getattr(args, "top_k", None) is not None:
        cfg.augment.top_k = args.top_k
    if getattr(args, "directed_augment", False):
        cfg.augment.directed = True
    cfg.train.partition_count = cfg.hasp.partition_count
    cfg.resolve_seeds()
    return cfg


def _write_config(cfg: PipelineConfig, paths: Paths) -> None:
    paths.out.mkdir(parents=True, exist_ok=True)
    paths.config.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True), encoding="utf-8")


def _load_graph(paths: Paths) -> HeteroGraph:
    _require(paths.nodes, "run `semgnn gen` first")
    _require(paths.edges, "run `semgnn gen` first")
    return load_graph(paths.nodes, paths.edges)


def _load_kge_model(paths: Paths) -> kge.KgeModel:
    matrix = trainer.read_matrix(paths.kge_bin)
    meta = json.loads(paths.kge_meta.read_text(encoding="utf-8"))
    return kge.KgeModel(
        matrix,
        np.zeros((0, matrix.shape[1])),
        float(meta["margin"]),
        int(meta["dim"]),
    )


def _build_features(cfg: PipelineConfig, graph: HeteroGraph, paths: Paths) -> np.ndarray:
    model = None
    if paths.kge_bin.exists():
        model = _load_kge_model(paths)
    elif cfg.entity_init == "kge":
        raise PipelineError(
            "cli",
            f"entity features need {paths.kge_bin.name}; run `semgnn pretrain` or pass --entity-init random",
        )
    return kge.features_from_kge(
        model, graph, cfg.entity_init, child_seed(cfg.seed, "features"), dim=cfg.rgnn.dim
    )


def _apply_augmented_edges(graph: HeteroGraph, paths: Paths) -> HeteroGraph:
    data = json.loads(_require(paths.augmented_edges, "run `semgnn augment` first").read_text(encoding="utf-8"))
    edges = np.array(data["edges"], dtype=np.int64).reshape(-1, 2)
    if data["mode"] == "undirected":
        eels = np.concatenate([graph.eel_edges, edges])
        eels = eels[np.lexsort((eels[:, 1], eels[:, 0]))]
        return dataclasses.replace(graph, eel_edges=eels)
    dirs = np.concatenate([graph.directed_eels, edges])
    dirs = dirs[np.lexsort((dirs[:, 1], dirs[:, 0]))]
    return dataclasses.replace(graph, directed_eels=dirs)


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    h.update(path.read_bytes())
    return h.hexdigest()


# -- subcommands -----------------------------------------------------------------


def cmd_gen(args) -> None:
    paths = Paths(args.out)
    cfg = _load_config(args, paths)
    graph, truth = syngen.generate(cfg.syngen)
    _write_config(cfg, paths)
    save_graph(graph, paths.nodes, paths.edges)
    syngen.save_truth(truth, paths.truth)
    stats = graph_stats(graph)
    _log.info(
        "generated %d entities, %d concepts, %d semantic edges, %d links (zero-link fraction %.3f)",
        stats.entity_count,
        stats.concept_count,
        stats.semantic_edge_count,
        stats.eel_count,
        stats.zero_eel_fraction,
    )


def cmd_pretrain(args) -> None:
    paths = Paths(args.out)
    cfg = _load_config(args, paths)
    graph = _load_graph(paths)
    model = kge.pretrain(graph, cfg.kge)
    trainer.write_matrix(paths.kge_bin, model.node_embeddings)
    meta = {
        "dim": model.dim,
        "margin": model.margin,
        "external_ids": graph.external_ids,
        "config_hash": cfg.digest(),
        "graph_hash": graph_hash(graph),
        "loss_history": model.loss_history,
    }
    paths.kge_meta.write_text(json.dumps(meta), encoding="utf-8")
    _log.info("pretrained %d node rows (final loss %.6f)", graph.node_count, model.loss_history[-1])


def cmd_partition(args) -> None:
    paths = Paths(args.out)
    cfg = _load_config(args, paths)
    graph = _load_graph(paths)
    plan = hasp.build_plan(
        graph,
        cfg.hasp.partition_count,
        seed=child_seed(cfg.seed, "hasp"),
        epsilon=cfg.hasp.epsilon,
    )
    hasp.save_plan(plan, paths.plan)
    summary = hasp.plan_report(plan, graph, dim=cfg.rgnn.dim)
    _log.info(
        "plan: %d parts, balance %.3f, cut ratio %.3f",
        summary["partition_count"],
        summary["balance_factor"],
        summary["cut_ratio"],
    )


def cmd_train(args) -> None:
    paths = Paths(args.out)
    cfg = _load_config(args, paths)
    graph = _load_graph(paths)
    setting = "inductive" if getattr(args, "inductive", False) else "transductive"

    if setting == "inductive":
        if cfg.entity_init == "kge":
            raise PipelineError(
                "cli", "inductive training needs --entity-init random (held-out entities have no pretrained rows)"
            )
        truth = syngen.load_truth(paths.truth) if paths.truth.exists() else None
        if truth is None:
            raise PipelineError("cli", "inductive training needs truth.json for the stratified split")
        split = syngen.split_inductive(
            graph, truth, cfg.inductive_holdout_fraction, child_seed(cfg.seed, "split")
        )
        train_graph = split.train_graph
        kge_model = kge.pretrain(train_graph, cfg.kge) if len(train_graph.semantic_edges) else None
        features_train = kge.features_from_kge(
            kge_model, train_graph, cfg.entity_init, child_seed(cfg.seed, "features"), dim=cfg.rgnn.dim
        )
        features_full = kge.features_from_kge(
            kge_model, graph, cfg.entity_init, child_seed(cfg.seed, "features"), dim=cfg.rgnn.dim
        )
        rgnn_cfg = dataclasses.replace(
            cfg.rgnn, feature_dim=features_train.shape[1], seed=child_seed(cfg.seed, "rgnn")
        )
        model = rgnn.init_model([r.name for r in train_graph.relations], rgnn_cfg)
        result = trainer.train(train_graph, features_train, model, cfg.train)
        artifact = evalkit.reinfer(result.model, graph, features_full)
        artifact.meta.update(
            config_hash=cfg.digest(),
            setting="inductive",
            train_graph_hash=graph_hash(train_graph),
        )
        paths.split.write_text(
            json.dumps(
                {
                    "holdout_entities": [int(h) for h in split.holdout_entities],
                    "train_graph_hash": graph_hash(train_graph),
                    "holdout_fraction": cfg.inductive_holdout_fraction,
                }
            ),
            encoding="utf-8",
        )
    else:
        features = _build_features(cfg, graph, paths)
        rgnn_cfg = dataclasses.replace(
            cfg.rgnn, feature_dim=features.shape[1], seed=child_seed(cfg.seed, "rgnn")
        )
        model = rgnn.init_model([r.name for r in graph.relations], rgnn_cfg)
        plan = hasp.load_plan(paths.plan) if paths.plan.exists() else None
        result = trainer.train(graph, features, model, cfg.train, plan)
        artifact = result.artifact
        artifact.meta.update(config_hash=cfg.digest(), setting="transductive")

    rgnn.save_model(result.model, paths.model_bin, paths.model_meta)
    trainer.write_artifact(artifact, paths.embeddings_bin, paths.embeddings_meta)
    trainer.write_train_log(result.log_records, paths.train_log)
    final = next((r["loss"] for r in reversed(result.log_records) if r["loss"] is not None), None)
    _log.info("trained %d epochs (final loss %s); artifact %s", cfg.train.epochs, final, paths.embeddings_bin)


def _check_artifact_graph(artifact: trainer.EmbeddingArtifact, expected_hash: str) -> None:
    if artifact.meta.get("graph_hash") != expected_hash:
        raise PipelineError(
            "cli", "embeddings were produced from a different graph (hash mismatch); re-run `semgnn infer`"
        )


def cmd_eval(args) -> None:
    paths = Paths(args.out)
    cfg = _load_config(args, paths)
    setting = args.setting
    graph = _load_graph(paths)
    truth = syngen.load_truth(_require(paths.truth, "run `semgnn gen` first"))
    truths = evalkit.truths_from_planted(truth)
    artifact = trainer.read_artifact(
        _require(paths.embeddings_bin, "run `semgnn train` or `semgnn infer` first"), paths.embeddings_meta
    )
    artifact_setting = artifact.meta.get("setting", "transductive")
    if setting != artifact_setting:
        raise PipelineError(
            "cli",
            f"eval setting '{setting}' does not match the artifact's setting '{artifact_setting}'"
            + (" (split manifest mismatch)" if "inductive" in (setting, artifact_setting) else ""),
        )
    query_filter = None
    if setting == "augmented":
        augmented = _apply_augmented_edges(graph, paths)
        _check_artifact_graph(artifact, graph_hash(augmented))
    elif setting == "inductive":
        split = json.loads(_require(paths.split, "train with --inductive first").read_text(encoding="utf-8"))
        _check_artifact_graph(artifact, graph_hash(graph))
        if artifact.meta.get("train_graph_hash") != split["train_graph_hash"]:
            raise PipelineError("cli", "split manifest mismatch: artifact was trained on a different split")
        query_filter = split["holdout_entities"]
    else:
        _check_artifact_graph(artifact, graph_hash(graph))

    report = evalkit.evaluate(
        artifact.embeddings,
        truths,
        graph,
        setting=setting,
        ks=tuple(cfg.eval.ks),
        query_filter=query_filter,
        artifact_hash=_sha256_file(paths.embeddings_bin),
    )
    report.metadata["config_hash"] = cfg.digest()
    report.to_csv(paths.report_csv)
    report.to_json(paths.report_json)
    _write_figures(report, graph, cfg, paths)
    for k in cfg.eval.ks:
        for source in sorted(truths):
            row = report.lookup(source, k, "all")
            _log.info("%s MAP@%d = %s (%d queries)", source, k, row["map"], row["query_count"])


def _write_figures(report, graph, cfg: PipelineConfig, paths: Paths) -> None:
    from . import figures  # deferred: matplotlib import is slow

    paths.figures.mkdir(parents=True, exist_ok=True)
    figures.save_group_map_figure(report, paths.figures / "map_by_group.png", k=min(cfg.eval.ks))
    figures.save_degree_histogram(graph, paths.figures / "eel_degree_histogram.png")
    if paths.train_log.exists():
        figures.save_loss_curve(paths.train_log, paths.figures / "training_loss.png")
    if paths.plan.exists():
        plan = hasp.load_plan(paths.plan)
        figures.save_partition_figure(
            hasp.plan_report(plan, graph, dim=cfg.rgnn.dim), paths.figures / "partition_balance.png"
        )


def cmd_augment(args) -> None:
    paths = Paths(args.out)
    cfg = _load_config(args, paths)
    graph = _load_graph(paths)
    artifact = trainer.read_artifact(
        _require(paths.embeddings_bin, "run `semgnn train` first"), paths.embeddings_meta
    )
    _check_artifact_graph(artifact, graph_hash(graph))
    augmented, report = evalkit.augment_eels(
        artifact,
        graph,
        top_k=cfg.augment.top_k,
        directed=cfg.augment.directed,
        popular_threshold=cfg.augment.popular_threshold,
    )
    if cfg.augment.directed:
        existing = {(int(s), int(d)) for s, d in graph.directed_eels}
        new_edges = [[int(s), int(d)] for s, d in augmented.directed_eels if (int(s), int(d)) not in existing]
        mode = "directed"
    else:
        existing = {(int(u), int(v)) for u, v in graph.eel_edges}
        new_edges = [[int(u), int(v)] for u, v in augmented.eel_edges if (int(u), int(v)) not in existing]
        mode = "undirected"
    paths.augmented_edges.write_text(
        json.dumps({"mode": mode, "edges": new_edges, "report": report}), encoding="utf-8"
    )
    _log.info(
        "augmented: +%d %s edges (links %d -> %d)",
        len(new_edges),
        mode,
        report["eel_count_before"],
        report["eel_count_after"],
    )


def cmd_infer(args) -> None:
    paths = Paths(args.out)
    cfg = _load_config(args, paths)
    graph = _load_graph(paths)
    setting = "transductive"
    if getattr(args, "augmented", False):
        graph = _apply_augmented_edges(graph, paths)
        setting = "augmented"
    model = rgnn.load_model(
        _require(paths.model_bin, "run `semgnn train` first"), paths.model_meta
    )
    features = _build_features(cfg, graph, paths)
    artifact = evalkit.reinfer(model, graph, features)
    artifact.meta.update(config_hash=cfg.digest(), setting=setting)
    trainer.write_artifact(artifact, paths.embeddings_bin, paths.embeddings_meta)
    _log.info("re-inferred %d entity embeddings (%s graph)", graph.entity_count, setting)


def cmd_run_all(args) -> None:
    paths = Paths(args.out)
    cmd_gen(args)
    cmd_pretrain(args)
    cmd_partition(args)
    args.inductive = False
    cmd_train(args)
    args.setting = "transductive"
    cmd_eval(args)
    cfg = _load_config(args, paths)
    artifacts = [
        paths.config,
        paths.nodes,
        paths.edges,
        paths.truth,
        paths.kge_bin,
        paths.kge_meta,
        paths.plan,
        paths.model_bin,
        paths.model_meta,
        paths.embeddings_bin,
        paths.embeddings_meta,
        paths.report_csv,
        paths.report_json,
    ]
    manifest = {
        "config_hash": cfg.digest(),
        "artifacts": {p.name: _sha256_file(p) for p in artifacts},
    }
    paths.manifest.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    _log.info("manifest written: %s", paths.manifest)


# -- entry point -----------------------------------------------------------------

_ERROR_MODULES = [
    (GraphFormatError, "kgraph"),
    (syngen.ConfigError, "syngen"),
    (kge.KgeError, "kge"),
    (rgnn.ModelFormatError, "rgnn"),
    (trainer.TrainError, "trainer"),
    (hasp.PartitionError, "hasp"),
    (evalkit.EvalError, "evalkit"),
    (nc.ShapeError, "numcore"),
    (nc.NonFiniteError, "numcore"),
]


def _add_common(p, config=True):
    p.add_argument("--out", required=True, help="run directory for inputs and artifacts")
    if config:
        p.add_argument("--config", help="pipeline config JSON")
    p.add_argument("--seed", type=int, help="root seed; overrides the config")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semgnn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic graph with planted truth")
    _add_common(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("pretrain", help="pretrain node embeddings over semantic triples")
    _add_common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("partition", help="build the balanced subgraph plan")
    _add_common(p)
    p.add_argument("--partitions", type=int, help="subgraph count")
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("train", help="train the GNN with link prediction")
    _add_common(p)
    p.add_argument("--partitions", type=int, help="subgraph count")
    p.add_argument("--workers", type=int, help="parallel gradient workers")
    p.add_argument("--entity-init", choices=["kge", "random"], dest="entity_init")
    p.add_argument("--inductive", action="store_true", help="hold out entities and train on the rest")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score embeddings against the planted truth")
    _add_common(p)
    p.add_argument(
        "--setting",
        choices=["transductive", "inductive", "augmented"],
        default="transductive",
    )
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("augment", help="propose new links from embedding neighbors")
    _add_common(p)
    p.add_argument("--top-k", type=int, dest="top_k", help="neighbors per entity")
    p.add_argument("--directed-augment", action="store_true", dest="directed_augment")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("infer", help="re-encode the graph with the trained model")
    _add_common(p)
    p.add_argument("--augmented", action="store_true", help="apply augmented.edges.json first")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("run-all", help="gen, pretrain, partition, train, eval, manifest")
    _add_common(p)
    p.add_argument("--partitions", type=int, help="subgraph count")
    p.add_argument("--workers", type=int, help="parallel gradient workers")
    p.add_argument("--entity-init", choices=["kge", "random"], dest="entity_init")
    p.set_defaults(func=cmd_run_all)
    return parser


def _configure_logging() -> None:
    level_name = os.environ.get("SEMGNN_LOG", "info").lower()
    if level_name not in LOG_LEVELS:
        raise PipelineError("cli", f"SEMGNN_LOG must be one of {sorted(LOG_LEVELS)}, got {level_name!r}")
    logging.basicConfig(level=LOG_LEVELS[level_name], format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _configure_logging()
        args.func(args)
    except PipelineError as exc:
        print(f"error: {exc.module}: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: cli: missing file: {exc.filename or exc}", file=sys.stderr)
        return 2
    except json.JSONDecodeError as exc:
        print(f"error: cli: invalid JSON: {exc}", file=sys.stderr)
        return 2
    except tuple(e for e, _ in _ERROR_MODULES) as exc:
        module = next(m for e, m in _ERROR_MODULES if isinstance(exc, e))
        print(f"error: {module}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
