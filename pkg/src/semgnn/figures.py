"""Report figures rendered to files next to the delimited output.

Every function takes already-computed data and a destination path; nothing
here recomputes metrics.  The Agg backend is forced so rendering works in
headless runs.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evalkit import EvalReport
from .kgraph import HeteroGraph


def save_group_map_figure(report: EvalReport, path, k: int = 10) -> None:
    """Grouped bars: MAP@k per degree group, one cluster per truth source."""
    sources = sorted({row["source"] for row in report.rows})
    groups = ["0", "1", "2", "all"]
    fig, ax = plt.subplots(figsize=(7, 4))
    width = 0.8 / max(len(sources), 1)
    for i, source in enumerate(sources):
        values = []
        for g in groups:
            row = report.lookup(source, k, g)
            values.append(row["map"] if row["map"] is not None else 0.0)
        offsets = np.arange(len(groups)) + (i - (len(sources) - 1) / 2) * width
        ax.bar(offsets, values, width=width, label=source)
    ax.set_xticks(np.arange(len(groups)))
    ax.set_xticklabels([f"group {g}" if g != "all" else "all" for g in groups])
    ax.set_ylabel(f"MAP@{k}")
    ax.set_title(f"MAP@{k} by EEL-degree group ({report.metadata.get('setting', '')})")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_degree_histogram(graph: HeteroGraph, path) -> None:
    """EEL degree distribution on log-log axes; the zero bucket is annotated."""
    degrees = np.zeros(graph.entity_count, dtype=np.int64)
    if len(graph.eel_edges):
        np.add.at(degrees, graph.eel_edges[:, 0], 1)
        np.add.at(degrees, graph.eel_edges[:, 1], 1)
    values, counts = np.unique(degrees, return_counts=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    nonzero = values > 0
    if nonzero.any():
        ax.loglog(values[nonzero], counts[nonzero], marker="o", linestyle="none")
    zero_count = int(counts[values == 0][0]) if (values == 0).any() else 0
    ax.set_xlabel("EEL degree")
    ax.set_ylabel("entities")
    ax.set_title(f"EEL degree distribution ({zero_count} entities with none)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_loss_curve(log_path, path) -> None:
    """Training loss per epoch from the JSON-lines training log."""
    epochs, losses = [], []
    for line in Path(log_path).read_text(encoding="utf-8").splitlines():
        if not line:
            continue
        record = json.loads(line)
        if record.get("loss") is not None:
            epochs.append(record["epoch"])
            losses.append(record["loss"])
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, losses, marker=".")
    ax.set_xlabel("epoch")
    ax.set_ylabel("link-prediction loss")
    ax.set_title("training loss")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_partition_figure(plan_summary: dict, path) -> None:
    """Per-subgraph entity counts plus the cut ratio in the title."""
    sizes = [s["entities"] for s in plan_summary["subgraphs"]]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(np.arange(len(sizes)), sizes)
    ax.set_xlabel("subgraph")
    ax.set_ylabel("entities")
    ax.set_title(
        "partition balance (cut ratio {:.3f}, balance factor {:.3f})".format(
            plan_summary["cut_ratio"], plan_summary["balance_factor"]
        )
    )
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
