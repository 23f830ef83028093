"""Figures: C/F curves over tasks and 2-D projections of real vs pseudo features.

Every figure is written as PNG and PDF next to a CSV holding exactly the
plotted values.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from sklearn.manifold import TSNE  # noqa: E402
from sklearn.metrics import silhouette_score  # noqa: E402

FIGURE_FORMATS = ("png", "pdf")
TSNE_PERPLEXITY = 30.0
MIN_POINTS_PER_CLASS = 10

STYLE = {
    "figure.figsize": (5.0, 3.4),
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.labelsize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "savefig.dpi": 150,
}


def _save(fig, stem: Path) -> list[Path]:
    stem.parent.mkdir(parents=True, exist_ok=True)
    paths = []
    for fmt in FIGURE_FORMATS:
        path = stem.with_suffix("." + fmt)
        fig.savefig(path, bbox_inches="tight", metadata={"CreationDate": None} if fmt == "pdf" else None)
        paths.append(path)
    plt.close(fig)
    return paths


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def emit_curves(results, out_dir: str | Path) -> dict[str, list[Path]]:
    """Correlation index and forgetting index versus task, one series per result bundle."""
    if not results:
        raise ValueError("no results to plot")
    counts = {r.label: r.n_tasks for r in results}
    if len(set(counts.values())) != 1:
        raise ValueError(f"mismatched task counts across methods: {counts}")
    out_dir = Path(out_dir)
    series = {r.label: r.per_task() for r in results}
    written: dict[str, list[Path]] = {}
    for key, col, ylabel, first in (("correlation_index", 1, "C", 0), ("forgetting_index", 2, "F", 1)):
        rows = []
        with plt.rc_context(STYLE):
            fig, ax = plt.subplots()
            for label, per_task in series.items():
                pts = [(row[0], row[col]) for row in per_task[first:]]
                ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", ms=3, lw=1.2, label=label)
                rows.extend((label, t, repr(v)) for t, v in pts)
            ax.set_xlabel("task")
            ax.set_ylabel(ylabel)
            ax.legend(frameon=False)
            paths = _save(fig, out_dir / key)
        paths.append(_write_csv(out_dir / f"{key}.csv", ["method", "task_index", ylabel], rows))
        written[key] = paths
    return written


def project_features(real: np.ndarray, pseudo: np.ndarray, labels_real: Sequence[int], labels_pseudo: Sequence[int],
                     out_stem: str | Path | None = None, seed: int = 0,
                     perplexity: float = TSNE_PERPLEXITY) -> np.ndarray:
    """t-SNE of real and pseudo features together; rows are real first, then pseudo.

    Real points are drawn as filled circles and pseudo points as crosses,
    coloured by distortion.
    """
    real, pseudo = np.asarray(real, dtype=np.float64), np.asarray(pseudo, dtype=np.float64)
    labels_real, labels_pseudo = np.asarray(labels_real), np.asarray(labels_pseudo)
    if len(real) != len(labels_real) or len(pseudo) != len(labels_pseudo):
        raise ValueError("labels must match the number of feature rows")
    if len(real) < MIN_POINTS_PER_CLASS or len(pseudo) < MIN_POINTS_PER_CLASS:
        raise ValueError(f"need at least {MIN_POINTS_PER_CLASS} real and pseudo points, "
                         f"got {len(real)} and {len(pseudo)}")
    X = np.concatenate([real, pseudo])
    perplexity = min(perplexity, (len(X) - 1) / 3.0)
    emb = TSNE(n_components=2, perplexity=perplexity, init="pca", random_state=seed).fit_transform(X)
    if out_stem is not None:
        out_stem = Path(out_stem)
        n = len(real)
        kinds = np.array(["real"] * n + ["pseudo"] * len(pseudo))
        labels = np.concatenate([labels_real, labels_pseudo])
        with plt.rc_context(STYLE):
            fig, ax = plt.subplots(figsize=(4.5, 4.5))
            cmap = plt.get_cmap("tab10")
            for i, j in enumerate(np.unique(labels)):
                colour = cmap(i % 10)
                m = (labels == j) & (kinds == "real")
                ax.scatter(emb[m, 0], emb[m, 1], s=8, marker="o", color=colour, label=f"{j} real")
                m = (labels == j) & (kinds == "pseudo")
                ax.scatter(emb[m, 0], emb[m, 1], s=12, marker="x", color=colour, lw=0.8, label=f"{j} pseudo")
            ax.set_xticks([])
            ax.set_yticks([])
            ax.legend(frameon=False, fontsize=6, ncol=2)
            _save(fig, out_stem)
        _write_csv(out_stem.with_suffix(".csv"), ["kind", "distortion_id", "x", "y"],
                   [(k, int(j), repr(float(a)), repr(float(b))) for k, j, (a, b) in zip(kinds, labels, emb)])
    return emb


def embedding_silhouette(embedding: np.ndarray, labels: Sequence[int]) -> float:
    return float(silhouette_score(embedding, np.asarray(labels)))
