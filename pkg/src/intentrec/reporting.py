"""Delimited report files and the matplotlib figures rendered alongside them.

Figures use the Agg backend with fixed size/dpi and no embedded timestamps so
reruns produce byte-identical files.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

import numpy as np  # noqa: E402

_SAVE_KW = dict(dpi=110, metadata={"Software": None})


def write_tsv(path, header: list[str], rows) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as f:
        f.write("\t".join(header) + "\n")
        for row in rows:
            f.write("\t".join(repr(v) if isinstance(v, float) else str(v) for v in row) + "\n")
    return path


def write_lines(path, lines: list[str]) -> Path:
    path = Path(path)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _new_fig(width=6.4, height=4.0):
    return plt.figure(figsize=(width, height))


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return path


def loss_curves_figure(epochs, path) -> Path:
    """Training curves: one panel for loss terms, one for validation metrics."""
    has_val = any(not np.isnan(s.val_ndcg) for s in epochs)
    fig = _new_fig(6.4, 6.0 if has_val else 4.0)
    xs = [s.epoch for s in epochs]
    ax = fig.add_subplot(2 if has_val else 1, 1, 1)
    for attr, label in (("total", "total"), ("bpr", "ranking"), ("icl", "item CL"), ("bcl", "behavior CL")):
        ax.plot(xs, [getattr(s, attr) for s in epochs], label=label, linewidth=1.2)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    if has_val:
        ax2 = fig.add_subplot(2, 1, 2)
        vx = [s.epoch for s in epochs if not np.isnan(s.val_ndcg)]
        ax2.plot(vx, [s.val_hr for s in epochs if not np.isnan(s.val_ndcg)], label="val HR@10", linewidth=1.2)
        ax2.plot(vx, [s.val_ndcg for s in epochs if not np.isnan(s.val_ndcg)], label="val NDCG@10", linewidth=1.2)
        ax2.set_xlabel("epoch")
        ax2.set_ylabel("metric")
        ax2.legend(fontsize=8)
        ax2.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def metrics_figure(report, path) -> Path:
    """Bar chart of HR@K / NDCG@K."""
    fig = _new_fig(5.0, 3.6)
    ax = fig.add_subplot(111)
    ks = list(report.ks)
    width = 0.35
    x = np.arange(len(ks))
    hr = [report.metrics[("HR", k)] for k in ks]
    ndcg = [report.metrics[("NDCG", k)] for k in ks]
    ax.bar(x - width / 2, hr, width, label="HR")
    ax.bar(x + width / 2, ndcg, width, label="NDCG")
    ax.set_xticks(x, [f"@{k}" for k in ks])
    ax.set_ylim(0, 1)
    ax.set_ylabel("metric")
    ax.set_title(f"{report.n_users} users, {report.requested_negatives} negatives")
    ax.legend(fontsize=8)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def ablation_figure(variant_reports: dict, path, ks=(5, 10)) -> Path:
    """Grouped bars comparing variants on HR@10 / NDCG@10."""
    fig = _new_fig(6.4, 3.8)
    ax = fig.add_subplot(111)
    names = list(variant_reports)
    x = np.arange(len(names))
    width = 0.35
    k = ks[-1]
    hr = [variant_reports[n].metrics[("HR", k)] for n in names]
    ndcg = [variant_reports[n].metrics[("NDCG", k)] for n in names]
    ax.bar(x - width / 2, hr, width, label=f"HR@{k}")
    ax.bar(x + width / 2, ndcg, width, label=f"NDCG@{k}")
    ax.set_xticks(x, names)
    ax.set_ylim(0, 1)
    ax.legend(fontsize=8)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def sweep_figure(axis_name: str, rows: list[dict], path) -> Path:
    """Metric-vs-value lines for one swept hyperparameter."""
    fig = _new_fig(5.6, 3.8)
    ax = fig.add_subplot(111)
    xs = [r["value"] for r in rows]
    for metric in ("HR@10", "NDCG@10"):
        ax.plot(xs, [r[metric] for r in rows], marker="o", label=metric, linewidth=1.2)
    ax.set_xlabel(axis_name)
    ax.set_ylabel("metric")
    if max(xs) / max(min(xs), 1e-12) > 50:
        ax.set_xscale("log")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def intent_heatmap_figure(alpha: np.ndarray, cosines: np.ndarray, path) -> Path:
    """Relation-attention heatmap plus pairwise intent cosine matrix."""
    fig = _new_fig(7.2, 3.4)
    ax = fig.add_subplot(121)
    im = ax.imshow(alpha, cmap="viridis", vmin=0, vmax=1, aspect="auto")
    ax.set_xlabel("relation")
    ax.set_ylabel("intent")
    ax.set_title("relation attention")
    fig.colorbar(im, ax=ax, fraction=0.046)
    ax2 = fig.add_subplot(122)
    im2 = ax2.imshow(cosines, cmap="coolwarm", vmin=-1, vmax=1, aspect="auto")
    ax2.set_xlabel("intent")
    ax2.set_ylabel("intent")
    ax2.set_title("pairwise intent cosine")
    fig.colorbar(im2, ax=ax2, fraction=0.046)
    fig.tight_layout()
    return _save(fig, path)
