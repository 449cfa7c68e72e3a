"""Report rendering: delimited metric tables and matplotlib figures.

Every CLI report path writes a machine-readable TSV next to the JSON and, by
default, a PNG figure.  Figures use the Agg backend so rendering works
headless.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
from matplotlib.patches import Rectangle

from saers.evaluation import EvalReport
from saers.explanation import Explanation
from saers.training import TrainStats


def write_metrics_tsv(report: EvalReport, path: str | Path) -> None:
    lines = ["metric\tvalue"]
    if report.auc_all is not None:
        lines.append(f"auc_all\t{report.auc_all!r}")
    if report.auc_cold is not None:
        lines.append(f"auc_cold\t{report.auc_cold!r}")
    for n in sorted(report.ndcg):
        lines.append(f"ndcg@{n}\t{report.ndcg[n]!r}")
    lines.append(f"n_users\t{report.n_users}")
    lines.append(f"n_cold_items\t{report.n_cold_items}")
    lines.append(f"scorer\t{report.scorer}")
    Path(path).write_text("\n".join(lines) + "\n")


def write_train_stats_tsv(stats: TrainStats, path: str | Path) -> None:
    probes = dict(stats.val_auc)
    lines = ["epoch\tmean_loss\tval_auc"]
    for epoch, loss in enumerate(stats.epoch_loss, start=1):
        probe = probes.get(epoch)
        lines.append(f"{epoch}\t{loss!r}\t{'' if probe is None else repr(probe)}")
    Path(path).write_text("\n".join(lines) + "\n")


def plot_eval_report(report: EvalReport, path: str | Path) -> None:
    """Bar chart of AUC values plus the NDCG@N curve when present."""
    has_ndcg = bool(report.ndcg)
    fig, axes = plt.subplots(1, 2 if has_ndcg else 1, figsize=(9 if has_ndcg else 5, 3.4))
    ax_auc = axes[0] if has_ndcg else axes
    labels, values = [], []
    if report.auc_all is not None:
        labels.append("All Items")
        values.append(report.auc_all)
    if report.auc_cold is not None:
        labels.append("Cold Items")
        values.append(report.auc_cold)
    if values:
        ax_auc.bar(labels, values, color="#4878a8", width=0.5)
        ax_auc.axhline(0.5, color="gray", linestyle="--", linewidth=1, label="random")
        ax_auc.set_ylim(0.0, 1.0)
        ax_auc.set_ylabel("AUC")
        ax_auc.legend(loc="lower right", frameon=False)
        for x, v in enumerate(values):
            ax_auc.text(x, v + 0.02, f"{v:.4f}", ha="center", fontsize=9)
    else:
        ax_auc.axis("off")
    ax_auc.set_title(f"AUC ({report.scorer})")
    if has_ndcg:
        ns = sorted(report.ndcg)
        axes[1].plot(ns, [report.ndcg[n] for n in ns], marker="o", color="#a85448")
        axes[1].set_xlabel("N")
        axes[1].set_ylabel("NDCG@N")
        axes[1].set_title("Top-N ranking quality")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def plot_training_curves(stats: TrainStats, path: str | Path) -> None:
    """Mean loss per epoch with the validation-AUC probe trace."""
    fig, ax = plt.subplots(figsize=(6, 3.4))
    epochs = range(1, len(stats.epoch_loss) + 1)
    ax.plot(epochs, stats.epoch_loss, color="#4878a8", label="mean BPR loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    if stats.val_auc:
        ax2 = ax.twinx()
        xs, ys = zip(*stats.val_auc)
        ax2.plot(xs, ys, color="#a85448", marker="o", label="validation AUC")
        ax2.set_ylabel("AUC")
        ax2.set_ylim(0.4, 1.0)
    fig.legend(loc="upper center", ncol=2, frameon=False, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def plot_explanation(expl: Explanation, path: str | Path) -> None:
    """Weight bars plus the top attribute's box drawn on the image frame."""
    fig, (ax_w, ax_box) = plt.subplots(1, 2, figsize=(9, 3.8),
                                       gridspec_kw={"width_ratios": [3, 2]})
    attrs = expl.attributes
    names = [f"{a.name} ({a.predicted_class})" for a in attrs][::-1]
    weights = [a.weight for a in attrs][::-1]
    ax_w.barh(names, weights, color="#4878a8")
    ax_w.set_xlabel("attention weight")
    ax_w.set_title(f"user {expl.user_id} x item {expl.item_id}")
    ax_w.tick_params(labelsize=8)

    h, w = expl.image_frame
    ax_box.set_xlim(0, w)
    ax_box.set_ylim(h, 0)
    ax_box.set_aspect("equal")
    ax_box.set_title("localized regions")
    for rank, a in enumerate(attrs[:3]):
        x0, y0, x1, y1 = a.bbox
        color = ["#a85448", "#c8a848", "#6898c8"][rank]
        ax_box.add_patch(Rectangle((x0, y0), x1 - x0 + 1, y1 - y0 + 1,
                                   fill=False, edgecolor=color, linewidth=2))
        ax_box.text(x0, max(y0 - 2, 2), f"{a.name}: {a.weight:.1%}",
                    fontsize=7, color=color)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
