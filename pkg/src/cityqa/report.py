"""Figure rendering for the CLI report paths.

Every figure lands next to its delimited counterpart (corpus JSONL, trace
CSV, report CSV) so a run directory is self-describing. Uses the Agg
backend; nothing here ever opens a window.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def plot_loss_trace(trace: list, path) -> None:
    """Per-epoch total / answer / KL losses on a log-friendly layout."""
    epochs = [row["epoch"] for row in trace]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.2))
    ax1.plot(epochs, [row["loss"] for row in trace], label="total", lw=1.8)
    ax1.plot(epochs, [row["ce"] for row in trace], label="answer nll", lw=1.2)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax1.legend(frameon=False)
    ax2.plot(epochs, [row["kl"] for row in trace], color="tab:red", lw=1.2)
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("kl divergence")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_corpus_split(summary: dict, path) -> None:
    """Question-type and modality splits of a generated corpus."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.2))
    qtypes = sorted(summary["by_qtype"])
    ax1.bar(qtypes, [summary["by_qtype"][q] for q in qtypes], color="tab:blue")
    ax1.set_ylabel("pairs")
    ax1.set_title("by question type", fontsize=10)
    ax1.tick_params(axis="x", labelrotation=20)
    mods = sorted(summary["by_modality"])
    ax2.bar(mods, [summary["by_modality"][m] for m in mods], color="tab:orange")
    ax2.set_title("by modality", fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_accuracy(reports: dict, path) -> None:
    """Grouped per-qtype accuracy bars, one group color per condition."""
    conditions = list(reports)
    qtypes = sorted({q for rep in reports.values() for q in rep.per_qtype})
    labels = qtypes + ["overall"]
    width = 0.8 / max(1, len(conditions))
    fig, ax = plt.subplots(figsize=(1.6 * len(labels) + 2, 3.4))
    for ci, cond in enumerate(conditions):
        rep = reports[cond]
        values = [
            rep.per_qtype[q].accuracy if q in rep.per_qtype else 0.0
            for q in qtypes
        ] + [rep.overall_accuracy]
        xs = [i + ci * width for i in range(len(labels))]
        ax.bar(xs, values, width=width, label=cond)
    ax.set_xticks([i + 0.4 - width / 2 for i in range(len(labels))])
    ax.set_xticklabels(labels, rotation=15)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("accuracy")
    ax.legend(frameon=False, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
