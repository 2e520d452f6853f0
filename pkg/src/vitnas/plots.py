"""Matplotlib renderings of the line-delimited run outputs.

Every report-producing CLI command drops a PNG next to its .jsonl so results
are viewable without extra tooling; the records themselves stay the source
of truth for external plotting.
"""

from __future__ import annotations


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def train_curves(log, out_path):
    """Loss per iteration/epoch plus probe-subnet accuracy trajectories."""
    plt = _plt()
    has_probes = any("probes" in e for e in log.epochs)
    fig, axes = plt.subplots(1, 2 if has_probes else 1,
                             figsize=(10 if has_probes else 6, 4))
    ax0 = axes[0] if has_probes else axes
    ax0.plot([r["iter"] for r in log.iterations],
             [r["loss"] for r in log.iterations],
             lw=0.5, alpha=0.4, label="iteration loss")
    epochs = [e["epoch"] + 1 for e in log.epochs]
    ax0.plot([e * len(log.iterations) / len(log.epochs) for e in epochs],
             [e["mean_loss"] for e in log.epochs],
             lw=2.0, color="C1", label="epoch mean")
    ax0.set_xlabel("iteration")
    ax0.set_ylabel("train loss")
    ax0.legend(fontsize=8)
    if has_probes:
        ax1 = axes[1]
        keys = sorted({k for e in log.epochs for k in e.get("probes", {})})
        for key in keys:
            xs = [e["epoch"] + 1 for e in log.epochs if "probes" in e]
            ys = [e["probes"][key] for e in log.epochs if "probes" in e]
            ax1.plot(xs, ys, marker="o", ms=3, label=key[:24])
        ax1.set_xlabel("epoch")
        ax1.set_ylabel("probe top-1 accuracy")
        ax1.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def search_progress(records, out_path):
    """Best/median fitness per generation and a params-vs-fitness scatter."""
    plt = _plt()
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(10, 4))
    by_gen = {}
    for r in records:
        by_gen.setdefault(r["generation"], []).append(r["fitness"])
    gens = sorted(by_gen)
    best, running = [], float("-inf")
    for g in gens:
        running = max(running, max(by_gen[g]))
        best.append(running)
    import numpy as np

    ax0.plot(gens, best, marker="o", label="best so far")
    ax0.plot(gens, [float(np.median(by_gen[g])) for g in gens],
             marker="s", label="generation median")
    ax0.set_xlabel("generation")
    ax0.set_ylabel("fitness")
    ax0.legend(fontsize=8)
    ax1.scatter([r["params"] for r in records], [r["fitness"] for r in records],
                c=[r["generation"] for r in records], s=8, cmap="viridis")
    ax1.set_xlabel("params")
    ax1.set_ylabel("fitness")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def eval_modes(report, out_path):
    """Bar chart comparing inherited / finetuned / from-scratch accuracy."""
    plt = _plt()
    modes = [m for m in ("inherited", "finetune", "scratch") if m in report]
    values = [report[m]["accuracy"] for m in modes]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.bar(modes, values, color=["C0", "C1", "C2"][: len(modes)])
    for i, v in enumerate(values):
        ax.text(i, v, f"{v:.3f}", ha="center", va="bottom", fontsize=9)
    ax.set_ylabel("top-1 accuracy")
    ax.set_ylim(0, 1.05)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
