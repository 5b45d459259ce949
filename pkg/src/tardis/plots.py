"""Figure rendering for the report outputs (written next to the CSV/JSONL)."""

from __future__ import annotations

import numpy as np


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def save_path_stats_figure(stats, out_path):
    """Per-cell mean chain length with the T/k - 1 reference line."""
    plt = _plt()
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(np.arange(stats.k), stats.per_cell_mean, color="#4878a8")
    expected = stats.T / stats.k - 1
    ax.axhline(expected, color="#b04030", linestyle="--",
               label=f"T/k - 1 = {expected:.2f}")
    ax.set_xlabel("memory cell")
    ax.set_ylabel("mean chain length")
    ax.set_title(f"{stats.model_kind}: T={stats.T}, k={stats.k}, {stats.n_sims} sims")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def save_probe_figure(rows, out_path):
    """Jacobian norms against the dependency gap, per read policy."""
    plt = _plt()
    fig, ax = plt.subplots(figsize=(7, 4))
    policies = sorted({r["policy"] for r in rows})
    for policy in policies:
        sel = sorted((r for r in rows if r["policy"] == policy), key=lambda r: r["gap"])
        gaps = [r["gap"] for r in sel]
        ax.semilogy(gaps, [max(r["norm_full"], 1e-300) for r in sel],
                    marker="o", label=f"{policy}: full")
        ax.semilogy(gaps, [max(r["norm_recurrent"], 1e-300) for r in sel],
                    marker="s", linestyle=":", label=f"{policy}: recurrent product")
    ax.set_xlabel("gap t1 - t0")
    ax.set_ylabel("spectral norm")
    ax.set_title("long-range Jacobian norms")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def save_training_curves(metrics, out_path):
    """Train loss and validation metric over updates."""
    plt = _plt()
    steps = [m["step"] for m in metrics]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.plot(steps, [m["train_loss"] for m in metrics], color="#4878a8")
    ax1.set_xlabel("update")
    ax1.set_ylabel("train loss")
    ax2.plot(steps, [m["valid_metric"] for m in metrics], color="#b04030")
    ax2.set_xlabel("update")
    ax2.set_ylabel("validation metric")
    for ax in (ax1, ax2):
        ax.set_yscale("log")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
