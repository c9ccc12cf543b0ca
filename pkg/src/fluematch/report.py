"""Figures written next to the CSV reports (Agg backend, no display needed)."""
from __future__ import annotations

import io

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .tone import atomic_write_bytes  # noqa: E402

DPI = 120


def _save(fig, path):
    buf = io.BytesIO()
    # fixed metadata keeps reruns byte-identical
    fig.savefig(buf, format="png", dpi=DPI, metadata={"Software": None})
    plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())


def plot_traces(traces, path, title=""):
    """Best distance against iteration, one panel per search run."""
    n = max(1, len(traces))
    fig, axes = plt.subplots(1, n, figsize=(4.5 * n, 3.2), squeeze=False)
    for ax, (name, tr) in zip(axes[0], traces.items()):
        its = [0, *tr.iteration]
        ax.plot(its, [tr.d0, *tr.d_best], color="k", lw=1.2, drawstyle="steps-post")
        acc = [i for i, a in zip(tr.iteration, tr.accepted) if a]
        accd = [d for d, a in zip(tr.d_best, tr.accepted) if a]
        ax.plot(acc, accd, ".", color="tab:red", ms=3)
        ax.set_yscale("log" if tr.d0 > 0 and tr.final > 0 else "linear")
        ax.set_xlabel("iteration")
        ax.set_ylabel("best cost")
        ax.set_title(name, fontsize=9)
        ax.grid(alpha=0.3)
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    _save(fig, path)


def plot_checkpoints(rows, checkpoints, path, title=""):
    """Cost per note at each checkpoint. rows: {note: [cost at each checkpoint]}."""
    fig, ax = plt.subplots(figsize=(7, 3.5))
    notes = sorted(rows)
    markers = "osd^v<>"
    for j, k in enumerate(checkpoints):
        ax.plot(notes, [rows[n][j] for n in notes], marker=markers[j % len(markers)],
                ms=4, lw=0.8, label=f"{k} it.")
    ax.set_xlabel("note number")
    ax.set_ylabel("cost")
    if all(v > 0 for n in notes for v in rows[n]):
        ax.set_yscale("log")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    if title:
        ax.set_title(title, fontsize=10)
    fig.tight_layout()
    _save(fig, path)


def plot_training(history, path):
    """Training and validation MSE per epoch."""
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ep = [h[0] for h in history]
    ax.plot(ep, [h[1] for h in history], label="train")
    ax.plot(ep, [h[2] for h in history], label="validation")
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("MSE")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    _save(fig, path)
