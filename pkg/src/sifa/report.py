"""Matplotlib figures rendered next to the delimited outputs."""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _read_metrics(path):
    rows = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.startswith("#"):
                continue
            rows.append(line.strip())
    rd = csv.DictReader(rows)
    return [(int(r["epoch"]), float(r["train_loss"]), float(r["test_acc"]),
             float(r["lr"])) for r in rd]


def save_metrics_figure(metrics_csv, out_png):
    """Loss and accuracy curves from a metrics log."""
    data = _read_metrics(metrics_csv)
    epochs = [r[0] for r in data]
    loss = [r[1] for r in data]
    acc = [r[2] for r in data]
    fig, ax1 = plt.subplots(figsize=(6, 3.6))
    ax1.plot(epochs, loss, "o-", color="tab:red", label="train loss")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("train loss", color="tab:red")
    ax1.tick_params(axis="y", labelcolor="tab:red")
    ax2 = ax1.twinx()
    ax2.plot(epochs, acc, "s-", color="tab:blue", label="test accuracy")
    ax2.set_ylabel("test accuracy", color="tab:blue")
    ax2.set_ylim(0, 1)
    ax2.tick_params(axis="y", labelcolor="tab:blue")
    ax2.axhline(1 / 8, color="gray", lw=0.8, ls="--")
    fig.tight_layout()
    fig.savefig(out_png, dpi=150)
    plt.close(fig)


def save_attention_figure(clip, t, query_xy, rows, cols, weights, msm, out_png):
    """Query frame, sampled points in the next frame, and the saliency map.

    `clip` is the raw (C,L,H,W) input array; panels show channel 0. The
    top-3 weighted samples are linked back to the query location.
    """
    x, y = query_xy
    l = clip.shape[1]
    t_next = min(t + 1, l - 1)
    panels = 3 if msm is not None else 2
    fig, axes = plt.subplots(1, panels, figsize=(3.2 * panels, 3.4))
    ax = axes[0]
    ax.imshow(clip[0, t], cmap="gray", interpolation="nearest")
    ax.plot(y, x, "o", color="lime", ms=8)
    ax.set_title(f"frame {t} query")
    ax = axes[1]
    ax.imshow(clip[0, t_next], cmap="gray", interpolation="nearest")
    sc = ax.scatter(cols, rows, c=weights, cmap="hot", s=36,
                    edgecolors="k", linewidths=0.4)
    for g in np.argsort(weights)[-3:]:
        ax.plot([y, cols[g]], [x, rows[g]], color="violet", lw=1.0)
    fig.colorbar(sc, ax=ax, fraction=0.046)
    ax.set_title(f"frame {t_next} samples")
    if msm is not None:
        ax = axes[2]
        im = ax.imshow(msm[t].mean(axis=0), cmap="viridis",
                       interpolation="nearest")
        fig.colorbar(im, ax=ax, fraction=0.046)
        ax.set_title("motion saliency (mean)")
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(out_png, dpi=150)
    plt.close(fig)


def save_ablation_figure(summary_rows, out_png):
    """Bar chart of per-config mean accuracy with per-seed points.

    `summary_rows` maps config label -> list of per-seed accuracies.
    """
    labels = list(summary_rows.keys())
    fig, ax = plt.subplots(figsize=(5.2, 3.4))
    for i, lab in enumerate(labels):
        accs = summary_rows[lab]
        ax.bar(i, float(np.mean(accs)), width=0.6, color="tab:blue", alpha=0.6)
        ax.plot([i] * len(accs), accs, "k.", ms=6)
    ax.axhline(1 / 8, color="gray", lw=0.8, ls="--", label="chance")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=15, ha="right")
    ax.set_ylabel("test accuracy")
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_png, dpi=150)
    plt.close(fig)
