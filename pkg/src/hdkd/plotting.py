"""Figures written next to the CSV reports (matplotlib, file output only)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path: str) -> str:
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_metrics(records: list, path: str) -> str:
    """Per-step loss terms and per-epoch accuracies from a metrics stream."""
    steps = [r for r in records if r.get("kind") == "step"]
    epochs = [r for r in records if r.get("kind") == "epoch"]
    fig, (ax_l, ax_a) = plt.subplots(1, 2, figsize=(10, 4))
    keys = [k for k in ("loss", "ce", "kl", "feat") if steps and k in steps[0]]
    for k in keys:
        ax_l.plot([r["step"] for r in steps], [r[k] for r in steps], label=k, lw=1)
    ax_l.set_xlabel("step")
    ax_l.set_ylabel("loss")
    if any(r.get("loss", 1) > 0 for r in steps):
        ax_l.set_yscale("log")
    if keys:
        ax_l.legend()
    for k in ("train_acc", "val_acc"):
        pts = [(r["epoch"], r[k]) for r in epochs if k in r]
        if pts:
            ax_a.plot(*zip(*pts), marker="o", label=k)
    ax_a.set_xlabel("epoch")
    ax_a.set_ylabel("accuracy")
    ax_a.set_ylim(0, 1)
    ax_a.legend()
    return _save(fig, path)


def plot_sweep(summary: list, path: str, rows: list | None = None) -> str:
    """Median plain vs distilled accuracy per subset cap; per-seed points if ``rows`` given."""
    sizes = [s[0] for s in summary]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(sizes, [s[1] for s in summary], marker="o", label="plain (median)")
    ax.plot(sizes, [s[2] for s in summary], marker="s", label="distilled (median)")
    if rows:
        ax.scatter([r.cap for r in rows], [r.plain for r in rows], s=10, alpha=0.4, color="C0")
        ax.scatter([r.cap for r in rows], [r.distilled for r in rows], s=10, alpha=0.4, color="C1")
    ax.set_xscale("log", base=2)
    ax.set_xticks(sizes)
    ax.set_xticklabels([str(s) for s in sizes])
    ax.set_xlabel("images per class")
    ax.set_ylabel("test accuracy")
    ax.legend()
    return _save(fig, path)


def plot_activation(amap: np.ndarray, path: str, image: np.ndarray | None = None) -> str:
    """The normalized activation map, beside the input image when one is given."""
    n = 2 if image is not None else 1
    fig, axes = plt.subplots(1, n, figsize=(4 * n, 4))
    axes = np.atleast_1d(axes)
    if image is not None:
        axes[0].imshow(np.clip(image.transpose(1, 2, 0), 0, 1))
        axes[0].set_title("input")
    im = axes[-1].imshow(amap, cmap="inferno", vmin=0, vmax=1)
    axes[-1].set_title(f"stage-3 activation {amap.shape[0]}x{amap.shape[1]}")
    fig.colorbar(im, ax=axes[-1], fraction=0.046)
    for ax in axes:
        ax.axis("off")
    return _save(fig, path)


def plot_stage_costs(rows: list, path: str) -> str:
    """Bar chart of per-stage parameters and FLOPs; ``rows`` are (stage, params, flops)."""
    names = [r[0] for r in rows]
    fig, (ax_p, ax_f) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax_p.bar(names, [r[1] / 1e6 for r in rows])
    ax_p.set_ylabel("params (M)")
    ax_f.bar(names, [r[2] / 1e9 for r in rows], color="C1")
    ax_f.set_ylabel("FLOPs (G)")
    return _save(fig, path)
