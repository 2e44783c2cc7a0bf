"""Report figures written as PNG files next to the CSV outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def loss_curve(curve, path) -> None:
    it = [c[0] for c in curve]
    fig, (ax_l, ax_p) = plt.subplots(1, 2, figsize=(9, 3.2))
    ax_l.plot(it, [c[1] for c in curve], lw=1)
    ax_l.set_xlabel("iteration")
    ax_l.set_ylabel("loss")
    ax_p.plot(it, [c[2] for c in curve], lw=1, color="tab:green")
    ax_p.set_xlabel("iteration")
    ax_p.set_ylabel("train PSNR (dB)")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def eval_summary(rows, path, examples=None) -> None:
    """``rows``: dicts with name/method/psnr; ``examples``: optional [(title, image), ...]."""
    methods = list(dict.fromkeys(r["method"] for r in rows))
    names = list(dict.fromkeys(r["name"] for r in rows))
    table = {(r["name"], r["method"]): r["psnr"] for r in rows}
    n_ex = len(examples or [])
    fig, axes = plt.subplots(1, 1 + n_ex, figsize=(5 + 2.2 * n_ex, 3.4), squeeze=False)
    ax = axes[0, 0]
    width = 0.8 / max(1, len(methods))
    x = np.arange(len(names))
    for k, m in enumerate(methods):
        ax.bar(x + k * width, [table.get((n, m), np.nan) for n in names], width, label=m)
    ax.set_xticks(x + width * (len(methods) - 1) / 2)
    ax.set_xticklabels(names, rotation=45, ha="right", fontsize=7)
    ax.set_ylabel("PSNR (dB)")
    ax.legend(fontsize=7)
    for a, (title, img) in zip(axes[0, 1:], examples or []):
        a.imshow(np.squeeze(img), cmap="gray", vmin=0, vmax=1)
        a.set_title(title, fontsize=8)
        a.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def panels(images: dict, path, cmap="gray") -> None:
    """One row of titled panels, each shown on its own value range."""
    fig, axes = plt.subplots(1, len(images), figsize=(2.3 * len(images), 2.6), squeeze=False)
    for ax, (title, img) in zip(axes[0], images.items()):
        ax.imshow(np.squeeze(img), cmap=cmap)
        ax.set_title(title, fontsize=9)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
