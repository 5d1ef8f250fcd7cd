"""Figures written next to the key=value reports."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.2),
    "figure.dpi": 100,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
    "savefig.bbox": "tight",
    # fixed metadata keeps the PNG bytes reproducible
    "savefig.dpi": 100,
}


def _save(fig, path):
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def level_mse(report, path, labels=("level 1", "level 2", "FSQ")):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.bar(labels[:len(report)], report, color="#4c72b0")
        ax.set_ylabel("per-element MSE")
        ax.set_title("residual MSE after each quantization stage")
        return _save(fig, path)


def bucket_sizes(store, path):
    sizes = np.array(sorted(len(b) for b in store.edges.values()))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        bins = np.arange(1, sizes.max() + 2) if sizes.size else [1, 2]
        ax.hist(sizes, bins=bins, color="#55a868", log=True, align="left")
        ax.set_xlabel("items per SID bucket")
        ax.set_ylabel("buckets")
        return _save(fig, path)


def hit_rate_curve(hr_by_k: dict, path, label="macro"):
    ks = sorted(hr_by_k)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(ks, [hr_by_k[k] for k in ks], marker="o", label=label)
        ax.set_xlabel("K")
        ax.set_ylabel("HR@K")
        ax.set_ylim(0, 1)
        ax.legend()
        return _save(fig, path)


def loss_curve(history, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(np.arange(1, len(history) + 1), history, marker=".")
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean multi-task BCE")
        return _save(fig, path)


def mask_grid(mask, layout, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.6, 3.6))
        alpha = np.where(mask.allow, np.exp(np.where(mask.allow, mask.bias, 0.0)), 0.0)
        ax.imshow(alpha, cmap="Blues", vmin=0, vmax=1)
        for edge in (layout.n_in, layout.n_in + layout.n_emb):
            ax.axhline(edge - 0.5, color="k", lw=0.6)
            ax.axvline(edge - 0.5, color="k", lw=0.6)
        ax.set_xlabel("key position")
        ax.set_ylabel("query position")
        ax.grid(False)
        return _save(fig, path)
