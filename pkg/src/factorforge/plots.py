"""Report figures rendered next to the delimited outputs.

All figures are derived views of the CSV/JSON artifacts; nothing downstream
reads them back.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def convergence_figure(records, path):
    """Objective and relative error per outer iteration from trace records
    (TraceRecord objects or dicts with the same keys)."""

    def get(rec, key):
        return rec[key] if isinstance(rec, dict) else getattr(rec, key)

    its = [get(r, "iteration") for r in records]
    obj = [get(r, "objective") for r in records]
    rel = [get(r, "rel_error") for r in records]
    fig, axes = plt.subplots(2, 1, figsize=(6.4, 6.4), sharex=True)
    axes[0].plot(its, obj, marker=".", color="tab:blue")
    axes[0].set_ylabel("objective")
    if min(obj, default=1.0) > 0.0:
        axes[0].set_yscale("log")
    axes[1].plot(its, rel, marker=".", color="tab:orange")
    axes[1].set_ylabel("relative error")
    axes[1].set_xlabel("outer iteration")
    if min(rel, default=1.0) > 0.0:
        axes[1].set_yscale("log")
    for ax in axes:
        ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def mae_figure(rows, path):
    """Mean test/train MAE per variant from completion rows (fold='mean')."""
    means = [r for r in rows if r["fold"] == "mean"]
    if not means:
        means = rows
    names = [r["variant"] for r in means]
    x = np.arange(len(names))
    width = 0.38
    fig, ax = plt.subplots(figsize=(1.6 + 1.1 * len(names), 4.2))
    ax.bar(x - width / 2, [r["train_mae"] for r in means], width, label="train MAE")
    ax.bar(x + width / 2, [r["test_mae"] for r in means], width, label="test MAE")
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=20, ha="right")
    ax.set_ylabel("mean absolute error")
    ax.grid(True, axis="y", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def atoms_figure(d, path, patch_shape=None, max_atoms=64):
    """Grid of learned dictionary atoms; 1-D profiles unless patch_shape
    reshapes each column into an image."""
    d = np.asarray(d, dtype=np.float64)
    count = min(d.shape[1], max_atoms)
    cols = int(np.ceil(np.sqrt(count)))
    rows = int(np.ceil(count / cols))
    fig, axes = plt.subplots(rows, cols, figsize=(1.4 * cols, 1.4 * rows),
                             squeeze=False)
    for idx in range(rows * cols):
        ax = axes[idx // cols][idx % cols]
        ax.set_xticks([])
        ax.set_yticks([])
        if idx >= count:
            ax.axis("off")
            continue
        atom = d[:, idx]
        if patch_shape and int(np.prod(patch_shape)) == atom.size:
            ax.imshow(atom.reshape(patch_shape), cmap="gray")
        else:
            ax.plot(atom, lw=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
