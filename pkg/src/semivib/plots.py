"""Figure rendering for the report paths; files only, Agg backend."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

METHOD_STYLE = {
    "pca": dict(color="#7f7f7f", marker="s"),
    "ae": dict(color="#1f77b4", marker="^"),
    "cnn": dict(color="#2ca02c", marker="d"),
    "m1": dict(color="#ff7f0e", marker="o"),
    "m2": dict(color="#d62728", marker="*"),
}


def sweep_figure(report, path, title=None):
    """Accuracy vs label budget, one errorbar line per method."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    methods = sorted({row.method for row in report.rows})
    for method in methods:
        rows = sorted((r for r in report.rows if r.method == method),
                      key=lambda r: r.n_labels)
        xs = [r.n_labels for r in rows]
        ys = [r.mean for r in rows]
        errs = [r.std for r in rows]
        style = METHOD_STYLE.get(method, {})
        ax.errorbar(xs, ys, yerr=errs, label=method, capsize=3, **style)
    ax.set_xscale("log")
    ax.set_xlabel("labeled training segments")
    ax.set_ylabel("test accuracy [%]")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def reconstruction_figure(originals, reconstructions, path, n_cols=4):
    """Original signals on the top row, reconstructions below."""
    n_cols = min(n_cols, len(originals))
    fig, axes = plt.subplots(2, n_cols, figsize=(3.2 * n_cols, 4.2),
                             sharex=True, squeeze=False)
    for j in range(n_cols):
        axes[0][j].plot(originals[j], lw=0.5, color="#1f77b4")
        axes[1][j].plot(reconstructions[j], lw=0.5, color="#d62728")
        axes[0][j].set_title(f"segment {j}", fontsize=9)
    axes[0][0].set_ylabel("original")
    axes[1][0].set_ylabel("reconstructed")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def training_curve_figure(rows, path):
    """Loss components per epoch from a training log (list of dataclasses)."""
    fig, ax = plt.subplots(figsize=(6, 3.8))
    epochs = [getattr(r, "epoch") for r in rows]
    fields = [f for f in ("recon", "kl", "l_labeled", "u_unlabeled", "cls", "total")
              if hasattr(rows[0], f)]
    for name in fields:
        ax.plot(epochs, [getattr(r, name) for r in rows], label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss component")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
