"""Static figures written next to the tabular outputs (PNG, no timestamps)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_SAVE = {"dpi": 120, "metadata": {"Software": None}}
_COLORS = {"VALIDATED": "#1b7837", "CONDITIONAL": "#d9a400", "REJECTED": "#b2182b"}


def forest_plot(rows, path, title="Candidate associations"):
    """Horizontal forest plot.

    ``rows`` holds (name, rho, ci_low, ci_high, status) tuples, drawn top to
    bottom in the given order.
    """
    rows = list(rows)
    fig, ax = plt.subplots(figsize=(6.5, 0.35 * max(len(rows), 1) + 1.4))
    if not rows:
        ax.text(0.5, 0.5, "no candidates to plot", ha="center", va="center",
                transform=ax.transAxes)
        ax.set_axis_off()
    else:
        ypos = np.arange(len(rows))[::-1]
        for yv, (name, rho, lo, hi, status) in zip(ypos, rows):
            color = _COLORS.get(status, "0.3")
            if lo is not None and hi is not None and np.isfinite([lo, hi]).all():
                ax.plot([lo, hi], [yv, yv], color=color, lw=1.6)
            ax.plot(rho, yv, "o", color=color, ms=5)
        ax.axvline(0, color="0.5", lw=0.8, ls="--")
        ax.set_yticks(ypos)
        ax.set_yticklabels([r[0] for r in rows], fontsize=8)
        ax.set_xlabel("Spearman rho (95% bootstrap CI)")
    ax.set_title(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)
    return path


def robustness_plot(report, path):
    """Mean delta vs baseline per metric for the checked and random-pruned conditions."""
    metrics = list(report.deltas["checked"])
    x = np.arange(len(metrics))
    fig, ax = plt.subplots(figsize=(7, 3.6))
    for off, cond, color in ((-0.18, "checked", "#2166ac"), (0.18, "random_pruned", "0.6")):
        means = np.array([np.mean(report.deltas[cond][m]) for m in metrics])
        ci = np.array([report.delta_ci[cond][m] for m in metrics])
        err = np.abs(np.vstack([means - ci[:, 0], ci[:, 1] - means]))
        ax.bar(x + off, means, width=0.34, color=color, label=cond.replace("_", " "),
               yerr=err, capsize=3)
    ax.axhline(0, color="k", lw=0.7)
    ax.set_xticks(x)
    ax.set_xticklabels([m.replace("_", " ") for m in metrics], fontsize=8)
    ax.set_ylabel("delta vs baseline")
    ax.set_title(f"Held-out robustness ({report.dataset}, {len(report.seeds)} seeds)", fontsize=10)
    ax.legend(fontsize=8, frameon=False)
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)
    return path
