"""Report figures, rendered straight to PNG files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import INFRACTION_KINDS  # noqa: E402


def infraction_bars(summaries: dict[str, dict], path: str | Path) -> Path:
    """Grouped bars of infraction counts, one group per kind and one bar per mode."""
    modes = list(summaries)
    fig, ax = plt.subplots(figsize=(8, 3.5))
    width = 0.8 / max(len(modes), 1)
    for i, mode in enumerate(modes):
        counts = [summaries[mode]["infractions"].get(k, 0) for k in INFRACTION_KINDS]
        ax.bar([x + i * width for x in range(len(INFRACTION_KINDS))], counts, width, label=mode)
    ax.set_xticks([x + width * (len(modes) - 1) / 2 for x in range(len(INFRACTION_KINDS))])
    ax.set_xticklabels([k.replace("_", "\n") for k in INFRACTION_KINDS], fontsize=8)
    ax.set_ylabel("count")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return Path(path)


def score_bars(summaries: dict[str, dict], path: str | Path) -> Path:
    modes = list(summaries)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for j, metric in enumerate(("RC", "DS")):
        vals = [summaries[m][metric] for m in modes]
        ax.bar([x + j * 0.4 for x in range(len(modes))], vals, 0.4, label=metric)
    ax.set_xticks([x + 0.2 for x in range(len(modes))])
    ax.set_xticklabels(modes)
    ax.set_ylim(0, 105)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return Path(path)


def training_curve(curve: list, path: str | Path, window: int = 25) -> Path:
    """DQN episode return and rolling success rate."""
    import numpy as np

    ret = np.array([c[1] for c in curve], dtype=float)
    ok = np.array([c[2] for c in curve], dtype=float)
    k = np.ones(window) / window
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(ret, lw=0.6, alpha=0.5, label="return")
    ax.set_xlabel("episode")
    ax.set_ylabel("return")
    ax2 = ax.twinx()
    if len(ok) >= window:
        ax2.plot(np.arange(window - 1, len(ok)), np.convolve(ok, k, mode="valid"), color="C1", label="success")
    ax2.set_ylim(0, 1.05)
    ax2.set_ylabel("success rate")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return Path(path)
