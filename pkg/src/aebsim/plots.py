"""Static SVG charts (matplotlib, Agg backend, no display needed).

SVG output is made byte-stable by fixing the hash salt used for element ids
and dropping the creation date from the metadata.
"""
from __future__ import annotations

from pathlib import Path
from typing import Any, Dict, List, Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

matplotlib.rcParams["svg.hashsalt"] = "aebsim"
matplotlib.rcParams["svg.fonttype"] = "none"

_META = {"Date": None, "Creator": "aebsim"}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, format="svg", metadata=_META)
    plt.close(fig)
    return path


def plot_rates(rows: Sequence[Mapping[str, Any]], conditions: Sequence[str], path) -> Path:
    """Grouped bars of collision and false-EB rates per condition, pooled over
    families, with 95% Wilson intervals."""
    pooled = {r["condition"]: r for r in rows if r["family"] == "ALL"}
    labels = [c for c in conditions if c in pooled]
    x = np.arange(len(labels))
    w = 0.38
    fig, ax = plt.subplots(figsize=(max(6.0, 0.7 * len(labels) + 2), 4.0))
    for off, key, colour in ((-w / 2, "collision", "#b2182b"), (w / 2, "false_eb", "#2166ac")):
        rate = np.array([pooled[c][f"{key}_rate"] for c in labels])
        lo = np.array([pooled[c][f"{key}_ci_lo"] for c in labels])
        hi = np.array([pooled[c][f"{key}_ci_hi"] for c in labels])
        ax.bar(x + off, rate, w, color=colour, label=key.replace("_", " ") + " rate",
               yerr=[(rate - lo).tolist(), (hi - rate).tolist()], capsize=2)  # lists: ndarray rows trip a numpy deprecation
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=35, ha="right")
    ax.set_ylabel("fraction of runs")
    ax.set_ylim(0, 1)
    ax.legend(frameon=False)
    ax.set_title("Collision and false emergency braking rates")
    fig.tight_layout()
    return _save(fig, path)


def plot_distributions(records: Sequence[Any], conditions: Sequence[str], path) -> Path:
    """Box plots of per-run peak deceleration and peak jerk per condition."""
    by: Dict[str, List[Any]] = {c: [] for c in conditions}
    for r in records:
        if r.ok and r.condition in by:
            by[r.condition].append(r.metrics)
    labels = [c for c in conditions if by[c]]
    fig, axes = plt.subplots(1, 2, figsize=(max(8.0, 1.1 * len(labels) + 3), 4.0))
    for ax, name, unit in ((axes[0], "peak_decel", "m/s²"), (axes[1], "peak_jerk", "m/s³")):
        data = [[getattr(m, name) for m in by[c]] for c in labels]
        if data:
            ax.boxplot(data, showfliers=False)
        ax.set_xticks(range(1, len(labels) + 1))
        ax.set_xticklabels(labels, rotation=35, ha="right")
        ax.set_ylabel(f"{name.replace('_', ' ')} [{unit}]")
    fig.suptitle("Braking intensity and jerk per run")
    fig.tight_layout()
    return _save(fig, path)


def plot_trace(trace, path) -> Path:
    """Speed, commanded/realised acceleration and gaps of one run."""
    c = trace.columns
    t = np.asarray(c["t"])
    fig, axes = plt.subplots(3, 1, figsize=(8, 7), sharex=True)
    axes[0].plot(t, c["v"], color="k")
    axes[0].set_ylabel("speed [m/s]")
    axes[1].plot(t, c["a_cmd"], label="commanded", lw=1)
    axes[1].plot(t, c["a_realized"], label="realised", lw=1)
    eb = np.asarray(c["eb_active"], dtype=bool)
    if eb.any():
        axes[1].fill_between(t, -10, 3, where=eb, color="#b2182b", alpha=0.15, step="post", label="EB")
    axes[1].set_ylim(-10, 3)
    axes[1].set_ylabel("accel [m/s²]")
    axes[1].legend(frameon=False, fontsize=8)
    truth = np.where(np.isfinite(c["truth_gap"]), c["truth_gap"], np.nan)
    perc = np.where(np.isfinite(c["perceived_gap"]), c["perceived_gap"], np.nan)
    axes[2].plot(t, truth, label="true gap", lw=1)
    axes[2].plot(t, perc, ".", ms=2, label="perceived gap")
    att = np.asarray(c["attack_active"], dtype=bool)
    if att.any():
        top = np.nanmax(truth) if np.isfinite(truth).any() else 1.0
        axes[2].fill_between(t, 0, top, where=att, color="#fdb863", alpha=0.3, step="post", label="attack")
    axes[2].set_ylabel("gap [m]")
    axes[2].set_xlabel("time [s]")
    axes[2].legend(frameon=False, fontsize=8)
    m = trace.meta
    fig.suptitle(f"{m.get('family')} seed {m.get('seed')} / {m.get('condition')}")
    fig.tight_layout()
    return _save(fig, path)
