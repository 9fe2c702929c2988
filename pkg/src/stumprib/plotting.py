"""Report figures. Uses the object-oriented matplotlib API so no GUI backend is touched."""

from __future__ import annotations

import math
from collections import defaultdict

import numpy as np
from matplotlib.figure import Figure

from .rlma import STUMP_THRESHOLD_MM

STUMP_COLOR = "tab:orange"
REGULAR_COLOR = "tab:blue"
PNG_METADATA = {"Software": None}


def _save(fig: Figure, path) -> None:
    fig.savefig(path, dpi=120, metadata=PNG_METADATA)


def _split(records):
    sr = [r for r in records if r.is_stump]
    reg = [r for r in records if not r.is_stump]
    return sr, reg


def plot_feature_scatter(records, path) -> None:
    """Volume-to-length ratio against PDRC, stump ribs in orange."""
    fig = Figure(figsize=(6, 4.5))
    ax = fig.add_subplot()
    sr, reg = _split(records)
    for group, color, name in ((reg, REGULAR_COLOR, "regular"), (sr, STUMP_COLOR, "stump")):
        if group:
            ax.scatter([r.volume_length_ratio for r in group], [r.pdrc for r in group], s=10, c=color, label=name, alpha=0.7)
    ax.set_xlabel("volume / length (mm$^3$/mm)")
    ax.set_ylabel("PDRC (mm)")
    if records:
        ax.legend(frameon=False)
    fig.tight_layout()
    _save(fig, path)


def plot_first_direction(records, path) -> None:
    """Components of the first path direction (2-PPR): posterior vs inferior and right vs inferior."""
    fig = Figure(figsize=(9, 4))
    ax_pi, ax_ri = fig.subplots(1, 2)
    sr, reg = _split([r for r in records if len(r.ppr)])
    for group, color, name in ((reg, REGULAR_COLOR, "regular"), (sr, STUMP_COLOR, "stump")):
        if not group:
            continue
        d = np.array([r.ppr[0] for r in group])
        ax_pi.scatter(-d[:, 1], -d[:, 2], s=10, c=color, alpha=0.7, label=name)
        ax_ri.scatter(d[:, 0], -d[:, 2], s=10, c=color, alpha=0.7, label=name)
    ax_pi.set_xlabel("posterior")
    ax_pi.set_ylabel("inferior")
    ax_ri.set_xlabel("right")
    ax_ri.set_ylabel("inferior")
    if records:
        ax_ri.legend(frameon=False)
    fig.tight_layout()
    _save(fig, path)


def plot_threshold_sweep(points, path, reference_mm: float = STUMP_THRESHOLD_MM) -> None:
    curves = defaultdict(list)
    for p in points:
        curves[p.feature_set].append((p.threshold_mm, math.nan if p.mean_f1 is None else p.mean_f1))
    fig = Figure(figsize=(7, 4))
    ax = fig.add_subplot()
    for name, pts in curves.items():
        pts.sort()
        ax.plot([t for t, _ in pts], [f for _, f in pts], marker="o", ms=3, label=name)
    ax.axvline(reference_mm, color="black", ls="--", lw=1)
    ax.set_xlabel("stump rib threshold (mm)")
    ax.set_ylabel("mean F1")
    ax.set_ylim(0, 1.02)
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def plot_experiments(results, path) -> None:
    """Grouped bars of mean F1 (with std) per feature set and kernel."""
    sets = list(dict.fromkeys(r.feature_set for r in results))
    kernels = list(dict.fromkeys(r.kernel for r in results))
    width = 0.8 / max(len(kernels), 1)
    fig = Figure(figsize=(8, 4))
    ax = fig.add_subplot()
    x = np.arange(len(sets))
    for k_i, kernel in enumerate(kernels):
        by_set = {r.feature_set: r for r in results if r.kernel == kernel}
        means = [by_set[s].mean if s in by_set else math.nan for s in sets]
        stds = [by_set[s].std if s in by_set else math.nan for s in sets]
        ax.bar(x + k_i * width, means, width, yerr=stds, label=kernel, capsize=2)
    ax.set_xticks(x + width * (len(kernels) - 1) / 2, sets, rotation=20, fontsize=8)
    ax.set_ylabel("mean F1")
    ax.set_ylim(0, 1.05)
    ax.legend(frameon=False)
    fig.tight_layout()
    _save(fig, path)
