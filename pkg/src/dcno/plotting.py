"""Render diagnostics figures to image files with matplotlib's non-interactive backend."""
from __future__ import annotations

import os
from typing import List, Sequence

import numpy as np

from .diagnostics import ErrorSpectrumReport


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def render_dynamics(reports: Sequence[ErrorSpectrumReport], stem: str) -> List[str]:
    """Write ``<stem>_heatmap.png`` and ``<stem>_bands.png``; returns the paths."""
    plt = _pyplot()
    epochs = np.array([r.epoch for r in reports])
    width = max(len(r.density) for r in reports)
    dens = np.zeros((len(reports), width))
    for i, r in enumerate(reports):
        dens[i, : len(r.density)] = r.density
    paths = [f"{stem}_heatmap.png", f"{stem}_bands.png"]

    fig, ax = plt.subplots(figsize=(6, 4))
    im = ax.imshow(np.log10(dens.T + 1e-16), aspect="auto", origin="lower",
                   extent=[epochs[0] - 0.5, epochs[-1] + 0.5, -0.5, width - 0.5])
    ax.set_xlabel("epoch")
    ax.set_ylabel("mode radius r")
    fig.colorbar(im, ax=ax, label="log10 density")
    fig.savefig(paths[0], dpi=120, bbox_inches="tight")
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 4))
    low = np.array([r.low_err for r in reports])
    high = np.array([r.high_err for r in reports])
    ax.plot(epochs, low, "o-", label=f"|omega| <= {reports[0].threshold:.3g}")
    ax.plot(epochs, high, "s-", label=f"|omega| > {reports[0].threshold:.3g}")
    if np.all(np.nan_to_num(np.concatenate([low, high]), nan=1.0) > 0):
        ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("relative error")
    ax.legend()
    fig.savefig(paths[1], dpi=120, bbox_inches="tight")
    plt.close(fig)
    return [os.path.abspath(p) for p in paths]
