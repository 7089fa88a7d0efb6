"""Frequency-resolved error analysis: error spectra, annulus densities, band errors."""
from __future__ import annotations

import io as _io
import math
from dataclasses import dataclass
from typing import Iterable, List, Sequence, Tuple

import numpy as np

from .tensor import Field2D, mode_indices

DEFAULT_THRESHOLD = 10 * math.pi


def _arr(x) -> np.ndarray:
    d = x.data if isinstance(x, Field2D) else np.asarray(x)
    return d[:, :, None] if d.ndim == 2 else d


def _domain(x, domain_length):
    if domain_length is not None:
        return tuple(domain_length)
    return x.domain_length if isinstance(x, Field2D) else (1.0, 1.0)


def omega_magnitude(h: int, w: int, domain_length=(1.0, 1.0)) -> np.ndarray:
    """``|omega|`` on the full DFT grid in FFT order."""
    w1 = 2 * np.pi * mode_indices(h) / domain_length[0]
    w2 = 2 * np.pi * mode_indices(w) / domain_length[1]
    return np.sqrt(w1[:, None] ** 2 + w2[None, :] ** 2)


def error_spectrum(pred, target) -> np.ndarray:
    """``|fft2(pred - target)_i| / ||fft2(target)||_2`` with shape ``(H, W, C)``."""
    p, t = _arr(pred), _arr(target)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    denom = np.linalg.norm(np.fft.fft2(t, axes=(0, 1)).ravel())
    if denom == 0:
        raise ZeroDivisionError("target spectrum has zero norm")
    return np.abs(np.fft.fft2(p - t, axes=(0, 1))) / denom


@dataclass
class AnnulusDensity:
    radii: np.ndarray    # 0 .. r_max
    mass: np.ndarray     # sum of eps over each shell
    density: np.ndarray  # mass / (r + 1/2)


def mode_radius(h: int, w: int, domain_length=(1.0, 1.0)) -> np.ndarray:
    """``|omega| / (2 pi / L_1)``: the Euclidean mode radius in units of the first axis."""
    return omega_magnitude(h, w, domain_length) * domain_length[0] / (2 * np.pi)


def annulus_density(eps: np.ndarray, domain_length=(1.0, 1.0)) -> AnnulusDensity:
    """Bin ``eps`` by the floor of the mode radius; channels are pooled."""
    e = np.asarray(eps, dtype=float)
    if e.ndim == 3:
        e = e.sum(axis=2)
    h, w = e.shape
    # small guard so that exact integer radii computed via sqrt land in their own bin
    r = np.floor(mode_radius(h, w, domain_length) + 1e-9).astype(np.int64)
    r_max = int(r.max())
    mass = np.bincount(r.ravel(), weights=e.ravel(), minlength=r_max + 1)
    radii = np.arange(r_max + 1)
    return AnnulusDensity(radii, mass, mass / (radii + 0.5))


def _band_ratio(num: float, den: float, nonempty: bool) -> float:
    if not nonempty:
        return float("nan")
    if num == 0:
        return 0.0
    if den == 0:
        return float("inf")
    return math.sqrt(num / den)


def freq_split_error(pred, target, threshold: float = DEFAULT_THRESHOLD, domain_length=None,
                     normalization: str = "band") -> Tuple[float, float]:
    """Relative errors restricted to ``|omega| <= threshold`` and ``|omega| > threshold``.

    ``normalization="band"`` divides each band by the target norm in the same
    band; ``"total"`` divides both by the whole target norm, so that
    ``low**2 + high**2`` equals the squared relative L2 error. A band with no
    lattice modes is reported as NaN.
    """
    p, t = _arr(pred), _arr(target)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    if normalization not in ("band", "total"):
        raise ValueError("normalization must be 'band' or 'total'")
    dom = _domain(target, domain_length)
    low_mask = omega_magnitude(p.shape[0], p.shape[1], dom) <= threshold
    e2 = np.sum(np.abs(np.fft.fft2(p - t, axes=(0, 1))) ** 2, axis=2)
    t2 = np.sum(np.abs(np.fft.fft2(t, axes=(0, 1))) ** 2, axis=2)
    out = []
    for mask in (low_mask, ~low_mask):
        den = float(t2.sum()) if normalization == "total" else float(t2[mask].sum())
        out.append(_band_ratio(float(e2[mask].sum()), den, bool(mask.any())))
    return out[0], out[1]


@dataclass
class ErrorSpectrumReport:
    epoch: int
    radii: np.ndarray
    density: np.ndarray
    low_err: float
    high_err: float
    threshold: float = DEFAULT_THRESHOLD


def spectrum_report(preds: np.ndarray, targets: np.ndarray, epoch: int,
                    threshold: float = DEFAULT_THRESHOLD, domain_length=(1.0, 1.0)) -> ErrorSpectrumReport:
    """Sample-averaged annulus density and band errors for a batch ``(n, H, W, C)``."""
    if len(preds) == 0:
        raise ValueError("empty split")
    dens, lows, highs = [], [], []
    for p, t in zip(preds, targets):
        dens.append(annulus_density(error_spectrum(p, t), domain_length).density)
        lo, hi = freq_split_error(p, t, threshold, domain_length)
        lows.append(lo)
        highs.append(hi)
    d = np.mean(dens, axis=0)
    return ErrorSpectrumReport(epoch, np.arange(d.size), d, float(np.mean(lows)),
                               float(np.mean(highs)), threshold)


def track_dynamics(models: Iterable[Tuple[int, object]], inputs: np.ndarray, targets: np.ndarray,
                   threshold: float = DEFAULT_THRESHOLD, domain_length=(1.0, 1.0)) -> List[ErrorSpectrumReport]:
    """One report per ``(epoch, predictor)`` pair, evaluated on the same test split."""
    reports = []
    for epoch, model in models:
        preds = model.predict(inputs) if hasattr(model, "predict") else np.asarray(model(inputs))
        reports.append(spectrum_report(preds, targets, epoch, threshold, domain_length))
    if not reports:
        raise ValueError("need at least one checkpointed epoch")
    return reports


def dynamics_csv(reports: Sequence[ErrorSpectrumReport]) -> str:
    r_max = max(len(r.density) for r in reports) - 1
    buf = _io.StringIO()
    buf.write(",".join(["epoch"] + [f"r{i}" for i in range(r_max + 1)] + ["low_err", "high_err"]) + "\n")
    for rep in reports:
        dens = np.zeros(r_max + 1)
        dens[: len(rep.density)] = rep.density
        cells = [str(rep.epoch)] + [repr(float(v)) for v in dens] + [repr(rep.low_err), repr(rep.high_err)]
        buf.write(",".join(cells) + "\n")
    return buf.getvalue()


def read_dynamics_csv(text: str) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Parse a dynamics CSV into ``(epochs, density matrix, low, high)``."""
    lines = [ln for ln in text.strip().splitlines() if ln]
    rows = np.array([[float(c) for c in ln.split(",")] for ln in lines[1:]], ndmin=2)
    return rows[:, 0].astype(int), rows[:, 1:-2], rows[:, -2], rows[:, -1]


PLOT_SCRIPT = '''\
"""Render error-dynamics figures from {csv_name}."""
import numpy as np
import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

rows = np.loadtxt("{csv_name}", delimiter=",", skiprows=1, ndmin=2)
epochs, dens, low, high = rows[:, 0], rows[:, 1:-2], rows[:, -2], rows[:, -1]

fig, ax = plt.subplots(figsize=(6, 4))
im = ax.imshow(np.log10(dens.T + 1e-16), aspect="auto", origin="lower",
               extent=[epochs[0] - 0.5, epochs[-1] + 0.5, -0.5, dens.shape[1] - 0.5])
ax.set_xlabel("epoch")
ax.set_ylabel("mode radius r")
fig.colorbar(im, ax=ax, label="log10 density")
fig.savefig("{stem}_heatmap.png", dpi=120, bbox_inches="tight")

fig, ax = plt.subplots(figsize=(6, 4))
ax.semilogy(epochs, low, "o-", label="low frequency")
ax.semilogy(epochs, high, "s-", label="high frequency")
ax.set_xlabel("epoch")
ax.set_ylabel("relative error")
ax.legend()
fig.savefig("{stem}_bands.png", dpi=120, bbox_inches="tight")
'''


def plot_script(csv_name: str, stem: str) -> str:
    """Standalone matplotlib script that redraws the figures from the CSV."""
    return PLOT_SCRIPT.format(csv_name=csv_name, stem=stem)
