"""Lattice fields, Fourier transforms and interpolation.

Array layout is channel-last: ``data[i, j, c]`` is channel ``c`` at the
lattice site with first coordinate index ``i`` (x1) and second index ``j``
(x2). Two lattice conventions are used:

* ``"cell"``: cell-centered points ``x_i = (i + 1/2) h`` on ``[0, L]``, used
  for elliptic data (the Neumann cosine basis lives naturally here).
* ``"vertex"``: periodic points ``x_i = i h`` without the duplicated endpoint,
  used for Navier-Stokes data.

The forward DFT is unnormalized and the inverse carries the ``1/(H W)``
factor, so ``sum |x|^2 == sum |fft2(x)|^2 / (H W)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Tuple, Union

import numpy as np

LATTICES = ("cell", "vertex")

# Largest lattice we are willing to index; guards int overflow in H*W*C.
_MAX_SITES = 2**40


class HermitianError(ValueError):
    """Raised when an inverse transform leaves an imaginary residue."""


@dataclass
class Field2D:
    """Real field on a 2-D lattice, stored as ``(H, W, C)``."""

    data: np.ndarray
    domain_length: Tuple[float, float] = (1.0, 1.0)
    lattice: str = "cell"
    origin: Tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3:
            raise ValueError(f"field data must be (H, W, C), got shape {data.shape}")
        self.data = data
        self.domain_length = tuple(float(v) for v in self.domain_length)
        if min(self.domain_length) <= 0:
            raise ValueError("domain lengths must be strictly positive")
        if self.lattice not in LATTICES:
            raise ValueError(f"unknown lattice {self.lattice!r}")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def coordinates(self) -> Tuple[np.ndarray, np.ndarray]:
        """Physical coordinates ``(x1, x2)`` of the lattice sites, each 1-D."""
        return (
            lattice_points(self.height, self.domain_length[0], self.lattice) + self.origin[0],
            lattice_points(self.width, self.domain_length[1], self.lattice) + self.origin[1],
        )

    def like(self, data: np.ndarray) -> "Field2D":
        return Field2D(data, self.domain_length, self.lattice, self.origin)


@dataclass
class Spectrum2D:
    """Complex DFT coefficients ``coeffs[k1, k2, c]`` in standard FFT order.

    Index 0 is the zero mode; index ``n`` maps to signed mode ``n`` for
    ``n < N/2`` and ``n - N`` otherwise.
    """

    coeffs: np.ndarray
    domain_length: Tuple[float, float] = (1.0, 1.0)
    lattice: str = "cell"
    origin: Tuple[float, float] = (0.0, 0.0)
    hermitian: bool = False

    def modes(self) -> Tuple[np.ndarray, np.ndarray]:
        h, w = self.coeffs.shape[:2]
        return mode_indices(h), mode_indices(w)

    def frequencies(self) -> Tuple[np.ndarray, np.ndarray]:
        """Physical angular frequencies ``omega_j = 2 pi k_j / L_j`` on the full grid."""
        k1, k2 = self.modes()
        w1 = 2 * np.pi * k1 / self.domain_length[0]
        w2 = 2 * np.pi * k2 / self.domain_length[1]
        return np.meshgrid(w1, w2, indexing="ij")

    def max_asymmetry(self) -> float:
        """Largest ``|c(k) - conj(c(-k))|`` over all modes and channels."""
        flipped = np.roll(self.coeffs[::-1, ::-1], shift=(1, 1), axis=(0, 1))
        return float(np.max(np.abs(self.coeffs - np.conj(flipped)), initial=0.0))


def mode_indices(n: int) -> np.ndarray:
    """Signed integer mode numbers in FFT order, ``[0, 1, ..., -1]``."""
    return np.rint(np.fft.fftfreq(n, d=1.0 / n)).astype(np.int64)


def lattice_points(n: int, length: float = 1.0, lattice: str = "cell") -> np.ndarray:
    h = length / n
    if lattice == "cell":
        return (np.arange(n) + 0.5) * h
    if lattice == "vertex":
        return np.arange(n) * h
    raise ValueError(f"unknown lattice {lattice!r}")


def _check_size(h: int, w: int, c: int = 1):
    if h < 1 or w < 1:
        raise ValueError("lattice sizes must be >= 1")
    if h * w * c > _MAX_SITES:
        raise OverflowError(f"lattice {h}x{w}x{c} exceeds the index space")


def fft2(field: Field2D) -> Spectrum2D:
    """Unnormalized forward DFT over the two lattice axes, per channel."""
    _check_size(field.height, field.width, field.channels)
    coeffs = np.fft.fft2(field.data, axes=(0, 1))
    return Spectrum2D(coeffs, field.domain_length, field.lattice, field.origin,
                      hermitian=not np.iscomplexobj(field.data))


def ifft2(spec: Spectrum2D, tol: float = 1e-10) -> Field2D:
    """Inverse DFT with the ``1/(H W)`` factor.

    For Hermitian-flagged spectra the imaginary residue is checked against
    ``tol`` (relative to the output magnitude) and discarded; otherwise the
    complex result is returned as is.
    """
    _check_size(*spec.coeffs.shape[:2])
    out = np.fft.ifft2(spec.coeffs, axes=(0, 1))
    if spec.hermitian:
        scale = max(float(np.max(np.abs(out.real), initial=0.0)), 1.0)
        residue = float(np.max(np.abs(out.imag), initial=0.0))
        if residue > tol * scale:
            raise HermitianError(f"imaginary residue {residue:.3e} exceeds tolerance {tol:.1e}")
        out = out.real
    return Field2D(out, spec.domain_length, spec.lattice, spec.origin)


def cosine_basis_1d(n: int, kmax: int) -> np.ndarray:
    """Neumann eigenfunctions on [0, 1] sampled at cell centers, shape ``(n, kmax)``.

    Column ``k`` is ``sqrt(2) cos(pi k x)`` for ``k > 0`` and 1 for ``k = 0``.
    """
    x = lattice_points(n, 1.0, "cell")
    k = np.arange(kmax)
    basis = np.cos(np.pi * np.outer(x, k))
    basis[:, 1:] *= np.sqrt(2.0)
    return basis


def cosine_expand(coeffs: Union[np.ndarray, Mapping[Tuple[int, int], float]],
                  grid: Union[int, Tuple[int, int]]) -> Field2D:
    """Synthesize ``sum_k c_k phi_k`` on the cell-centered unit-square lattice.

    ``coeffs`` is either a 2-D array indexed by ``(k1, k2)`` or a mapping
    from mode pairs to amplitudes. Mode indices must stay below the lattice
    size along their axis.
    """
    h, w = (grid, grid) if np.isscalar(grid) else grid
    if isinstance(coeffs, Mapping):
        if not coeffs:
            return Field2D(np.zeros((h, w, 1)))
        k1max = max(k[0] for k in coeffs) + 1
        k2max = max(k[1] for k in coeffs) + 1
        arr = np.zeros((k1max, k2max))
        for (k1, k2), value in coeffs.items():
            if k1 < 0 or k2 < 0:
                raise ValueError(f"cosine modes are nonnegative, got {(k1, k2)}")
            arr[k1, k2] = value
    else:
        arr = np.asarray(coeffs, dtype=float)
    if arr.shape[0] > h or arr.shape[1] > w:
        raise ValueError(
            f"cosine modes up to {(arr.shape[0] - 1, arr.shape[1] - 1)} exceed the "
            f"Nyquist limit of a {h}x{w} lattice")
    b1 = cosine_basis_1d(h, arr.shape[0])
    b2 = cosine_basis_1d(w, arr.shape[1])
    return Field2D(b1 @ arr @ b2.T)


def _interp_matrix(n_src: int, n_dst: int, lattice: str) -> np.ndarray:
    """Dense 1-D linear interpolation operator, shape ``(n_dst, n_src)``."""
    # target positions measured in source-index units
    dst = lattice_points(n_dst, 1.0, lattice) * n_src
    mat = np.zeros((n_dst, n_src))
    rows = np.arange(n_dst)
    if lattice == "vertex":
        pos = dst
        lo = np.floor(pos).astype(int)
        frac = pos - lo
        np.add.at(mat, (rows, lo % n_src), 1.0 - frac)
        np.add.at(mat, (rows, (lo + 1) % n_src), frac)
    else:
        if n_src == 1:
            mat[:, 0] = 1.0
            return mat
        pos = np.clip(dst - 0.5, 0.0, n_src - 1.0)
        lo = np.minimum(np.floor(pos).astype(int), n_src - 2)
        frac = pos - lo
        np.add.at(mat, (rows, lo), 1.0 - frac)
        np.add.at(mat, (rows, lo + 1), frac)
    return mat


def resample_linear(field: Field2D, target_h: int, target_w: int) -> Field2D:
    """Bilinear resampling onto a lattice of the same convention and extent.

    Cell-centered lattices clamp at the outermost centers; vertex lattices
    wrap periodically.
    """
    if target_h < 2 or target_w < 2:
        raise ValueError("target lattice sizes must be >= 2")
    if (target_h, target_w) == (field.height, field.width):
        return field.like(field.data.copy())
    a1 = _interp_matrix(field.height, target_h, field.lattice)
    a2 = _interp_matrix(field.width, target_w, field.lattice)
    out = np.einsum("ai,ijc,bj->abc", a1, field.data, a2, optimize=True)
    return field.like(out)
