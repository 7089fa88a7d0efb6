"""Coefficient samplers, reference solvers and dataset assembly.

Elliptic data live on the cell-centered lattice; the Dirichlet condition is
imposed on the domain boundary, half a cell outside the outermost centers.
Navier-Stokes data live on the periodic vertex lattice of the unit torus.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp

from .tensor import Field2D, cosine_expand, lattice_points, mode_indices, resample_linear

log = logging.getLogger(__name__)

TASKS = ("darcy-rough", "trigonometric", "ns", "inverse")

SeedLike = Union[int, np.random.SeedSequence, Sequence[int]]


class ConvergenceError(RuntimeError):
    pass


class CFLError(RuntimeError):
    pass


def sample_seed(master: int, index: int, stream: int = 0) -> np.random.SeedSequence:
    """Seed for sample ``index``; independent of how many samples are drawn."""
    return np.random.SeedSequence([int(master), int(index), int(stream)])


def _rng(seed: SeedLike) -> np.random.Generator:
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# Coefficient samplers
# ---------------------------------------------------------------------------

def neumann_eigenvalues(n: int, c: float) -> np.ndarray:
    """``pi^2 |k|^2 + c`` for cosine modes ``0 <= k1, k2 < n``."""
    k = np.arange(n)
    return np.pi ** 2 * (k[:, None] ** 2 + k[None, :] ** 2) + c


def sample_grf_neumann(c: float, grid: int, seed: SeedLike) -> Field2D:
    """Draw from N(0, (-Laplace + c)^-2) with zero-Neumann boundary conditions.

    Each cosine mode gets amplitude ``xi_k / (pi^2 |k|^2 + c)``.
    """
    if c <= 0:
        raise ValueError(f"c must be positive, got {c}")
    xi = _rng(seed).standard_normal((grid, grid))
    return cosine_expand(xi / neumann_eigenvalues(grid, c), grid)


def grf_neumann_site_variance(c: float, grid: int, i: int, j: int) -> float:
    """Exact pointwise variance of :func:`sample_grf_neumann` at site (i, j)."""
    x = lattice_points(grid)
    k = np.arange(grid)
    phi1 = np.where(k > 0, np.sqrt(2.0), 1.0) * np.cos(np.pi * k * x[i])
    phi2 = np.where(k > 0, np.sqrt(2.0), 1.0) * np.cos(np.pi * k * x[j])
    return float(np.sum(np.outer(phi1 ** 2, phi2 ** 2) / neumann_eigenvalues(grid, c) ** 2))


def psi_pushforward(g: Field2D, positive: float = 12.0, negative: float = 2.0) -> Field2D:
    """Two-phase map: ``g >= 0 -> 12``, ``g < 0 -> 2``."""
    return g.like(np.where(g.data >= 0, positive, negative).astype(float))


def trig_coefficient(x1, x2, ak: Sequence[float]):
    """Six-scale oscillatory product coefficient evaluated pointwise."""
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    out = np.ones(np.broadcast(x1, x2).shape)
    for a in ak:
        out = out * (1 + 0.5 * np.cos(a * np.pi * (x1 + x2))) * (1 + 0.5 * np.sin(a * np.pi * (x2 - 3 * x1)))
    return out


def draw_trig_frequencies(rng: np.random.Generator, scales: int = 6) -> np.ndarray:
    k = np.arange(1, scales + 1)
    lo = 2.0 ** (k - 1)
    return rng.uniform(lo, 1.5 * lo)


def sample_trig_coefficient(grid: int, seed: SeedLike) -> Tuple[Field2D, np.ndarray]:
    """Multiscale trigonometric coefficient on the cell lattice of ``[-1, 1]^2``."""
    ak = draw_trig_frequencies(_rng(seed))
    x = lattice_points(grid, 2.0) - 1.0
    x1, x2 = np.meshgrid(x, x, indexing="ij")
    return Field2D(trig_coefficient(x1, x2, ak), (2.0, 2.0), "cell", (-1.0, -1.0)), ak


# ---------------------------------------------------------------------------
# Elliptic solver
# ---------------------------------------------------------------------------

def _harmonic(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return 2.0 * a * b / (a + b)


def elliptic_matrix(a: Field2D) -> sp.csr_matrix:
    """Five-point flux discretization of ``-div(a grad u)`` with ``u = 0`` on the boundary.

    Interior faces use the harmonic mean of the two neighbouring cells;
    boundary faces sit half a cell away and use the adjacent cell value.
    Unknowns are ordered row-major over the ``(H, W)`` lattice.
    """
    coef = a.data[:, :, 0]
    h, w = coef.shape
    h1 = a.domain_length[0] / h
    h2 = a.domain_length[1] / w
    # face transmissibilities
    t1 = np.zeros((h + 1, w))
    t1[1:-1] = _harmonic(coef[:-1], coef[1:]) / h1 ** 2
    t1[0] = 2.0 * coef[0] / h1 ** 2
    t1[-1] = 2.0 * coef[-1] / h1 ** 2
    t2 = np.zeros((h, w + 1))
    t2[:, 1:-1] = _harmonic(coef[:, :-1], coef[:, 1:]) / h2 ** 2
    t2[:, 0] = 2.0 * coef[:, 0] / h2 ** 2
    t2[:, -1] = 2.0 * coef[:, -1] / h2 ** 2
    diag = t1[:-1] + t1[1:] + t2[:, :-1] + t2[:, 1:]
    idx = np.arange(h * w).reshape(h, w)
    rows = [idx.ravel()]
    cols = [idx.ravel()]
    vals = [diag.ravel()]
    for src, dst, t in ((idx[:-1], idx[1:], t1[1:-1]), (idx[:, :-1], idx[:, 1:], t2[:, 1:-1])):
        rows += [src.ravel(), dst.ravel()]
        cols += [dst.ravel(), src.ravel()]
        vals += [-t.ravel(), -t.ravel()]
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(h * w, h * w))


def pcg(A, b: np.ndarray, tol: float = 1e-10, maxiter: Optional[int] = None) -> Tuple[np.ndarray, int]:
    """Jacobi-preconditioned conjugate gradients to relative residual ``tol``."""
    n = b.size
    maxiter = maxiter or max(10 * n, 1000)
    bnorm = np.linalg.norm(b)
    x = np.zeros(n)
    if bnorm == 0:
        return x, 0
    inv_diag = 1.0 / A.diagonal()
    r = b.copy()
    z = inv_diag * r
    p = z.copy()
    rz = r @ z
    for it in range(1, maxiter + 1):
        Ap = A @ p
        alpha = rz / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        if np.linalg.norm(r) <= tol * bnorm:
            return x, it
        z = inv_diag * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise ConvergenceError(
        f"CG did not converge in {maxiter} iterations; relative residual {np.linalg.norm(r) / bnorm:.3e}")


def solve_elliptic_fd(a: Field2D, f: Optional[Field2D] = None, tol: float = 1e-10,
                      maxiter: Optional[int] = None) -> Field2D:
    """Solve ``-div(a grad u) = f`` with homogeneous Dirichlet data."""
    if np.any(a.data <= 0):
        raise ValueError("coefficient must be strictly positive")
    if tol <= 0:
        raise ValueError("tolerance must be positive")
    if f is None:
        f = a.like(np.ones_like(a.data))
    A = elliptic_matrix(a)
    u, iters = pcg(A, f.data[:, :, 0].ravel().astype(float), tol, maxiter)
    log.debug("elliptic solve %dx%d: %d CG iterations", a.height, a.width, iters)
    return a.like(u.reshape(a.height, a.width))


# ---------------------------------------------------------------------------
# Periodic fields and Navier-Stokes
# ---------------------------------------------------------------------------

def periodic_eigenvalues(n: int, shift: float = 49.0, scale: float = 7 ** 1.5,
                         power: float = 2.5) -> np.ndarray:
    """Covariance eigenvalues ``scale (4 pi^2 |k|^2 + shift)^-power`` in FFT order."""
    k = mode_indices(n)
    return scale * (4 * np.pi ** 2 * (k[:, None] ** 2 + k[None, :] ** 2) + shift) ** (-power)


def sample_grf_periodic(grid: int, seed: SeedLike, scale: float = 7 ** 1.5, shift: float = 49.0,
                        power: float = 2.5) -> Field2D:
    """Draw from N(0, scale (-Laplace + shift)^-power) on the unit torus.

    The field is ``sum_k c_k exp(2 pi i k.x)`` with ``E|c_k|^2`` equal to the
    covariance eigenvalue, so ``fft2(w)/N^2`` recovers ``c_k``.
    """
    lam = periodic_eigenvalues(grid, shift, scale, power)
    rng = _rng(seed)
    z = (rng.standard_normal((grid, grid)) + 1j * rng.standard_normal((grid, grid))) / np.sqrt(2.0)
    z_mirror = np.conj(np.roll(z[::-1, ::-1], (1, 1), axis=(0, 1)))
    # unit-variance Hermitian field; self-conjugate modes come out real, still unit variance
    herm = (z + z_mirror) / np.sqrt(2.0)
    coeffs = np.sqrt(lam) * herm * grid ** 2
    out = np.fft.ifft2(coeffs)
    residue = float(np.max(np.abs(out.imag)))
    if residue > 1e-10 * max(1.0, float(np.max(np.abs(out.real)))):
        raise ArithmeticError(f"periodic GRF imaginary residue {residue:.3e}")
    return Field2D(out.real, (1.0, 1.0), "vertex")


def paper_forcing(n: int) -> np.ndarray:
    """``0.1 (sin(2 pi (x1 + x2)) + cos(2 pi (x1 + x2)))`` on the vertex lattice."""
    x = lattice_points(n, 1.0, "vertex")
    s = x[:, None] + x[None, :]
    return 0.1 * (np.sin(2 * np.pi * s) + np.cos(2 * np.pi * s))


@dataclass
class NSTrajectory:
    w: np.ndarray  # (T+1, N, N) snapshots
    times: np.ndarray
    nu: float
    forcing: str
    seed: Optional[int] = None

    @property
    def snapshots(self) -> int:
        return self.w.shape[0]


class SpectralTorus:
    """Wavenumbers and spectral operators on the ``n x n`` unit torus."""

    def __init__(self, n: int):
        self.n = n
        k = mode_indices(n).astype(float)
        if n % 2 == 0:
            k_deriv = k.copy()
            k_deriv[n // 2] = 0.0  # odd derivative of the Nyquist mode is not representable
        else:
            k_deriv = k
        self.k1 = 2 * np.pi * k[:, None] * np.ones((1, n))
        self.k2 = 2 * np.pi * k[None, :] * np.ones((n, 1))
        self.d1 = 1j * 2 * np.pi * k_deriv[:, None] * np.ones((1, n))
        self.d2 = 1j * 2 * np.pi * k_deriv[None, :] * np.ones((n, 1))
        self.lap = -(self.k1 ** 2 + self.k2 ** 2)
        inv = np.zeros_like(self.lap)
        nz = self.lap != 0
        inv[nz] = -1.0 / self.lap[nz]
        self.inv_neg_lap = inv
        cut = n / 3.0  # 2/3 rule keeps |k| < n/3 per axis
        self.dealias = np.outer(np.abs(k) < cut, np.abs(k) < cut)

    def velocity(self, w_hat: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Velocity ``(d psi/dx2, -d psi/dx1)`` with ``-Laplace psi = w``, in spectral form."""
        psi = self.inv_neg_lap * w_hat
        return self.d2 * psi, -self.d1 * psi

    def divergence(self, u1_hat: np.ndarray, u2_hat: np.ndarray) -> np.ndarray:
        return np.real(np.fft.ifft2(self.d1 * u1_hat + self.d2 * u2_hat))

    def advection(self, w_hat: np.ndarray) -> Tuple[np.ndarray, float]:
        """Dealiased ``u . grad w`` in spectral form and the max speed."""
        u1h, u2h = self.velocity(w_hat)
        u1 = np.real(np.fft.ifft2(u1h))
        u2 = np.real(np.fft.ifft2(u2h))
        w1 = np.real(np.fft.ifft2(self.d1 * w_hat))
        w2 = np.real(np.fft.ifft2(self.d2 * w_hat))
        nl = np.fft.fft2(u1 * w1 + u2 * w2) * self.dealias
        nl[0, 0] = 0.0  # u . grad w = div(u w) has zero mean
        return nl, float(max(np.max(np.abs(u1)), np.max(np.abs(u2))))


def ns_solve(w0: Field2D, nu: float, T: int, dt: float = 1e-3, record_stride: Optional[int] = None,
             forcing: Union[str, np.ndarray, None] = "paper", cfl: float = 1.0,
             seed: Optional[int] = None) -> NSTrajectory:
    """Pseudo-spectral vorticity solver on the unit torus.

    Crank-Nicolson on viscosity, Adams-Bashforth 2 on advection (forward
    Euler for the first step), 2/3-rule dealiasing. Snapshots are taken
    every ``record_stride`` steps (default: once per unit time).
    """
    n = w0.height
    if w0.width != n:
        raise ValueError("Navier-Stokes solver expects a square lattice")
    steps_per_unit = int(round(1.0 / dt))
    if abs(steps_per_unit * dt - 1.0) > 1e-9:
        raise ValueError(f"dt={dt} must divide the unit time interval")
    stride = record_stride or steps_per_unit
    total = T * steps_per_unit
    op = SpectralTorus(n)
    if forcing is None or (isinstance(forcing, str) and forcing == "none"):
        f = np.zeros((n, n))
        fname = "none"
    elif isinstance(forcing, str):
        if forcing != "paper":
            raise ValueError(f"unknown forcing {forcing!r}")
        f = paper_forcing(n)
        fname = "paper"
    else:
        f = np.asarray(forcing, dtype=float).reshape(n, n)
        fname = "custom"
    f_hat = np.fft.fft2(f)
    f_hat[0, 0] = 0.0
    w_hat = np.fft.fft2(w0.data[:, :, 0])
    dx = 1.0 / n
    lhs = 1.0 - 0.5 * dt * nu * op.lap
    rhs_fac = 1.0 + 0.5 * dt * nu * op.lap
    snaps = [w0.data[:, :, 0].copy()]
    times = [0.0]
    prev_nl = None
    for step in range(1, total + 1):
        nl, umax = op.advection(w_hat)
        if umax * dt / dx > cfl:
            raise CFLError(f"CFL number {umax * dt / dx:.3f} exceeds {cfl} at step {step}")
        adv = nl if prev_nl is None else 1.5 * nl - 0.5 * prev_nl
        w_hat = (rhs_fac * w_hat + dt * (f_hat - adv)) / lhs
        prev_nl = nl
        if step % stride == 0:
            w = np.real(np.fft.ifft2(w_hat))
            if not np.all(np.isfinite(w)):
                raise FloatingPointError(f"non-finite vorticity at step {step}")
            snaps.append(w)
            times.append(step * dt)
    return NSTrajectory(np.stack(snaps), np.array(times), nu, fname, seed)


def enstrophy(w: np.ndarray) -> float:
    return 0.5 * float(np.sum(w ** 2))


# ---------------------------------------------------------------------------
# Noise and dataset assembly
# ---------------------------------------------------------------------------

def add_noise(u: Field2D, eps: float, seed: SeedLike) -> Field2D:
    """``u + eps * rms(u) * xi`` with i.i.d. standard normal ``xi``."""
    if eps < 0:
        raise ValueError("noise level must be nonnegative")
    if eps == 0:
        return u.like(u.data.copy())
    rms = np.sqrt(np.mean(u.data ** 2))
    xi = _rng(seed).standard_normal(u.data.shape)
    return u.like(u.data + eps * rms * xi)


@dataclass
class GenConfig:
    c: float = 20.0
    fine_res: Optional[int] = None  # None: task default
    eps: float = 0.0
    inverse_base: str = "darcy-rough"
    nu: float = 1e-3
    T: int = 20
    dt: float = 1e-3
    tol: float = 1e-10

    def fine_for(self, task: str, res: int) -> int:
        if self.fine_res:
            return self.fine_res
        return {"darcy-rough": 512, "trigonometric": 4 * res, "ns": res}.get(task, res)


@dataclass
class EllipticSample:
    a: Field2D
    u: Field2D
    f: Field2D
    kind: str
    meta: dict = field(default_factory=dict)


def elliptic_sample(task: str, res: int, cfg: GenConfig, seed: SeedLike) -> EllipticSample:
    """Generate one coefficient/solution pair, solved on the fine grid then resampled."""
    fine = cfg.fine_for(task, res)
    g = None
    if task == "darcy-rough":
        g = sample_grf_neumann(cfg.c, fine, seed)
        a = psi_pushforward(g)
        meta = {"c": cfg.c}
    elif task == "trigonometric":
        a, ak = sample_trig_coefficient(fine, seed)
        meta = {"a_k": ak.tolist()}
    else:
        raise ValueError(f"not an elliptic task: {task!r}")
    f = a.like(np.ones_like(a.data))
    u = solve_elliptic_fd(a, f, cfg.tol)
    if fine != res:
        u_out = resample_linear(u, res, res)
        if g is not None:
            # push the resampled Gaussian field forward so the phases stay exactly {2, 12}
            a_out = psi_pushforward(resample_linear(g, res, res))
        else:
            a_out = resample_linear(a, res, res)
    else:
        a_out, u_out = a, u
    return EllipticSample(a_out, u_out, a_out.like(np.ones_like(a_out.data)), task, meta)


def ns_sample(res: int, cfg: GenConfig, seed: SeedLike) -> NSTrajectory:
    fine = cfg.fine_for("ns", res)
    w0 = sample_grf_periodic(fine, seed)
    traj = ns_solve(w0, cfg.nu, cfg.T, cfg.dt)
    if fine != res:
        w = np.stack([resample_linear(Field2D(s, lattice="vertex"), res, res).data[:, :, 0]
                      for s in traj.w])
        traj = NSTrajectory(w, traj.times, traj.nu, traj.forcing, traj.seed)
    return traj


def make_dataset(task: str, n: int, res: int, cfg: Optional[GenConfig] = None, seed: int = 0,
                 first: int = 0, dtype=np.float64):
    """Assemble ``n`` samples with indices ``first .. first + n - 1``.

    Returns a :class:`dcno.io.DatasetContainer`. Sample ``i`` depends only
    on ``(seed, i)``.
    """
    from .io import DatasetContainer

    if n < 1:
        raise ValueError("sample count must be >= 1")
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; choose from {TASKS}")
    cfg = cfg or GenConfig()
    ins, outs = [], []
    domain = (1.0, 1.0)
    for i in range(first, first + n):
        if task == "ns":
            traj = ns_sample(res, cfg, sample_seed(seed, i))
            ins.append(traj.w[0][:, :, None])
            outs.append(np.moveaxis(traj.w, 0, -1))
        else:
            base = cfg.inverse_base if task == "inverse" else task
            s = elliptic_sample(base, res, cfg, sample_seed(seed, i))
            domain = s.a.domain_length
            if task == "inverse":
                noisy = add_noise(s.u, cfg.eps, sample_seed(seed, i, stream=1))
                ins.append(noisy.data)
                outs.append(s.a.data)
            else:
                ins.append(s.a.data)
                outs.append(s.u.data)
        log.info("generated %s sample %d", task, i)
    return DatasetContainer(np.stack(ins).astype(dtype), np.stack(outs).astype(dtype), domain)
