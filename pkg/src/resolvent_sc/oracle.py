"""
Exact-diagonalization ground truth for resolvent-level quantities.

For a basis state ``phi = phi_idx`` with projector ``Q = 1 - |phi><phi|`` the
self-energy is the Feshbach form

    G(z) = V_{phi Q} (z - H_QQ)^{-1} V_{Q phi}

so that ``R(z) = <phi|(z - H)^{-1}|phi> = 1 / (z - a - vdiag - G(z))`` holds
exactly. It splits into an off-diagonal part (single cavity-resolvent sum) and
a cross-correlated part (all off-diagonal cavity-resolvent elements). The
cavity resolvent is computed from one eigendecomposition of ``H_QQ`` per index.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .model import CoupledSystem, estimate_entropy, mean_level_spacing, shell_grid, shell_sums
from .specfun import GridFunction

__all__ = [
    "Spectrum",
    "OverlapSet",
    "SelfEnergySample",
    "SmoothedDistribution",
    "PagReport",
    "PoleError",
    "Cavity",
    "diagonalize",
    "overlaps",
    "resolvent_exact",
    "resolvent_diagonals",
    "self_energy_exact",
    "self_energy_spectral",
    "cross_correlated_direct",
    "third_order_exact",
    "self_energy_trace",
    "smooth_distribution",
    "default_window",
    "verify_pag",
    "im_g_coherent",
]

log = logging.getLogger(__name__)

MAX_DIM = 2**14
DEFAULT_WINDOW_SPACINGS = 20.0
DEFAULT_ETA_FRACTION = 1e-6


class PoleError(ArithmeticError):
    """Evaluation point coincides with a pole on the real axis."""


@dataclass(frozen=True, eq=False)
class Spectrum:
    """Eigenvalues (ascending) and eigenvectors (columns) of ``H = H0 + V``."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    system_hash: str = ""

    @property
    def dim(self) -> int:
        return self.eigenvalues.size

    @property
    def span(self) -> float:
        return float(self.eigenvalues[-1] - self.eigenvalues[0])

    def mean_spacing(self) -> float:
        return mean_level_spacing(self.eigenvalues)


@dataclass(frozen=True, eq=False)
class OverlapSet:
    """``p_n = |<psi_n|phi_idx>|^2`` for all eigenstates ``n``."""

    basis_index: int
    p: np.ndarray

    def total(self) -> float:
        return float(np.sum(self.p))


@dataclass(frozen=True)
class SelfEnergySample:
    """Self-energy components at one complex energy ``z``.

    ``total = od + cc`` exactly; ``third`` is the leading cubic term of ``cc``.
    """

    z: complex
    total: complex
    od: complex
    cc: complex
    third: complex


def diagonalize(sys: CoupledSystem) -> Spectrum:
    """Dense Hermitian eigensolve of ``sys.hamiltonian()``."""
    if sys.dim > MAX_DIM:
        raise ValueError(f"dimension {sys.dim} exceeds dense limit {MAX_DIM}")
    h = sys.hamiltonian()
    if np.max(np.abs(h - h.conj().T), initial=0.0) != 0.0:
        raise ValueError("Hamiltonian is not Hermitian")
    lam, vec = np.linalg.eigh(h)
    for arr in (lam, vec):
        arr.flags.writeable = False
    return Spectrum(lam, vec, sys.content_hash())


def _check_index(idx, dim):
    if not 0 <= idx < dim:
        raise IndexError(f"basis index {idx} out of range for dimension {dim}")


def overlaps(spec: Spectrum, idx: int) -> OverlapSet:
    _check_index(idx, spec.dim)
    p = np.abs(spec.eigenvectors[idx, :]) ** 2
    p.flags.writeable = False
    return OverlapSet(idx, p)


def _pole_guard(z, poles, what):
    z = complex(z)
    if z.imag == 0.0:
        k = int(np.argmin(np.abs(poles - z.real)))
        if poles[k] == z.real:
            raise PoleError(f"z = {z.real!r} hits the {what} pole at index {k}")
    return z


def resolvent_exact(spec: Spectrum, idx: int, z) -> complex:
    """``R_idx(z) = sum_n p_n / (z - lambda_n)``."""
    z = _pole_guard(z, spec.eigenvalues, "eigenvalue")
    p = overlaps(spec, idx).p
    return complex(np.sum(p / (z - spec.eigenvalues)))


def resolvent_diagonals(spec: Spectrum, z) -> np.ndarray:
    """All diagonal resolvent elements ``R_nu(z)`` at once."""
    z = _pole_guard(z, spec.eigenvalues, "eigenvalue")
    w = np.abs(spec.eigenvectors) ** 2
    return w @ (1.0 / (z - spec.eigenvalues))


class Cavity:
    """Eigendecomposition of ``H_QQ`` (``H`` with basis state ``idx`` removed)."""

    def __init__(self, sys: CoupledSystem, idx: int):
        _check_index(idx, sys.dim)
        self.idx = idx
        self.others = np.delete(np.arange(sys.dim), idx)
        h = sys.hamiltonian()
        hqq = h[np.ix_(self.others, self.others)]
        self.kappa, self.vec = np.linalg.eigh(hqq)
        self.coupling = sys.vcoupling[self.others, idx]  # V_{Q phi}
        self.b = self.vec.conj().T @ self.coupling  # <k|V|phi>
        self.center = float(sys.a[idx] + sys.vdiag[idx])

    def total(self, z) -> complex:
        z = _pole_guard(z, self.kappa, "cavity")
        return complex(np.sum(np.abs(self.b) ** 2 / (z - self.kappa)))

    def diag(self, z) -> np.ndarray:
        """Cavity-resolvent diagonal ``[(z - H_QQ)^{-1}]_{nu nu}``."""
        z = _pole_guard(z, self.kappa, "cavity")
        return (np.abs(self.vec) ** 2) @ (1.0 / (z - self.kappa))

    def matrix(self, z) -> np.ndarray:
        z = _pole_guard(z, self.kappa, "cavity")
        return (self.vec / (z - self.kappa)) @ self.vec.conj().T

    def od(self, z) -> complex:
        return complex(np.sum(np.abs(self.coupling) ** 2 * self.diag(z)))


@lru_cache(maxsize=8)
def _cavity_cached(sys: CoupledSystem, idx: int) -> Cavity:
    return Cavity(sys, idx)


def cross_correlated_direct(sys: CoupledSystem, idx: int, z) -> complex:
    """Cross-correlated term as the explicit double sum over ``nu != xi``
    of ``V_{phi nu} G^Q_{nu xi}(z) V_{xi phi}``."""
    cav = _cavity_cached(sys, idx)
    g = cav.matrix(z)
    np.fill_diagonal(g, 0.0)
    v = cav.coupling
    return complex(np.conj(v) @ g @ v)


def third_order_exact(sys: CoupledSystem, spec: Spectrum, idx: int, z) -> complex:
    """Leading cubic term ``sum_{xi != nu} V_{phi xi} V_{xi nu} V_{nu phi} R_xi(z) R_nu(z)``
    with ``xi, nu != idx`` and exact diagonal resolvents."""
    r = resolvent_diagonals(spec, z)
    r = np.delete(r, idx)
    others = np.delete(np.arange(sys.dim), idx)
    v_out = sys.vcoupling[idx, others]
    v_in = sys.vcoupling[others, idx]
    inner = sys.vcoupling[np.ix_(others, others)]
    return complex((v_out * r) @ inner @ (v_in * r))


def self_energy_exact(sys: CoupledSystem, spec: Spectrum, idx: int, z) -> SelfEnergySample:
    """Exact self-energy and its off-diagonal / cross-correlated / cubic parts."""
    cav = _cavity_cached(sys, idx)
    total = cav.total(z)
    od = cav.od(z)
    third = third_order_exact(sys, spec, idx, z)
    return SelfEnergySample(complex(z), total, od, total - od, third)


def coherent_amplitudes(sys: CoupledSystem, spec: Spectrum, idx: int) -> np.ndarray:
    """``A_n = sum_{nu != idx} V_{idx nu} <phi_nu|psi_n>``."""
    _check_index(idx, sys.dim)
    return sys.vcoupling[idx, :] @ spec.eigenvectors


def self_energy_spectral(sys: CoupledSystem, spec: Spectrum, idx: int, z) -> complex:
    """Spectral sum ``sum_n |A_n|^2 / (z - lambda_n)`` over the full spectrum.

    This is not the Feshbach self-energy (its poles sit at the eigenvalues of
    ``H``, not of ``H_QQ``); it is the object whose residues ``im_g_coherent``
    reproduces.
    """
    z = _pole_guard(z, spec.eigenvalues, "eigenvalue")
    amp = coherent_amplitudes(sys, spec, idx)
    return complex(np.sum(np.abs(amp) ** 2 / (z - spec.eigenvalues)))


def self_energy_trace(sys: CoupledSystem, idx: int, lambdas, eta: float) -> np.ndarray:
    """Exact ``G(lambda - i eta)`` on a real grid (``Im >= 0`` convention)."""
    if not eta > 0:
        raise ValueError("eta must be positive")
    cav = _cavity_cached(sys, idx)
    lam = np.asarray(lambdas, dtype=float)
    z = lam[:, None] - 1j * eta
    return np.sum(np.abs(cav.b) ** 2 / (z - cav.kappa[None, :]), axis=1)


@dataclass(frozen=True, eq=False)
class SmoothedDistribution:
    """Shell-averaged distribution ``p(lambda)`` with its ``exp(S)`` on a uniform grid.

    ``lambdas`` holds only populated shells. ``spacing`` is the grid step, so
    ``sum(exp(S) p) * spacing`` is the binning-consistent normalization.
    """

    lambdas: np.ndarray
    p: np.ndarray
    s_of_lambda: np.ndarray
    window: float
    spacing: float
    basis_index: int = -1

    def density(self) -> np.ndarray:
        """``exp(S) p``, the quantity that integrates to one."""
        return np.exp(self.s_of_lambda) * self.p

    def normalization(self) -> float:
        return float(np.sum(self.density()) * self.spacing)

    def as_grid(self) -> GridFunction:
        return GridFunction(self.lambdas, self.p)

    def density_grid(self) -> GridFunction:
        return GridFunction(self.lambdas, self.density())

    def density_on(self, x) -> np.ndarray:
        """Density interpolated on an arbitrary grid (zero outside)."""
        full = np.arange(np.rint((self.lambdas[-1] - self.lambdas[0]) / self.spacing) + 1)
        full = self.lambdas[0] + self.spacing * full
        dens = np.zeros(full.size)
        pos = np.rint((self.lambdas - self.lambdas[0]) / self.spacing).astype(int)
        dens[pos] = self.density()
        return np.interp(x, full, dens, left=0.0, right=0.0)


def default_window(spec: Spectrum) -> float:
    return DEFAULT_WINDOW_SPACINGS * spec.mean_spacing()


def smooth_distribution(ov: OverlapSet, spec: Spectrum, window: float | None = None, oversample: int = 5):
    """Shell-averaged ``p(lambda) = (sum of p_m in shell) / (exp(S) window)``.

    Shells are ``oversample`` sub-bins wide and centred on the uniform grid, so
    every level contributes to exactly ``oversample`` grid points and the
    normalization ``sum(exp(S) p) * spacing`` is exactly the total overlap.
    ``exp(S)`` uses the same shells (see ``model.estimate_entropy``).
    """
    if window is None:
        window = default_window(spec)
    est = estimate_entropy(spec.eigenvalues, window, oversample)
    grid, sub, h, _ = shell_grid(spec.eigenvalues, window, oversample)
    mass = shell_sums(ov.p, sub, grid.size, oversample)
    counts = shell_sums(np.ones(spec.dim), sub, grid.size, oversample)
    keep = counts > 0.5
    p = mass[keep] / counts[keep]
    return SmoothedDistribution(grid[keep], p, est.s_of_lambda, float(window), h, ov.basis_index)


@dataclass(frozen=True)
class PagReport:
    """Reconstruction of ``p_n`` from the exact self-energy at ``lambda_n - i eta``.

    ``deviations[k]`` is the max absolute deviation at ``etas[k]``; relative
    deviations are taken over levels with ``p_n > 1e-12 max p``.
    ``binned_deviation`` uses the shell-count ``exp(S)`` instead of the
    eta-resolved density ``1 / (pi eta)``; it measures binning error and does
    not vanish as ``eta -> 0``.
    """

    basis_index: int
    etas: tuple
    deviations: tuple
    relative_deviations: tuple
    monotone: bool
    binned_deviation: float
    p_reconstructed: np.ndarray


def _pag_reconstruct(sys, spec, idx, eta):
    cav = _cavity_cached(sys, idx)
    out = np.empty(spec.dim)
    for n, lam in enumerate(spec.eigenvalues):
        z = lam - 1j * eta
        g = cav.total(z)
        # p = Im G' / (pi e^S ((lambda - a - vdiag - Re G)^2 + Im G'^2)), G' = G + i eta,
        # with e^S = 1 / (pi eta)
        im = g.imag + eta
        re = lam - cav.center - g.real
        out[n] = eta * im / (re * re + im * im)
    return out


def verify_pag(sys: CoupledSystem, spec: Spectrum, idx: int, eta: float | None = None, halvings: int = 3):
    """Check the overlap identity with the exact self-energy on an eta ladder.

    At eigenvalue ``lambda_n`` the level density resolved at width ``eta`` is
    ``1 / (pi eta)``; with that ``exp(S)`` the reconstruction error is
    ``O(eta^2)`` and shrinks monotonically as ``eta`` is halved.
    """
    if eta is None:
        eta = DEFAULT_ETA_FRACTION * max(spec.span, 1.0)
    p = overlaps(spec, idx).p
    mask = p > 1e-12 * p.max()
    etas, devs, rels = [], [], []
    rec = None
    for k in range(halvings + 1):
        e = eta / 2**k
        r = _pag_reconstruct(sys, spec, idx, e)
        if rec is None:
            rec = r
        d = np.abs(r - p)
        etas.append(e)
        devs.append(float(d.max()))
        rels.append(float(np.max(d[mask] / p[mask])))
    monotone = all(devs[k + 1] < devs[k] or devs[k] == 0.0 for k in range(halvings))

    binned = float("nan")
    if spec.dim > 2:
        window = default_window(spec)
        est = estimate_entropy(spec.eigenvalues, window)
        es = np.exp(est.s_at(spec.eigenvalues))
        binned_rec = rec * (1.0 / (np.pi * eta)) / es
        binned = float(np.max(np.abs(binned_rec - p)))
    return PagReport(idx, tuple(etas), tuple(devs), tuple(rels), monotone, binned, rec)


def im_g_coherent(sys: CoupledSystem, spec: Spectrum, idx: int, n: int, entropy: float | None = None) -> float:
    """``|sum_{nu != idx} V_{idx nu} <phi_nu|psi_n>|^2 exp(S(lambda_n))``.

    ``entropy`` is ``S(lambda_n)``; when omitted it is taken from shell counting
    with the default window. With ``entropy=0`` the bare residue is returned.
    """
    _check_index(n, spec.dim)
    amp = coherent_amplitudes(sys, spec, idx)[n]
    if entropy is None:
        est = estimate_entropy(spec.eigenvalues, default_window(spec))
        entropy = float(est.s_at(spec.eigenvalues[n]))
    return float(np.abs(amp) ** 2 * np.exp(entropy))
