"""
Coupled systems ``H = H0 + V`` in the eigenbasis of ``H0``.

Two builders are provided: a mixed-field Ising chain split into a diagonal part
(ZZ bonds and longitudinal field) and a transverse-field coupling, and a banded
random ensemble whose off-diagonal variances follow
``E|V_{mu nu}|^2 = exp(-S(eps+)) f^2(eps+, delta)``.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

__all__ = [
    "CoupledSystem",
    "EnsembleProfile",
    "EntropyEstimate",
    "ConfigurationError",
    "build_ising_chain",
    "build_banded_ensemble",
    "flat_profile",
    "gaussian_profile",
    "estimate_entropy",
    "reflection_permutation",
    "gap_ratio",
    "save_system",
    "load_system",
]

MAX_ISING_SITES = 14
FORMAT_VERSION = 1


class ConfigurationError(ValueError):
    """Inconsistent builder input."""


@dataclass(frozen=True, eq=False)
class CoupledSystem:
    """Unperturbed energies, diagonal shifts and off-diagonal couplings.

    Attributes
    ----------
    a : ndarray, shape (dim,)
        Unperturbed energies, sorted ascending.
    vdiag : ndarray, shape (dim,)
        Diagonal matrix elements of the interaction.
    vcoupling : ndarray, shape (dim, dim)
        Hermitian off-diagonal interaction with an identically zero diagonal.
    label : str
    seed : int or None
    meta : dict
        Free-form JSON-serializable metadata (builder parameters, basis labels).
    """

    a: np.ndarray
    vdiag: np.ndarray
    vcoupling: np.ndarray
    label: str = ""
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        a = np.array(self.a, dtype=float)
        vd = np.array(self.vdiag, dtype=float)
        v = np.array(self.vcoupling)
        v = v.astype(complex if np.iscomplexobj(v) else float)
        n = a.size
        if a.ndim != 1 or n < 1:
            raise ValueError("a must be a non-empty 1-d array")
        if vd.shape != (n,) or v.shape != (n, n):
            raise ValueError(f"shape mismatch: a {a.shape}, vdiag {vd.shape}, vcoupling {v.shape}")
        if np.any(np.diff(a) < 0):
            raise ValueError("a must be sorted ascending")
        if np.max(np.abs(v - v.conj().T), initial=0.0) != 0.0:
            raise ValueError("vcoupling is not Hermitian")
        if np.any(np.diag(v) != 0):
            raise ValueError("vcoupling diagonal must be zero; put diagonal terms in vdiag")
        for arr in (a, vd, v):
            arr.flags.writeable = False
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "vdiag", vd)
        object.__setattr__(self, "vcoupling", v)

    @property
    def dim(self) -> int:
        return self.a.size

    @property
    def is_complex(self) -> bool:
        return np.iscomplexobj(self.vcoupling)

    def hamiltonian(self) -> np.ndarray:
        h = self.vcoupling.copy()
        h[np.diag_indices(self.dim)] += self.a + self.vdiag
        return h

    def norm(self) -> float:
        """Spectral-norm bound ``max|a + vdiag| + ||V||_2``."""
        return float(np.max(np.abs(self.a + self.vdiag)) + np.linalg.norm(self.vcoupling, 2))

    def scaled(self, s: float) -> "CoupledSystem":
        """Same ``H0`` with the interaction (diagonal and off-diagonal) scaled by ``s``."""
        return CoupledSystem(
            self.a, s * self.vdiag, s * self.vcoupling, f"{self.label}*{s:g}", self.seed, dict(self.meta)
        )

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.label.encode())
        for arr in (self.a, self.vdiag, self.vcoupling):
            h.update(str(arr.dtype).encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def to_dict(self) -> dict:
        iu, ju = np.nonzero(np.triu(self.vcoupling, 1))
        vals = self.vcoupling[iu, ju]
        coupling = {"i": iu.tolist(), "j": ju.tolist(), "re": np.real(vals).tolist()}
        if self.is_complex:
            coupling["im"] = np.imag(vals).tolist()
        return {
            "format": "resolvent_sc.CoupledSystem",
            "version": FORMAT_VERSION,
            "label": self.label,
            "seed": self.seed,
            "dim": self.dim,
            "a": self.a.tolist(),
            "vdiag": self.vdiag.tolist(),
            "coupling": coupling,
            "meta": self.meta,
            "content_hash": self.content_hash(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CoupledSystem":
        if d.get("format") != "resolvent_sc.CoupledSystem":
            raise ValueError("not a CoupledSystem record")
        n = int(d["dim"])
        c = d["coupling"]
        cplx = "im" in c
        v = np.zeros((n, n), dtype=complex if cplx else float)
        vals = np.asarray(c["re"], dtype=float)
        if cplx:
            vals = vals + 1j * np.asarray(c["im"], dtype=float)
        i = np.asarray(c["i"], dtype=int)
        j = np.asarray(c["j"], dtype=int)
        v[i, j] = vals
        v[j, i] = np.conj(vals)
        sys = cls(d["a"], d["vdiag"], v, d.get("label", ""), d.get("seed"), d.get("meta", {}))
        if "content_hash" in d and d["content_hash"] != sys.content_hash():
            raise ValueError("content hash mismatch: file is corrupt or was edited")
        return sys


def save_system(sys: CoupledSystem, path) -> str:
    """Write ``sys`` as JSON; returns the content hash."""
    Path(path).write_text(json.dumps(sys.to_dict(), sort_keys=True))
    return sys.content_hash()


def load_system(path) -> CoupledSystem:
    return CoupledSystem.from_dict(json.loads(Path(path).read_text()))


def _spin_table(n_sites: int) -> np.ndarray:
    idx = np.arange(2**n_sites)
    bits = (idx[:, None] >> np.arange(n_sites)[None, :]) & 1
    return 1 - 2 * bits


def build_ising_chain(n_sites: int, j_zz: float = 1.0, h_z: float = 0.5, g_x: float = 1.05) -> CoupledSystem:
    """Open mixed-field Ising chain ``sum J s^z s^z + h sum s^z + g sum s^x``.

    ``H0`` is the diagonal part (bonds plus longitudinal field) and ``V`` the
    transverse field, so ``vdiag = 0``. Basis states are reordered by ascending
    unperturbed energy; ``meta["basis"]`` keeps the original bit patterns.
    """
    if not 2 <= n_sites <= MAX_ISING_SITES:
        raise ValueError(f"n_sites must be in [2, {MAX_ISING_SITES}], got {n_sites}")
    dim = 2**n_sites
    s = _spin_table(n_sites)
    energy = j_zz * np.sum(s[:, :-1] * s[:, 1:], axis=1) + h_z * np.sum(s, axis=1)
    order = np.argsort(energy, kind="stable")
    where = np.empty(dim, dtype=int)
    where[order] = np.arange(dim)

    v = np.zeros((dim, dim))
    states = np.arange(dim)
    for k in range(n_sites):
        v[where[states], where[states ^ (1 << k)]] = g_x
    meta = {
        "model": "ising",
        "n_sites": n_sites,
        "j_zz": j_zz,
        "h_z": h_z,
        "g_x": g_x,
        "basis": order.tolist(),
    }
    label = f"ising(n={n_sites},J={j_zz:g},h={h_z:g},g={g_x:g})"
    return CoupledSystem(energy[order].astype(float), np.zeros(dim), v, label, None, meta)


def reflection_permutation(sys: CoupledSystem) -> np.ndarray | None:
    """Permutation of basis indices implementing chain reflection (Ising systems only)."""
    if sys.meta.get("model") != "ising":
        return None
    n = int(sys.meta["n_sites"])
    basis = np.asarray(sys.meta["basis"])
    rev = np.zeros_like(basis)
    for k in range(n):
        rev |= ((basis >> k) & 1) << (n - 1 - k)
    where = np.empty_like(basis)
    where[basis] = np.arange(basis.size)
    return where[rev]


def _ratios(ev, central):
    ev = np.sort(ev)
    m = ev.size
    cut = int(m * (1.0 - central) / 2)
    ev = ev[cut : m - cut]
    s = np.diff(ev)
    s1, s2 = s[1:], s[:-1]
    hi = np.maximum(s1, s2)
    ok = hi > 0
    return np.minimum(s1, s2)[ok] / hi[ok]


def gap_ratio(sys: CoupledSystem, central: float = 0.8) -> float:
    """Mean adjacent-gap ratio ``<r>`` over the central fraction of the spectrum.

    Reflection-symmetric Ising chains are split into their two reflection sectors
    first; mixing sectors would bias ``<r>`` toward the Poisson value.
    GOE reference is about 0.53, Poisson about 0.39.
    """
    h = sys.hamiltonian()
    perm = reflection_permutation(sys)
    if perm is None:
        return float(np.mean(_ratios(np.linalg.eigvalsh(h), central)))
    pooled = []
    for sign in (1.0, -1.0):
        cols = []
        seen = np.zeros(sys.dim, dtype=bool)
        for i in range(sys.dim):
            if seen[i]:
                continue
            j = perm[i]
            seen[i] = seen[j] = True
            vec = np.zeros(sys.dim)
            if i == j:
                if sign > 0:
                    vec[i] = 1.0
                    cols.append(vec)
            else:
                vec[i], vec[j] = 1.0 / np.sqrt(2), sign / np.sqrt(2)
                cols.append(vec)
        b = np.array(cols).T
        pooled.append(_ratios(np.linalg.eigvalsh(b.T @ h @ b), central))
    return float(np.mean(np.concatenate(pooled)))


@dataclass(frozen=True, eq=False)
class EnsembleProfile:
    """Tabulated log density of states ``S(eps)`` and smooth envelope ``f^2(eps, delta)``.

    ``energies``/``entropy`` tabulate ``S`` on its support; ``bandwidth_fn`` is a
    vectorized callable returning ``f^2 >= 0``. ``spec`` carries the JSON
    parameters the profile was built from, for serialization.
    """

    energies: np.ndarray
    entropy: np.ndarray
    bandwidth_fn: Callable[[np.ndarray, np.ndarray], np.ndarray]
    seed: int = 0
    spec: dict = field(default_factory=dict)

    def __post_init__(self):
        e = np.array(self.energies, dtype=float)
        s = np.array(self.entropy, dtype=float)
        if e.ndim != 1 or s.shape != e.shape or e.size < 2:
            raise ValueError("energies/entropy must be 1-d tables of equal length >= 2")
        if not np.all(np.diff(e) > 0):
            raise ValueError("energies must be strictly increasing")
        if not np.all(np.isfinite(s)):
            raise ValueError("S must be finite on its support")
        object.__setattr__(self, "energies", e)
        object.__setattr__(self, "entropy", s)

    def s_of(self, eps) -> np.ndarray:
        """``S(eps)``; clamped to the end values outside the table."""
        return np.interp(eps, self.energies, self.entropy)

    def density(self, eps) -> np.ndarray:
        """``exp(S(eps))``, zero outside the support."""
        eps = np.asarray(eps, dtype=float)
        inside = (eps >= self.energies[0]) & (eps <= self.energies[-1])
        return np.where(inside, np.exp(self.s_of(eps)), 0.0)

    def f2(self, eps, delta) -> np.ndarray:
        out = np.asarray(self.bandwidth_fn(np.asarray(eps, float), np.asarray(delta, float)), dtype=float)
        if np.any(out < 0):
            raise ValueError("f^2 must be non-negative")
        return np.broadcast_to(out, np.broadcast(np.asarray(eps), np.asarray(delta)).shape)

    def mass(self) -> float:
        return float(np.trapezoid(np.exp(self.entropy), self.energies))

    def coupling_variance(self, eps_mu, eps_nu) -> np.ndarray:
        """``E|V_{mu nu}|^2 = exp(-S(eps+)) f^2(eps+, delta)``."""
        eps_plus = 0.5 * (eps_mu + eps_nu)
        delta = eps_mu - eps_nu
        return np.exp(-self.s_of(eps_plus)) * self.f2(eps_plus, delta)


def flat_profile(dim: int, width: float, f2: float, seed: int = 0, center: float = 0.0) -> EnsembleProfile:
    """Uniform density ``dim / width`` on ``[center - width/2, center + width/2]``, constant ``f^2``."""
    e = np.linspace(center - width / 2, center + width / 2, 65)
    s = np.full(e.size, np.log(dim / width))
    spec = {"kind": "flat", "dim": dim, "width": width, "f2": f2, "seed": seed, "center": center}
    return EnsembleProfile(e, s, lambda eps, d: np.full(np.broadcast(eps, d).shape, float(f2)), seed, spec)


def gaussian_profile(
    dim: int, energy_width: float, band: float, strength: float, seed: int = 0, cutoff: float = 3.0
) -> EnsembleProfile:
    """Gaussian density of states of total mass ``dim`` and a Gaussian band envelope.

    ``S(eps) = log(dim N(eps; 0, energy_width))`` on ``|eps| <= cutoff * energy_width``
    (renormalized to mass ``dim``) and ``f^2(eps, delta) = strength exp(-delta^2 / 2 band^2)``.
    """
    e = np.linspace(-cutoff * energy_width, cutoff * energy_width, 257)
    rho = np.exp(-0.5 * (e / energy_width) ** 2)
    rho *= dim / np.trapezoid(rho, e)
    spec = {
        "kind": "gaussian",
        "dim": dim,
        "energy_width": energy_width,
        "band": band,
        "strength": strength,
        "seed": seed,
        "cutoff": cutoff,
    }

    def f2(eps, d):
        return strength * np.exp(-0.5 * (np.asarray(d) / band) ** 2) + 0.0 * np.asarray(eps)

    return EnsembleProfile(e, np.log(rho), f2, seed, spec)


def build_banded_ensemble(dim: int, profile: EnsembleProfile) -> CoupledSystem:
    """Random ``H0 + V`` with energies sampled from ``exp(S)`` and ETH-form couplings.

    Energies come from inverse-CDF sampling of ``exp(S)`` (then sorted); each
    ``V_{mu nu}`` (``mu < nu``) is ``sqrt(exp(-S(eps+)) f^2(eps+, delta)) R`` with
    ``R`` iid standard normal. Deterministic in ``profile.seed``.
    """
    if dim < 4:
        raise ValueError(f"dim must be >= 4, got {dim}")
    mass = profile.mass()
    if abs(mass - dim) > 0.05 * dim:
        raise ConfigurationError(f"profile carries {mass:.4g} states, expected {dim} (5% tolerance)")
    rng = np.random.default_rng(profile.seed)

    e = profile.energies
    rho = np.exp(profile.entropy)
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (rho[1:] + rho[:-1]) * np.diff(e))])
    cdf /= cdf[-1]
    a = np.sort(np.interp(rng.uniform(size=dim), cdf, e))

    var = profile.coupling_variance(a[:, None], a[None, :])
    r = rng.standard_normal((dim, dim))
    v = np.triu(np.sqrt(var) * r, 1)
    v = v + v.T
    meta = {"model": "ensemble", "profile": profile.spec}
    return CoupledSystem(a, np.zeros(dim), v, f"ensemble(dim={dim},seed={profile.seed})", profile.seed, meta)


@dataclass(frozen=True, eq=False)
class EntropyEstimate:
    """Binned ``S(lambda) = log(count in shell / window)`` on a uniform grid.

    Grid points whose shell is empty are excluded (``lambdas`` holds only the
    populated points); ``counts`` are the shell populations.
    """

    lambdas: np.ndarray
    s_of_lambda: np.ndarray
    window: float
    counts: np.ndarray
    spacing: float

    def density(self) -> np.ndarray:
        return np.exp(self.s_of_lambda)

    def s_at(self, x) -> np.ndarray:
        return np.interp(x, self.lambdas, self.s_of_lambda)


def mean_level_spacing(eigenvalues) -> float:
    ev = np.sort(np.asarray(eigenvalues, dtype=float))
    return float((ev[-1] - ev[0]) / (ev.size - 1))


def shell_grid(eigenvalues, window: float, oversample: int = 5):
    """Uniform grid of sub-bin centres and, per grid point, the shell made of
    ``oversample`` consecutive sub-bins centred on it.

    Returns ``(grid, sub_index, spacing, half)``: ``sub_index[n]`` is the sub-bin of
    level ``n``; the grid is padded by ``half`` sub-bins on both sides so every
    level lands in exactly ``oversample`` shells.
    """
    if oversample < 1 or oversample % 2 == 0:
        raise ValueError("oversample must be a positive odd integer")
    ev = np.asarray(eigenvalues, dtype=float)
    h = window / oversample
    half = oversample // 2
    lo = ev.min() - 0.5 * h
    nsub = int(np.floor((ev.max() - lo) / h)) + 1
    sub = np.clip(np.floor((ev - lo) / h).astype(int), 0, nsub - 1)
    grid = lo + h * (np.arange(-half, nsub + half) + 0.5)
    return grid, sub + half, h, half


def shell_sums(weights, sub_index, n_grid: int, oversample: int) -> np.ndarray:
    """Sum of ``weights`` over each shell of ``shell_grid``."""
    per_sub = np.bincount(sub_index, weights=weights, minlength=n_grid)
    kernel = np.ones(oversample)
    return np.convolve(per_sub, kernel, mode="same")


def estimate_entropy(eigenvalues, window: float, oversample: int = 5) -> EntropyEstimate:
    """Shell-count estimate of the log density of states.

    Raises ``ValueError`` unless ``window`` exceeds the mean level spacing.
    """
    ev = np.asarray(eigenvalues, dtype=float)
    if ev.size < 2:
        raise ValueError("need at least two levels")
    spacing = mean_level_spacing(ev)
    if not window > spacing:
        raise ValueError(f"window {window:g} must exceed the mean level spacing {spacing:g}")
    grid, sub, h, _ = shell_grid(ev, window, oversample)
    counts = shell_sums(np.ones(ev.size), sub, grid.size, oversample)
    keep = counts > 0.5
    counts = np.rint(counts[keep])
    return EntropyEstimate(grid[keep], np.log(counts / window), float(window), counts, h)
