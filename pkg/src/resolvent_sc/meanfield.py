"""
Grid solver for the mean-field self-consistency loop

    p  ->  Im G(lambda)/pi = sum_t W_st rho_t(lambda)      (rho_t = e^S p_t)
       ->  Re G = H[Im G]
       ->  rho_s = (1/pi) Im G / ((lambda - c_s - Re G)^2 + (Im G)^2)

Basis states are grouped into shells sharing one distribution curve. ``W_st``
is the summed squared coupling from one member of shell ``s`` to all members
of shell ``t``. The total density of states is ``e^S = sum_s n_s rho_s``.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import CoupledSystem, EnsembleProfile
from .specfun import EdgeMassWarning, GridFunction, hilbert_pv, hilbert_uniform

__all__ = [
    "SolverOptions",
    "ShellModel",
    "MeanFieldSolution",
    "DegenerateDistributionError",
    "NegativeImaginaryWarning",
    "shells_from_system",
    "shells_from_profile",
    "im_g_from_p",
    "re_g_from_im",
    "p_update",
    "solve",
]

log = logging.getLogger(__name__)

STALL_WINDOW = 50
DEFAULT_SHELLS = 32
TINY = 1e-300


class DegenerateDistributionError(ValueError):
    """Im G vanishes identically: the state is uncoupled."""


class NegativeImaginaryWarning(UserWarning):
    """Quadrature noise made Im G slightly negative; values were clipped to zero."""


@dataclass(frozen=True)
class SolverOptions:
    grid_points: int = 1024
    damping: float = 0.3
    max_iter: int = 500
    tol: float = 1e-8
    eta: float = 1e-4
    renormalize: bool = True

    def __post_init__(self):
        if self.grid_points < 16:
            raise ValueError("grid_points must be >= 16")
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if not self.eta >= 0:
            raise ValueError("eta must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class ShellModel:
    """Coarse-grained coupling structure.

    Attributes
    ----------
    centers : ndarray, shape (m,)
        Mean of ``a + vdiag`` per shell.
    sizes : ndarray, shape (m,)
        Number of basis states per shell.
    weights : ndarray, shape (m, m)
        ``W_st``: summed ``|V|^2`` from one member of ``s`` to shell ``t``.
    members : tuple of ndarray
        Basis indices per shell (empty for profile-derived models).
    vdiag : ndarray, shape (m,), optional
        Mean diagonal shift per shell (zeros when omitted).
    """

    centers: np.ndarray
    sizes: np.ndarray
    weights: np.ndarray
    members: tuple = ()
    vdiag: np.ndarray | None = None

    def __post_init__(self):
        c = np.atleast_1d(np.asarray(self.centers, dtype=float))
        m = c.size
        sizes = np.broadcast_to(np.asarray(self.sizes, dtype=float), (m,)).copy()
        w = np.asarray(self.weights, dtype=float).reshape(m, m)
        vd = np.zeros(m) if self.vdiag is None else np.asarray(self.vdiag, dtype=float).reshape(m)
        if np.any(w < 0):
            raise ValueError("shell weights must be non-negative")
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "vdiag", vd)

    @property
    def bare(self) -> np.ndarray:
        """Unperturbed energies ``a`` per shell (``centers - vdiag``)."""
        return self.centers - self.vdiag

    def shell_of(self, idx: int) -> int:
        for s, m in enumerate(self.members):
            if idx in m:
                return s
        raise IndexError(f"basis index {idx} is not in any shell")

    @property
    def count(self) -> int:
        return self.centers.size

    def total_weight(self) -> np.ndarray:
        return self.weights.sum(axis=1)


def _quantile_labels(values, n_shells):
    order = np.argsort(values, kind="stable")
    labels = np.empty(values.size, dtype=int)
    labels[order] = np.minimum((np.arange(values.size) * n_shells) // values.size, n_shells - 1)
    return labels


def shells_from_system(sys: CoupledSystem, max_shells: int = 128) -> ShellModel:
    """Group indices by distinct ``a + vdiag`` (or quantile bins when there are
    more than ``max_shells`` distinct values) and aggregate ``|V|^2``."""
    e = sys.a + sys.vdiag
    distinct, labels = np.unique(np.round(e, 12), return_inverse=True)
    if distinct.size > max_shells:
        labels = _quantile_labels(e, max_shells)
    m = labels.max() + 1
    onehot = np.zeros((sys.dim, m))
    onehot[np.arange(sys.dim), labels] = 1.0
    sizes = onehot.sum(axis=0)
    v2 = np.abs(sys.vcoupling) ** 2
    weights = (onehot.T @ v2 @ onehot) / sizes[:, None]
    centers = (onehot.T @ e) / sizes
    vdiag = (onehot.T @ sys.vdiag) / sizes
    members = tuple(np.flatnonzero(labels == s) for s in range(m))
    return ShellModel(centers, sizes, weights, members, vdiag)


def shells_from_profile(profile: EnsembleProfile, dim: int, n_shells: int = DEFAULT_SHELLS) -> ShellModel:
    """Expected shell model of ``build_banded_ensemble(dim, profile)``.

    Shells carry equal probability mass of ``exp(S)``; ``W_st = n_t E|V|^2(c_s, c_t)``
    (``n_s - 1`` on the diagonal).
    """
    e = profile.energies
    rho = np.exp(profile.entropy)
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (rho[1:] + rho[:-1]) * np.diff(e))])
    cdf /= cdf[-1]
    mids = np.interp((np.arange(n_shells) + 0.5) / n_shells, cdf, e)
    sizes = np.full(n_shells, dim / n_shells)
    var = profile.coupling_variance(mids[:, None], mids[None, :])
    counts = np.tile(sizes, (n_shells, 1)) - np.eye(n_shells)
    return ShellModel(mids, sizes, var * counts, ())


def im_g_from_p(lambdas, densities, weights) -> GridFunction:
    """``Im G = pi sum_t W_t rho_t(lambda)`` on a shared grid.

    Parameters
    ----------
    lambdas : array_like, shape (N,)
    densities : array_like, shape (m, N)
        ``rho_t = e^S p_t`` of the coupled shells.
    weights : array_like, shape (m,)
        Summed squared couplings to each shell.
    """
    lam = np.asarray(lambdas, dtype=float)
    dens = np.atleast_2d(np.asarray(densities, dtype=float))
    w = np.asarray(weights, dtype=float)
    if dens.shape[1] != lam.size or w.shape != (dens.shape[0],):
        raise ValueError(f"shape mismatch: grid {lam.shape}, densities {dens.shape}, weights {w.shape}")
    return GridFunction(lam, np.pi * (w @ dens))


def _is_uniform(x):
    d = np.diff(x)
    return np.allclose(d, d[0], rtol=1e-9, atol=0.0)


def re_g_from_im(im_g: GridFunction, method: str = "auto", warn: bool = True) -> GridFunction:
    """``Re G(lambda) = (1/pi) PV int Im G(x) / (lambda - x) dx``.

    ``method`` is ``"uniform"`` (Maclaurin odd/even rule; uniform grids only),
    ``"pv"`` (spline-based singularity-subtracted quadrature) or ``"auto"``.
    """
    if method == "auto":
        method = "uniform" if _is_uniform(im_g.lambdas) else "pv"
    if method == "uniform":
        if not _is_uniform(im_g.lambdas):
            raise ValueError("uniform rule needs a uniform grid")
        if warn and im_g.edge_ratio() > 1e-3:
            warnings.warn(f"Im G edge/peak ratio {im_g.edge_ratio():.3g}", EdgeMassWarning, stacklevel=2)
        return im_g.with_values(hilbert_uniform(im_g.values))
    if method == "pv":
        return im_g.with_values(hilbert_pv(im_g, im_g.lambdas, warn=warn).value)
    raise ValueError(f"unknown method {method!r}")


def _normalize(lam, rho):
    total = np.trapezoid(rho, lam)
    if not total > 0:
        raise DegenerateDistributionError("distribution has zero weight on the grid")
    return rho / total


def p_update(
    center: float,
    im_g: GridFunction,
    re_g: GridFunction,
    entropy=None,
    eta: float = 0.0,
    renormalize: bool = True,
) -> GridFunction:
    """One application of the overlap identity on the grid.

    ``p = (1/(pi e^S)) Im G / ((lambda - center - Re G)^2 + Im G^2)`` with
    ``center = a + vdiag``. ``entropy`` is ``S(lambda)`` on the grid (``None``
    means ``S = 0``, i.e. the result is the density ``e^S p``). ``eta`` is added
    to ``Im G`` as the ``i0+`` regulator. Negative ``Im G`` is clipped to zero
    with a ``NegativeImaginaryWarning``.
    """
    lam = im_g.lambdas
    if re_g.lambdas.shape != lam.shape or np.any(re_g.lambdas != lam):
        raise ValueError("Im G and Re G must share a grid")
    im = im_g.values
    if np.any(im < 0):
        warnings.warn(f"clipped {np.count_nonzero(im < 0)} negative Im G values", NegativeImaginaryWarning, stacklevel=2)
        im = np.clip(im, 0.0, None)
    if not np.any(im > 0) and eta == 0:
        raise DegenerateDistributionError("Im G vanishes identically; use the exact oracle for uncoupled states")
    im = im + eta
    x = lam - center - re_g.values
    rho = im / (np.pi * (x * x + im * im))
    if renormalize:
        rho = _normalize(lam, rho)
    if entropy is None:
        return GridFunction(lam, rho)
    es = np.exp(np.asarray(entropy, dtype=float))
    return GridFunction(lam, rho / np.maximum(es, TINY))


@dataclass(frozen=True, eq=False)
class MeanFieldSolution:
    """Converged (or best) shell distributions on the solver grid.

    ``rho[s]`` is ``e^S p_s``; ``dos`` is ``e^S = sum_s n_s rho_s``; ``im_g`` and
    ``re_g`` are the self-energy traces of each shell; ``trace`` holds
    ``(iteration, residual, normalization drift)`` rows.
    """

    grid: np.ndarray
    shells: ShellModel
    rho: np.ndarray
    im_g: np.ndarray
    re_g: np.ndarray
    dos: np.ndarray
    iterations: int
    residual: float
    converged: bool
    trace: np.ndarray
    clipped: int = 0
    diagnostic: str = ""
    options: SolverOptions = field(default_factory=SolverOptions)

    def shell_index(self, idx: int) -> int:
        return self.shells.shell_of(idx) if self.shells.members else idx

    def density(self, shell: int) -> GridFunction:
        return GridFunction(self.grid, self.rho[shell])

    def p_of(self, idx: int) -> GridFunction:
        """``p`` of basis index ``idx`` (``e^S p / e^S``; zero where ``e^S`` vanishes)."""
        s = self.shell_index(idx)
        p = np.where(self.dos > TINY, self.rho[s] / np.maximum(self.dos, TINY), 0.0)
        return GridFunction(self.grid, p)

    def im_g_of(self, idx: int) -> GridFunction:
        return GridFunction(self.grid, self.im_g[self.shell_index(idx)])

    def re_g_of(self, idx: int) -> GridFunction:
        return GridFunction(self.grid, self.re_g[self.shell_index(idx)])

    def entropy(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.dos)

    def normalization(self, shell: int) -> float:
        return float(np.trapezoid(self.rho[shell], self.grid))

    def peak(self, shell: int) -> tuple[float, float]:
        """Peak position and height of ``rho_s``, refined by a parabola through the top three points."""
        r = self.rho[shell]
        k = int(np.argmax(r))
        k = min(max(k, 1), r.size - 2)
        y0, y1, y2 = r[k - 1 : k + 2]
        h = self.grid[1] - self.grid[0]
        den = y0 - 2 * y1 + y2
        off = 0.5 * (y0 - y2) / den if den != 0 else 0.0
        return float(self.grid[k] + off * h), float(y1 - 0.25 * (y0 - y2) * off)

    def width(self, shell: int) -> float:
        """``Im G`` at the peak of ``rho_s``: the Lorentzian width of the peak-pinned (r = 1) convention."""
        lam, _ = self.peak(shell)
        return float(np.interp(lam, self.grid, self.im_g[shell]))

    def hwhm(self, shell: int) -> float:
        """Half width at half maximum of ``rho_s`` (linear interpolation of the crossings)."""
        r = self.rho[shell]
        lam_p, top = self.peak(shell)
        half = 0.5 * top
        above = np.flatnonzero(r >= half)
        lo, hi = above[0], above[-1]
        left = np.interp(half, [r[lo - 1], r[lo]], self.grid[lo - 1 : lo + 1]) if lo > 0 else self.grid[0]
        right = np.interp(half, [r[hi + 1], r[hi]], [self.grid[hi + 1], self.grid[hi]]) if hi < r.size - 1 else self.grid[-1]
        return float(0.5 * (right - left))


def _grid_for(shells: ShellModel, n: int) -> np.ndarray:
    reach = np.sqrt(np.max(shells.total_weight()))
    lo = shells.centers.min() - 5.0 * reach
    hi = shells.centers.max() + 5.0 * reach
    return np.linspace(lo, hi, n)


def _initial_densities(shells: ShellModel, grid: np.ndarray) -> np.ndarray:
    wtot = shells.total_weight()
    spread = np.ptp(shells.centers)
    mean_density = np.sum(shells.sizes) / spread if spread > 0 else np.inf
    # golden rule chi = pi sum|V|^2 <e^S>/N, capped by the single-level width sqrt(W)
    chi0 = np.minimum(np.pi * wtot * mean_density / np.sum(shells.sizes), np.sqrt(wtot))
    chi0 = np.maximum(chi0, 4.0 * (grid[1] - grid[0]))
    x = grid[None, :] - shells.centers[:, None]
    rho = chi0[:, None] / (np.pi * (x * x + chi0[:, None] ** 2))
    return rho / np.trapezoid(rho, grid, axis=1)[:, None]


class _Map:
    def __init__(self, shells, grid, eta, renormalize):
        self.shells = shells
        self.grid = grid
        self.eta = eta
        self.renormalize = renormalize
        self.clipped = 0

    def __call__(self, rho):
        im = np.pi * (self.shells.weights @ rho)
        re = np.array([hilbert_uniform(row) for row in im])
        neg = im < 0
        if np.any(neg):
            self.clipped += int(np.count_nonzero(neg))
            im = np.where(neg, 0.0, im)
        imr = im + self.eta
        x = self.grid[None, :] - self.shells.centers[:, None] - re
        new = imr / (np.pi * (x * x + imr * imr))
        if self.renormalize:
            new = new / np.trapezoid(new, self.grid, axis=1)[:, None]
        return new, im, re


def _l1(grid, a, b):
    return float(np.mean(np.trapezoid(np.abs(a - b), grid, axis=1)))


def solve(model, opts: SolverOptions | None = None, *, dim: int | None = None, n_shells: int = DEFAULT_SHELLS):
    """Damped fixed-point iteration of the mean-field map.

    Parameters
    ----------
    model : CoupledSystem, ShellModel or EnsembleProfile
        Ensembles need ``dim``; they are reduced to ``n_shells`` shells.
    opts : SolverOptions

    Returns
    -------
    MeanFieldSolution
        ``residual`` is the L1 change produced by one more application of the
        full map (mean over shells). When the best residual has not improved for
        50 iterations the best iterate is returned with ``converged=False``.
    """
    opts = opts or SolverOptions()
    if isinstance(model, CoupledSystem):
        shells = shells_from_system(model)
    elif isinstance(model, EnsembleProfile):
        if dim is None:
            raise ValueError("dim is required for an ensemble profile")
        shells = shells_from_profile(model, dim, n_shells)
    elif isinstance(model, ShellModel):
        shells = model
    else:
        raise TypeError(f"cannot solve {type(model).__name__}")
    if shells.count < 1 or not np.any(shells.weights > 0):
        raise DegenerateDistributionError("no couplings: the mean-field map is degenerate")
    if np.any(shells.total_weight() <= 0):
        raise DegenerateDistributionError("a shell has no couplings; use the exact oracle for it")

    grid = _grid_for(shells, opts.grid_points)
    eta = opts.eta * (grid[-1] - grid[0])
    fmap = _Map(shells, grid, eta, opts.renormalize)
    rho = _initial_densities(shells, grid)

    trace = []
    best = (np.inf, rho, None, None, 0)
    converged = False
    diagnostic = ""
    it = 0
    for it in range(1, opts.max_iter + 1):
        new, im, re = fmap(rho)
        res = _l1(grid, new, rho)
        drift = float(np.max(np.abs(np.trapezoid(new, grid, axis=1) - 1.0)))
        trace.append((it, res, drift))
        if res < best[0]:
            best = (res, rho, im, re, it)
        if res <= opts.tol:
            converged = True
            break
        if it - best[4] >= STALL_WINDOW:
            diagnostic = f"residual stalled: no improvement over {STALL_WINDOW} iterations (best {best[0]:.3g} at {best[4]})"
            break
        rho = (1 - opts.damping) * rho + opts.damping * new
    else:
        diagnostic = f"max_iter={opts.max_iter} reached with residual {trace[-1][1]:.3g}"

    res, rho, im, re, _ = best
    if diagnostic:
        log.warning("mean-field solve did not converge: %s", diagnostic)
    dos = shells.sizes @ rho
    return MeanFieldSolution(
        grid,
        shells,
        rho,
        im,
        re,
        dos,
        it,
        res,
        converged,
        np.array(trace),
        fmap.clipped,
        diagnostic,
        opts,
    )
