"""
Special functions and principal-value Hilbert transforms on grids.

The Faddeeva function ``w(z) = exp(-z**2) erfc(-i z)`` is the building block for
the Voigt profile ``V``, the dispersion profile ``D`` (its Hilbert transform) and
the closed-form Hilbert transform of a Gaussian-times-Lorentzian product.

Conventions
-----------
The Hilbert transform carries the ``1/pi`` prefactor::

    H(f)(lam) = (1/pi) PV int f(x) / (lam - x) dx

so that ``H(L(.; chi))(x) = x / (pi (x**2 + chi**2))`` and ``H(V) = D``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.signal import fftconvolve
from scipy.special import wofz

__all__ = [
    "GridFunction",
    "ProfileParams",
    "PVResult",
    "EdgeMassWarning",
    "faddeeva",
    "lorentzian",
    "gaussian",
    "voigt",
    "dispersion",
    "hilbert_pv",
    "hilbert_uniform",
    "voigt_hilbert_identity",
]

SQRT2 = np.sqrt(2.0)
SQRT2PI = np.sqrt(2.0 * np.pi)

# relative edge value above which a grid function is considered truncated
EDGE_FRACTION = 1e-3


class EdgeMassWarning(UserWarning):
    """A grid function does not decay at the grid edges."""


@dataclass(frozen=True)
class ProfileParams:
    """Gaussian width ``sigma`` and Lorentzian half-width ``chi`` (energy units)."""

    sigma: float
    chi: float

    def __post_init__(self):
        if not (self.sigma > 0 and np.isfinite(self.sigma)):
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if not (self.chi > 0 and np.isfinite(self.chi)):
            raise ValueError(f"chi must be positive, got {self.chi}")


@dataclass(frozen=True, eq=False)
class GridFunction:
    """Real function sampled on a strictly increasing real grid."""

    lambdas: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        lam = np.array(self.lambdas, dtype=float)
        val = np.array(self.values, dtype=float)
        if lam.ndim != 1 or val.shape != lam.shape:
            raise ValueError(f"grid and values must be 1-d of equal length, got {lam.shape} and {val.shape}")
        if lam.size < 2:
            raise ValueError("a grid function needs at least two points")
        if not np.all(np.diff(lam) > 0):
            raise ValueError("grid must be strictly increasing")
        if not (np.all(np.isfinite(lam)) and np.all(np.isfinite(val))):
            raise ValueError("grid function contains non-finite entries")
        lam.flags.writeable = False
        val.flags.writeable = False
        object.__setattr__(self, "lambdas", lam)
        object.__setattr__(self, "values", val)

    def __len__(self):
        return self.lambdas.size

    @property
    def span(self) -> tuple[float, float]:
        return float(self.lambdas[0]), float(self.lambdas[-1])

    def integral(self) -> float:
        return float(np.trapezoid(self.values, self.lambdas))

    def edge_ratio(self) -> float:
        """Largest edge magnitude relative to the peak magnitude."""
        peak = np.max(np.abs(self.values))
        if peak == 0:
            return 0.0
        return float(max(abs(self.values[0]), abs(self.values[-1])) / peak)

    def interp(self, x) -> np.ndarray:
        """Linear interpolation, zero outside the grid."""
        return np.interp(x, self.lambdas, self.values, left=0.0, right=0.0)

    def with_values(self, values) -> "GridFunction":
        return GridFunction(self.lambdas, values)


class PVResult(NamedTuple):
    value: float | np.ndarray
    edge_warning: bool


def faddeeva(z):
    """Faddeeva function ``w(z) = exp(-z^2) erfc(-iz)``.

    Accepts scalars or arrays. Raises ``OverflowError`` when the value is not
    representable, which happens deep in the lower half-plane where ``w``
    grows like ``2 exp(-z^2)``.
    """
    zz = np.asarray(z, dtype=complex)
    with np.errstate(over="ignore", invalid="ignore"):
        w = wofz(zz)
    if not np.all(np.isfinite(w)):
        bad = zz[~np.isfinite(w)] if zz.ndim else zz
        raise OverflowError(f"w(z) overflows for z = {np.ravel(bad)[0]!r}")
    return complex(w) if np.ndim(z) == 0 else w


def _check_positive(name, value):
    if not value > 0:
        raise ValueError(f"{name} must be positive, got {value}")


def lorentzian(x, chi):
    """``chi / (pi (chi^2 + x^2))``."""
    _check_positive("chi", chi)
    x = np.asarray(x, dtype=float)
    return chi / (np.pi * (chi * chi + x * x))


def gaussian(x, sigma):
    """Normalized Gaussian ``exp(-x^2 / 2 sigma^2) / (sqrt(2 pi) sigma)``."""
    _check_positive("sigma", sigma)
    x = np.asarray(x, dtype=float)
    return np.exp(-0.5 * (x / sigma) ** 2) / (SQRT2PI * sigma)


def _voigt_complex(x, sigma, chi):
    if isinstance(sigma, ProfileParams):
        sigma, chi = sigma.sigma, sigma.chi
    if chi is None:
        raise TypeError("chi is required unless a ProfileParams is passed")
    _check_positive("sigma", sigma)
    if chi < 0:
        raise ValueError(f"chi must be non-negative, got {chi}")
    x = np.asarray(x, dtype=float)
    return faddeeva((x + 1j * chi) / (SQRT2 * sigma)) / (SQRT2PI * sigma)


def voigt(x, sigma, chi=None):
    """Voigt profile: the convolution of ``gaussian(., sigma)`` with ``lorentzian(., chi)``.

    Called as ``voigt(x, sigma, chi)`` or ``voigt(x, ProfileParams(...))``.
    ``chi = 0`` is accepted and gives the Gaussian itself.
    """
    return np.real(_voigt_complex(x, sigma, chi))


def dispersion(x, sigma, chi=None):
    """Dispersion profile ``D``, the Hilbert transform of the Voigt profile.

    ``chi = 0`` gives the Hilbert transform of the Gaussian (a scaled Dawson
    function).
    """
    return np.imag(_voigt_complex(x, sigma, chi))


def voigt_hilbert_identity(lambda_prime, mu1, mu2, p: ProfileParams):
    """Closed form of ``PV int G(l-mu1; sigma) L(l-mu2; chi) / (lambda' - l) dl``
    divided by the normalization ``V(mu2 - mu1; sigma, chi)``.

    Returns ``[d + chi (D(x'; sigma, 0) - D(x0; sigma, chi)) / V(x0)] / (d^2 + chi^2)``
    with ``x0 = mu2 - mu1``, ``x' = lambda' - mu1`` and ``d = lambda' - mu2``.
    """
    lam = np.asarray(lambda_prime, dtype=float)
    x0 = mu2 - mu1
    xp = lam - mu1
    d = lam - mu2
    v0 = voigt(x0, p.sigma, p.chi)
    d_shift = (dispersion(xp, p.sigma, 0.0) - dispersion(x0, p.sigma, p.chi)) / v0
    return (d + p.chi * d_shift) / (d * d + p.chi * p.chi)


def _edge_flag(f: GridFunction) -> bool:
    return f.edge_ratio() > EDGE_FRACTION


def hilbert_pv(f: GridFunction, lam, nodes: int = 4, warn: bool = True) -> PVResult:
    """Principal-value Hilbert transform of a sampled function.

    Uses singularity subtraction ``f(x) -> f(x) - f(lam)`` on a cubic-spline
    interpolant, integrated with composite Gauss-Legendre panels on the grid
    intervals (the panel holding ``lam`` is split there). The subtracted part
    is integrated in closed form. ``f`` is taken to vanish outside the grid.

    Parameters
    ----------
    f : GridFunction
        Sampled function; should decay towards the grid edges.
    lam : float or array_like
        Evaluation point(s), inside the grid span.
    nodes : int
        Gauss-Legendre nodes per grid interval.

    Returns
    -------
    PVResult
        ``value`` (same shape as ``lam``) and ``edge_warning``, set when the edge
        magnitude exceeds ``1e-3`` of the peak magnitude.
    """
    x = f.lambdas
    lo, hi = x[0], x[-1]
    targets = np.atleast_1d(np.asarray(lam, dtype=float))
    if np.any(targets < lo) or np.any(targets > hi) or not np.all(np.isfinite(targets)):
        raise ValueError(f"evaluation point outside grid span [{lo}, {hi}]")

    edge = _edge_flag(f)
    if edge and warn:
        warnings.warn(
            f"grid function edge/peak ratio {f.edge_ratio():.3g} exceeds {EDGE_FRACTION}",
            EdgeMassWarning,
            stacklevel=2,
        )

    spl = CubicSpline(x, f.values)
    t, w = np.polynomial.legendre.leggauss(nodes)
    half = 0.5 * np.diff(x)
    mid = 0.5 * (x[:-1] + x[1:])
    xs = (mid[:, None] + half[:, None] * t[None, :]).ravel()
    ws = (half[:, None] * w[None, :]).ravel()
    sx = spl(xs)
    panel_of_node = np.repeat(np.arange(x.size - 1), nodes)

    s_lam = spl(targets)
    panels = np.clip(np.searchsorted(x, targets, side="right") - 1, 0, x.size - 2)
    out = np.empty_like(targets)

    chunk = max(1, 4_000_000 // xs.size)
    for start in range(0, targets.size, chunk):
        sl = slice(start, start + chunk)
        tl = targets[sl][:, None]
        own = panel_of_node[None, :] == panels[sl][:, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            g = (sx[None, :] - s_lam[sl][:, None]) / (tl - xs[None, :])
        g = np.where(own, 0.0, g)
        out[sl] = g @ ws

    # split panel holding each target at the target itself
    for k, (l, s0, p) in enumerate(zip(targets, s_lam, panels)):
        acc = 0.0
        tiny = 1e-12 * (x[p + 1] - x[p])
        for a, b in ((x[p], l), (l, x[p + 1])):
            # a sliver left by rounding carries no weight and would divide 0/0
            if b - a <= tiny:
                continue
            h = 0.5 * (b - a)
            nodes_ab = 0.5 * (a + b) + h * t
            acc += h * np.dot(w, (spl(nodes_ab) - s0) / (l - nodes_ab))
        out[k] += acc

    with np.errstate(divide="ignore", invalid="ignore"):
        left = np.log(np.abs(targets - lo))
        right = np.log(np.abs(hi - targets))
        log_term = np.where(s_lam == 0.0, 0.0, s_lam * (left - right))
    if not np.all(np.isfinite(log_term)):
        raise ValueError("principal value diverges: f does not vanish at a grid edge evaluation point")
    out = (out + log_term) / np.pi

    value = float(out[0]) if np.ndim(lam) == 0 else out.reshape(np.shape(lam))
    return PVResult(value, edge)


def hilbert_uniform(values) -> np.ndarray:
    """Hilbert transform at the nodes of a uniform grid (Maclaurin's odd/even rule).

    ``H(f)(x_k) ~ (2/pi) sum_{k-j odd} f_j / (k - j)``; the result does not
    depend on the grid spacing. Spectrally accurate for smooth functions that
    vanish at the grid edges. Evaluated as an FFT convolution.
    """
    f = np.asarray(values, dtype=float)
    n = f.size
    m = np.arange(-(n - 1), n)
    kernel = np.zeros(m.size)
    odd = (m % 2) != 0
    kernel[odd] = 2.0 / (np.pi * m[odd])
    full = fftconvolve(f, kernel, mode="full")
    return full[n - 1 : 2 * n - 1]
