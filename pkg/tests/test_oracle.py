import warnings

import numpy as np
import pytest

from resolvent_sc import model, oracle
from resolvent_sc.model import CoupledSystem
from resolvent_sc.specfun import EdgeMassWarning, GridFunction, hilbert_pv

from conftest import random_system


def two_level(v, a=(0.0, 0.0)):
    return CoupledSystem(list(a), [0.0, 0.0], [[0.0, v], [v, 0.0]], "two-level")


def uncoupled(dim=20, seed=0):
    a = np.sort(np.random.default_rng(seed).uniform(-1, 1, dim))
    return CoupledSystem(a, np.zeros(dim), np.zeros((dim, dim)), "free")


def random_z(rng, n, span=1.5):
    return rng.uniform(-span, span, n) + 1j * rng.choice([-1, 1], n) * rng.uniform(0.01, 0.5, n)


class TestDiagonalize:
    def test_uncoupled(self):
        sys = uncoupled()
        spec = oracle.diagonalize(sys)
        assert np.array_equal(spec.eigenvalues, sys.a)
        assert np.array_equal(np.abs(spec.eigenvectors), np.eye(sys.dim))

    def test_two_level(self):
        spec = oracle.diagonalize(two_level(-0.7))
        assert np.allclose(spec.eigenvalues, [-0.7, 0.7], atol=1e-15)

    def test_trace(self, system50, spec50):
        assert abs(np.trace(system50.hamiltonian()) - spec50.eigenvalues.sum()) < 1e-10

    def test_orthonormal(self, spec50):
        u = spec50.eigenvectors
        assert np.max(np.abs(u.T @ u - np.eye(50))) < 1e-12


class TestOverlaps:
    def test_uncoupled_unit_vector(self):
        sys = uncoupled()
        p = oracle.overlaps(oracle.diagonalize(sys), 7).p
        assert p[7] == 1.0 and p.sum() == 1.0

    def test_two_level(self):
        p = oracle.overlaps(oracle.diagonalize(two_level(0.3)), 0).p
        assert np.allclose(p, 0.5, atol=1e-15)

    def test_first_moment(self, system50, spec50):
        for idx in (0, 17, 49):
            p = oracle.overlaps(spec50, idx).p
            assert abs(p.sum() - 1) < 1e-12
            assert abs(p @ spec50.eigenvalues - (system50.a[idx] + system50.vdiag[idx])) < 1e-12

    def test_index_range(self, spec50):
        with pytest.raises(IndexError):
            oracle.overlaps(spec50, 50)


class TestResolvent:
    def test_sum_rule(self, spec50):
        eta = 1e-8
        # grid refined around every pole so each width-eta peak is resolved
        u = eta * np.geomspace(1e-4, 1e9, 2000)
        offsets = np.concatenate([-u[::-1], [0.0], u])
        local = (spec50.eigenvalues[:, None] + offsets[None, :]).ravel()
        x = np.unique(np.concatenate([local, np.linspace(-6, 6, 2001)]))
        x = x[(x >= -6) & (x <= 6)]
        im = np.array([oracle.resolvent_exact(spec50, 20, xx - 1j * eta).imag for xx in x])
        assert abs(np.trapezoid(im, x) / np.pi - 1) < 1e-4

    def test_uncoupled(self):
        sys = uncoupled()
        spec = oracle.diagonalize(sys)
        z = 0.3 + 0.2j
        assert abs(oracle.resolvent_exact(spec, 4, z) - 1 / (z - sys.a[4])) < 1e-15

    def test_far_field(self, system50, spec50):
        idx = 3
        m1 = system50.a[idx] + system50.vdiag[idx]
        for mult in (1e3, 1e5):
            z = mult * system50.norm() * (1 + 0.5j)
            r = oracle.resolvent_exact(spec50, idx, z)
            # leading term 1/z, first correction <H>/z^2 from the first moment
            assert abs(r * z - 1) <= 1.01 * abs(m1 / z) + 1e-12
            assert abs(r - 1 / z - m1 / z**2) * abs(z) ** 3 < 10 * system50.norm() ** 2
        assert abs(oracle.resolvent_exact(spec50, idx, z) * z - 1) < 1e-5

    def test_pole(self, spec50):
        with pytest.raises(oracle.PoleError):
            oracle.resolvent_exact(spec50, 0, spec50.eigenvalues[5])


class TestSelfEnergy:
    def test_uncoupled(self):
        sys = uncoupled()
        s = oracle.self_energy_exact(sys, oracle.diagonalize(sys), 3, 0.1 + 0.1j)
        assert s.total == s.od == s.cc == s.third == 0

    @pytest.mark.parametrize("complex_", [False, True])
    def test_closed_equation(self, complex_):
        sys = random_system(50, 21, complex_=complex_)
        spec = oracle.diagonalize(sys)
        rng = np.random.default_rng(0)
        for idx in (0, 25, 49):
            for z in random_z(rng, 20):
                s = oracle.self_energy_exact(sys, spec, idx, z)
                r = oracle.resolvent_exact(spec, idx, z)
                assert abs(r * (z - sys.a[idx] - sys.vdiag[idx] - s.total) - 1) < 1e-10

    def test_decomposition_direct(self, system50, spec50):
        rng = np.random.default_rng(1)
        for z in random_z(rng, 10):
            s = oracle.self_energy_exact(system50, spec50, 12, z)
            cc = oracle.cross_correlated_direct(system50, 12, z)
            assert abs(s.total - s.od - cc) / abs(s.total) <= 1e-9

    def test_third_order_scaling(self):
        # weak coupling relative to the bandwidth, so the hierarchy is perturbative
        base = model.build_banded_ensemble(60, model.flat_profile(60, 10.0, 0.5, seed=1))
        z = 0.1 - 0.3j
        scales = np.array([0.025, 0.05, 0.1, 0.2])
        res = []
        for s in scales:
            sys = base.scaled(s)
            se = oracle.self_energy_exact(sys, oracle.diagonalize(sys), 30, z)
            res.append(abs(se.cc - se.third))
        slope = np.polyfit(np.log(scales), np.log(res), 1)[0]
        assert abs(slope - 4.0) <= 0.3
        # |cc - third| / s^3 shrinks linearly in s
        ratio = np.array(res[:3]) / scales[:3] ** 3
        assert np.all(np.diff(ratio) > 0)

    def test_cavity_pole(self, system50):
        cav = oracle.Cavity(system50, 0)
        with pytest.raises(oracle.PoleError):
            oracle.self_energy_exact(system50, oracle.diagonalize(system50), 0, cav.kappa[3])

    def test_imaginary_part_sign(self, system50):
        g = oracle.self_energy_trace(system50, 5, np.linspace(-2, 2, 50), 1e-2)
        assert np.all(g.imag >= 0)


class TestKramersKronig:
    def test_trace_closure(self, system50):
        eta = 0.05
        lam = np.linspace(-40, 40, 16001)
        g = oracle.self_energy_trace(system50, 10, lam, eta)
        inner = np.linspace(-1.2, 1.2, 49)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", EdgeMassWarning)
            re = hilbert_pv(GridFunction(lam, g.imag), inner).value
        direct = oracle.self_energy_trace(system50, 10, inner, eta).real
        assert np.max(np.abs(re - direct)) < 2e-3 * np.max(np.abs(direct))


class TestSmoothing:
    def test_uncoupled_single_level(self):
        sys = uncoupled(40)
        spec = oracle.diagonalize(sys)
        sd = oracle.smooth_distribution(oracle.overlaps(spec, 20), spec)
        assert abs(sd.normalization() - 1) < 1e-6
        mass = sd.density() * sd.spacing
        # every shell that carries mass contains the one occupied level
        shells = np.abs(sd.lambdas - sys.a[20]) <= 0.5 * sd.window
        assert np.all(mass[~shells] == 0)

    @pytest.mark.parametrize("idx", [5, 60, 100, 180])
    def test_normalization(self, ensemble200, idx):
        spec = oracle.diagonalize(ensemble200)
        sd = oracle.smooth_distribution(oracle.overlaps(spec, idx), spec)
        assert abs(sd.normalization() - 1) < 0.02
        assert abs(np.trapezoid(sd.density(), sd.lambdas) - 1) < 0.02

    def test_weak_coupling_ising(self):
        sys = model.build_ising_chain(10, 1.0, 0.5, 0.2)
        spec = oracle.diagonalize(sys)
        idx = 512
        sd = oracle.smooth_distribution(oracle.overlaps(spec, idx), spec)
        dens = sd.density()
        peak = sd.lambdas[np.argmax(dens)]
        assert abs(peak - (sys.a[idx] + sys.vdiag[idx])) <= sd.window
        # unimodal at the shell scale: the mass inside one window of the peak dominates
        near = np.abs(sd.lambdas - peak) <= sd.window
        assert dens[near].sum() * sd.spacing > 0.5


class TestPag:
    def test_uncoupled(self):
        sys = uncoupled(10)
        spec = oracle.diagonalize(sys)
        rep = oracle.verify_pag(sys, spec, 4)
        assert rep.p_reconstructed[4] == 1.0
        # other levels carry only the Lorentzian tail (eta / gap)^2 of the regularization
        gap = np.min(np.abs(np.delete(sys.a, 4) - sys.a[4]))
        assert np.max(np.delete(rep.p_reconstructed, 4)) <= (rep.etas[0] / gap) ** 2
        assert rep.monotone

    def test_two_level(self):
        sys = two_level(0.4)
        rep = oracle.verify_pag(sys, oracle.diagonalize(sys), 0, eta=1e-6)
        assert np.max(np.abs(rep.p_reconstructed - 0.5)) < 1e-3

    def test_eta_convergence(self, system50, spec50):
        rep = oracle.verify_pag(system50, spec50, 25, eta=1e-2 * spec50.mean_spacing(), halvings=3)
        assert rep.monotone
        assert all(b < a for a, b in zip(rep.deviations, rep.deviations[1:]))
        # second order in eta
        assert rep.deviations[0] / rep.deviations[-1] > 30


class TestCoherent:
    def test_uncoupled(self):
        sys = uncoupled(10)
        assert oracle.im_g_coherent(sys, oracle.diagonalize(sys), 2, 5) == 0.0

    def test_two_level(self):
        v = 0.37
        sys = two_level(v)
        spec = oracle.diagonalize(sys)
        for n in (0, 1):
            assert abs(oracle.im_g_coherent(sys, spec, 0, n, entropy=0.0) - v * v / 2) < 1e-15

    def test_residue(self, system50, spec50):
        for n in (3, 20, 41):
            lam = spec50.eigenvalues[n]
            eps = 1e-9
            res = eps * 1j * oracle.self_energy_spectral(system50, spec50, 8, lam + 1j * eps)
            bare = oracle.im_g_coherent(system50, spec50, 8, n, entropy=0.0)
            assert abs(res.real - bare) <= 1e-9 * max(bare, 1e-3) + 1e-9 * abs(res)

    def test_entropy_factor(self, system50, spec50):
        bare = oracle.im_g_coherent(system50, spec50, 8, 20, entropy=0.0)
        assert oracle.im_g_coherent(system50, spec50, 8, 20, entropy=np.log(3.0)) == pytest.approx(3 * bare)
