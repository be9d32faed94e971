"""Integrator invariants: Galerkin conservation, exact steady states, exact
heat decay through the integrating factor, shared-stage passenger transport,
and the per-block matrix propagator for steady shears."""

import numpy as np
import pytest

from torusflow import fields
from torusflow.fields import (
    SpectralScalarField,
    SpectralVectorField,
    curl,
    sobolev_norm,
)
from torusflow.modes import TrigModeCombination
from torusflow.solvers import (
    PassengerTrace,
    SolverBlowup,
    advdiff_solve,
    euler_solve,
    flow_diagnostics,
    shear_advdiff_propagate,
    shear_block_matrix,
    shifted_record,
)

N = 64


def shear_field(n=N, a=1.0):
    """v = (a sin(x2), 0): exact steady state of the inviscid dynamics."""
    c = np.zeros((2, n, n), dtype=np.complex128)
    c[0, 0, 1] = -0.5j * a
    c[0, 0, (-1) % n] = 0.5j * a
    return SpectralVectorField(c)


def single_mode(n=N, ell=(1, 0), amp=1.0):
    return (TrigModeCombination.from_mode(ell, "cos") * 1).synthesize(n) * amp


class TestEulerInvariants:
    def test_energy_enstrophy_conserved_free_flow(self):
        rng = np.random.default_rng(7)
        v0 = fields.random_divfree(N, kmax=5, rng=rng, amplitude=0.5)
        rec = euler_solve(v0, 1.0, 1e-3, record_every=250)
        d = flow_diagnostics(rec)
        for key in ("energy", "enstrophy"):
            rel = np.max(np.abs(d[key] - d[key][0])) / d[key][0]
            assert rel < 1e-8, key

    def test_shear_is_exactly_steady(self):
        v0 = shear_field(a=1.3)
        rec = euler_solve(v0, 0.5, 1e-2, record_every=10)
        gap = np.max(np.abs(rec.snapshots[-1].coeffs - v0.coeffs))
        assert gap < 1e-13

    def test_single_mode_is_exactly_steady(self):
        v0 = single_mode(ell=(2, -1), amp=0.7)
        rec = euler_solve(v0, 0.5, 1e-2, record_every=10)
        gap = np.max(np.abs(rec.snapshots[-1].coeffs - v0.coeffs))
        assert gap < 1e-13

    def test_mean_moves_only_by_forcing(self):
        rng = np.random.default_rng(3)
        v0 = fields.random_divfree(N, kmax=4, rng=rng, amplitude=0.4)
        fmean = np.array([0.3, -0.1])
        f = SpectralVectorField(np.zeros((2, N, N), dtype=complex), fmean)
        rec = euler_solve(v0, 1.0, 1e-2, forcing=f, record_every=20)
        assert np.allclose(rec.snapshots[-1].mean, fmean * 1.0, atol=1e-13)
        rec0 = euler_solve(v0, 0.5, 1e-2, record_every=10)
        assert np.allclose(rec0.snapshots[-1].mean, 0.0, atol=1e-15)

    def test_forced_linear_response(self):
        # force along a self-stationary mode from rest: v(t) = t * f
        f = single_mode(ell=(1, 0), amp=0.8)
        v0 = SpectralVectorField(np.zeros((2, N, N), dtype=complex))
        rec = euler_solve(v0, 1.0, 1e-2, forcing=f, record_every=10)
        want = f.coeffs * 1.0
        assert np.max(np.abs(rec.snapshots[-1].coeffs - want)) < 1e-10

    def test_record_grid(self):
        v0 = shear_field()
        rec = euler_solve(v0, 0.2, 0.01, record_every=5)
        assert rec.times[0] == 0.0 and rec.times[-1] == pytest.approx(0.2)
        assert len(rec.times) == 5
        assert np.all(np.diff(rec.times) > 0)

    def test_cfl_warning(self):
        v0 = shear_field(a=5.0)
        with pytest.warns(RuntimeWarning, match="CFL"):
            euler_solve(v0, 0.2, 0.1, record_every=100)

    def test_blowup_carries_partial_record(self):
        v0 = shear_field(a=40.0)
        rng = np.random.default_rng(0)
        v0 = v0 + fields.random_divfree(N, kmax=6, rng=rng, amplitude=10.0)
        with warnings_ignored():
            with pytest.raises(SolverBlowup) as exc:
                euler_solve(v0, 5.0, 0.05, record_every=1)
        assert exc.value.record is not None
        assert len(exc.value.record.times) >= 1


class warnings_ignored:
    def __enter__(self):
        import warnings
        self._cm = warnings.catch_warnings()
        self._cm.__enter__()
        import warnings as w
        w.simplefilter("ignore")
        return self

    def __exit__(self, *a):
        return self._cm.__exit__(*a)


class TestShiftedRecord:
    def test_pointwise_subtraction_contract(self):
        v0 = shear_field()
        rec = euler_solve(v0, 0.3, 0.01, record_every=6)
        zmode = single_mode(ell=(1, -1))

        def shift(t):
            return zmode * float(np.sin(3 * t))

        out = shifted_record(rec, shift)
        for t in (0.0, 0.11, 0.3):
            a = out.sample(t)
            b = rec.sample(t)
            z = shift(t)
            assert np.allclose(a.coeffs, b.coeffs - z.coeffs, atol=1e-14)


class TestAdvectionDiffusion:
    def test_pure_heat_is_exact(self):
        n = 48
        c = np.zeros((n, n), dtype=complex)
        c[2, 5] = 0.3 + 0.1j
        c[(-2) % n, (-5) % n] = 0.3 - 0.1j
        c[1, 0] = 0.5
        c[(-1) % n, 0] = 0.5
        phi0 = SpectralScalarField(c, mean=2.0)
        zero_v = SpectralVectorField(np.zeros((2, n, n), dtype=complex))
        rec = advdiff_solve(phi0, zero_v, 0.7, 0.07, kappa=1.0)
        end = rec.snapshots[-1]
        k1, k2 = fields.wavenumbers(n)
        want = phi0.coeffs * np.exp(-(k1**2 + k2**2) * 0.7)
        assert np.max(np.abs(end.coeffs - want)) < 1e-13
        assert end.mean == pytest.approx(2.0, abs=1e-15)

    def test_mean_conserved_without_source(self):
        rng = np.random.default_rng(5)
        phi0 = fields.random_scalar(N, kmax=5, rng=rng)
        phi0.mean = -0.7
        v = shear_field(a=0.8)
        rec = advdiff_solve(phi0, v, 0.5, 5e-3, kappa=0.2)
        assert rec.snapshots[-1].mean == pytest.approx(-0.7, abs=1e-13)

    def test_source_integrates_exactly_when_polynomial(self):
        # constant source on one mode, no velocity, kappa 0: phi = t * g
        n = 48
        g = np.zeros((n, n), dtype=complex)
        g[3, 1] = 0.2
        g[(-3) % n, (-1) % n] = 0.2
        src = SpectralScalarField(g, mean=0.5)
        phi0 = SpectralScalarField(np.zeros((n, n), dtype=complex))
        zero_v = SpectralVectorField(np.zeros((2, n, n), dtype=complex))
        rec = advdiff_solve(phi0, zero_v, 2.0, 0.1, kappa=0.0,
                            source=lambda t: src)
        end = rec.snapshots[-1]
        assert np.max(np.abs(end.coeffs - 2.0 * g)) < 1e-12
        assert end.mean == pytest.approx(1.0, abs=1e-12)

    def test_velocity_from_record_is_sampled(self):
        v0 = shear_field(a=0.5)
        vrec = euler_solve(v0, 0.4, 0.01, record_every=4)
        rng = np.random.default_rng(11)
        phi0 = fields.random_scalar(N, kmax=4, rng=rng)
        r1 = advdiff_solve(phi0, vrec, 0.4, 0.01)
        r2 = advdiff_solve(phi0, v0, 0.4, 0.01)
        # steady shear record vs constant field: identical sampling
        assert np.max(np.abs(r1.snapshots[-1].coeffs
                             - r2.snapshots[-1].coeffs)) < 1e-12


class TestShearPropagator:
    def setup_method(self):
        self.n = 64
        x = fields.grid(self.n)[1][0, :]
        self.alpha = np.sin(x)
        rng = np.random.default_rng(2)
        self.phi0 = fields.random_scalar(self.n, kmax=6, rng=rng)

    def test_matches_rk4(self):
        a = 0.8
        out = shear_advdiff_propagate(self.phi0, self.alpha, a, 0.5, kappa=1.0)
        v = shear_field(self.n, a=a)
        rec = advdiff_solve(self.phi0, v, 0.5, 2.5e-3, kappa=1.0)
        gap = np.max(np.abs(out.coeffs - rec.snapshots[-1].coeffs))
        assert gap < 1e-9

    def test_semigroup(self):
        a, kap = 1.1, 0.3
        p1 = shear_advdiff_propagate(self.phi0, self.alpha, a, 0.3, kappa=kap)
        p2 = shear_advdiff_propagate(p1, self.alpha, a, 0.45, kappa=kap)
        direct = shear_advdiff_propagate(self.phi0, self.alpha, a, 0.75, kappa=kap)
        assert np.max(np.abs(p2.coeffs - direct.coeffs)) < 1e-11

    def test_zero_shear_is_heat(self):
        out = shear_advdiff_propagate(self.phi0, self.alpha, 0.0, 0.4, kappa=1.0)
        k1, k2 = fields.wavenumbers(self.n)
        want = self.phi0.coeffs * np.exp(-(k1**2 + k2**2) * 0.4)
        assert np.max(np.abs(out.coeffs - want)) < 1e-12

    def test_profile_from_field(self):
        x2 = fields.grid(self.n)[1]
        prof = SpectralScalarField.from_values(np.sin(x2))
        out_a = shear_advdiff_propagate(self.phi0, prof, 0.7, 0.2)
        out_b = shear_advdiff_propagate(self.phi0, self.alpha, 0.7, 0.2)
        assert np.max(np.abs(out_a.coeffs - out_b.coeffs)) < 1e-12

    def test_rejects_two_dimensional_profile(self):
        rng = np.random.default_rng(8)
        bad = fields.random_scalar(self.n, kmax=3, rng=rng)
        with pytest.raises(ValueError):
            shear_advdiff_propagate(self.phi0, bad, 1.0, 0.1)

    def test_block_matrix_rows_masked(self):
        ahat = np.fft.fft(self.alpha) / self.n
        M = shear_block_matrix(2, ahat, 1.0, 0.0, self.n, dealias=True)
        l2 = np.where(np.arange(self.n) <= 32, np.arange(self.n),
                      np.arange(self.n) - self.n)
        dead = np.abs(l2) >= self.n / 3.0
        assert np.all(M[dead, :] == 0)


class TestPassengers:
    def test_passengers_match_standalone_solver(self):
        v0 = shear_field(a=0.6)
        rng = np.random.default_rng(4)
        p1 = fields.random_scalar(N, kmax=4, rng=rng)
        p2 = fields.random_scalar(N, kmax=4, rng=rng)
        rec, trace = euler_solve(v0, 0.4, 5e-3, passengers=[p1, p2],
                                 kappa=0.5, record_every=20)
        assert isinstance(trace, PassengerTrace)
        assert trace.norms.shape == (len(trace.times), 2)
        for init, fin in ((p1, trace.finals[0]), (p2, trace.finals[1])):
            ref = advdiff_solve(init, v0, 0.4, 5e-3, kappa=0.5)
            assert np.max(np.abs(fin.coeffs
                                 - ref.snapshots[-1].coeffs)) < 1e-11

    def test_fluct_norm_drops_streamwise_average(self):
        n = 48
        c = np.zeros((n, n), dtype=complex)
        c[0, 2] = 0.5  # pure x2 dependence: no streamwise fluctuation
        c[0, (-2) % n] = 0.5
        phi = SpectralScalarField(c)
        v0 = SpectralVectorField(np.zeros((2, n, n), dtype=complex))
        _, trace = euler_solve(v0, 0.1, 0.01, passengers=[phi], kappa=0.0,
                               record_every=5)
        assert trace.norms[0, 0] > 0.1
        assert np.all(trace.fluct_norms[:, 0] < 1e-12)

    def test_diagnostics_shapes(self):
        v0 = shear_field()
        rec = euler_solve(v0, 0.2, 0.01, record_every=4)
        d = flow_diagnostics(rec)
        assert set(d) == {"times", "energy", "enstrophy"}
        assert len(d["energy"]) == len(rec.times)
        assert d["energy"][0] == pytest.approx(0.5 * sobolev_norm(v0, 0) ** 2)
        w = curl(v0)
        assert d["enstrophy"][0] == pytest.approx(0.5 * sobolev_norm(w, 0) ** 2)
