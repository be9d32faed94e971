"""Characteristic and transport checks against closed-form flows."""

import numpy as np
import pytest

from torusflow import fields
from torusflow.fields import SpectralScalarField, SpectralVectorField, TrajectoryRecord, grid
from torusflow.lagrangian import (
    area_defect,
    flow_map,
    integrate_mean,
    max_displacement,
    scalar_values_at,
    transport_solve,
)


def shear(n, a=1.0):
    c = np.zeros((2, n, n), dtype=np.complex128)
    c[0, 0, 1] = -0.5j * a
    c[0, 0, (-1) % n] = 0.5j * a
    return SpectralVectorField(c)


def constant_record(mean_fn, T=1.0, n=16):
    z = SpectralVectorField(np.zeros((2, n, n), dtype=complex))
    times = np.linspace(0.0, T, 5)
    snaps = [z.copy() for _ in times]
    return TrajectoryRecord(times, snaps, mean_fn=mean_fn)


class TestIntegrateMean:
    def test_constant_field(self):
        n = 16
        v = SpectralVectorField(np.zeros((2, n, n), dtype=complex),
                                np.array([0.3, -0.2]))
        out = integrate_mean(v, 0.0, 2.0)
        assert np.allclose(out, [0.6, -0.4], atol=1e-15)

    def test_analytic_mean_fn(self):
        rec = constant_record(lambda t: np.array([np.sin(10 * t), np.cos(10 * t)]))
        out = integrate_mean(rec, 0.0, 1.0)
        want = np.array([(1 - np.cos(10.0)) / 10.0, np.sin(10.0) / 10.0])
        assert np.allclose(out, want, atol=1e-11)

    def test_piecewise_linear_means_exact(self):
        n = 16
        times = np.array([0.0, 1.0, 3.0])
        snaps = [SpectralVectorField(np.zeros((2, n, n), dtype=complex),
                                     np.array([m, 2 * m])) for m in (0.0, 1.0, 0.0)]
        rec = TrajectoryRecord(times, snaps)
        out = integrate_mean(rec, 0.0, 3.0)
        assert np.allclose(out, [1.5, 3.0], atol=1e-14)
        half = integrate_mean(rec, 0.5, 1.0)
        assert np.allclose(half, [0.375, 0.75], atol=1e-14)

    def test_reversed_interval_is_signed(self):
        n = 16
        v = SpectralVectorField(np.zeros((2, n, n), dtype=complex),
                                np.array([1.0, 0.0]))
        assert np.allclose(integrate_mean(v, 1.0, 0.0), [-1.0, 0.0])


class TestFlowMap:
    def test_space_constant_fast_path(self):
        rec = constant_record(lambda t: np.array([np.cos(40 * t) * 50.0, 0.0]))
        pts = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = flow_map(rec, 0.0, 1.0, pts)
        shift = np.sin(40.0) / 40.0 * 50.0
        assert np.allclose(out[0], pts[0] + shift, atol=1e-9)
        assert np.allclose(out[1], pts[1], atol=1e-12)

    def test_steady_shear_analytic(self):
        n = 128
        a, T = 0.7, 0.8
        v = shear(n, a)
        th = np.linspace(0.0, 2 * np.pi, 17)[:-1]
        pts = np.stack([np.full_like(th, 1.0), th])
        out = flow_map(v, 0.0, T, pts, dt=5e-3)
        want0 = 1.0 + T * a * np.sin(th)
        assert np.max(np.abs(out[0] - want0)) < 1e-5
        assert np.max(np.abs(out[1] - th)) < 1e-12

    def test_backward_roundtrip(self):
        n = 96
        rng = np.random.default_rng(9)
        v = fields.random_divfree(n, kmax=3, rng=rng, amplitude=0.6)
        pts = np.array([[0.5, 2.0, 4.0], [1.0, 3.0, 5.5]])
        fwd = flow_map(v, 0.0, 0.5, pts, dt=2e-3)
        back = flow_map(v, 0.5, 0.0, fwd, dt=2e-3)
        assert np.max(np.abs(back - pts)) < 2e-5

    def test_max_displacement_shear(self):
        n = 96
        v = shear(n, a=0.5)
        pts = np.stack(np.meshgrid(np.linspace(0, 6, 7), np.linspace(0, 6, 7),
                                   indexing="ij"))
        d = max_displacement(v, 0.0, 1.0, pts, dt=5e-3)
        want = 0.5 * np.max(np.abs(np.sin(np.linspace(0, 6, 7))))
        assert d == pytest.approx(want, abs=1e-4)


class TestAreaDefect:
    def test_shear_preserves_area(self):
        v = shear(96, a=1.0)
        assert area_defect(v, 0.0, 0.7, n=48, dt=5e-3) < 1e-4

    def test_random_divfree_preserves_area(self):
        rng = np.random.default_rng(13)
        v = fields.random_divfree(96, kmax=3, rng=rng, amplitude=0.5)
        assert area_defect(v, 0.0, 0.5, n=48, dt=2e-3) < 5e-4


class TestTransport:
    def setup_method(self):
        self.n = 128
        self.a = 0.5
        self.T = 0.6
        self.v = shear(self.n, self.a)
        xx, _ = grid(self.n)
        self.phi0 = SpectralScalarField.from_values(np.cos(xx))

    def analytic(self):
        xx, yy = grid(self.n)
        return np.cos(xx - self.T * self.a * np.sin(yy))

    def test_spectral_transport_accuracy(self):
        out = transport_solve(self.phi0, self.v, 0.0, self.T, dt=2e-3,
                              method="spectral")
        assert np.max(np.abs(out.values() - self.analytic())) < 1e-9

    def test_semilag_transport_accuracy(self):
        out = transport_solve(self.phi0, self.v, 0.0, self.T, dt=5e-3,
                              method="semilag")
        assert np.max(np.abs(out.values() - self.analytic())) < 5e-3
        assert out.mean == pytest.approx(self.phi0.mean, abs=1e-14)

    def test_methods_agree(self):
        s1 = transport_solve(self.phi0, self.v, 0.0, 0.3, dt=2e-3,
                             method="spectral")
        s2 = transport_solve(self.phi0, self.v, 0.0, 0.3, dt=2e-3,
                             method="semilag")
        assert np.max(np.abs(s1.values() - s2.values())) < 5e-3

    def test_unknown_method_rejected(self):
        with pytest.raises(ValueError):
            transport_solve(self.phi0, self.v, 0.0, 0.1, method="upwind")

    def test_source_accumulates(self):
        # no velocity: d phi / dt = g, phi(T) = T g
        n = 64
        zero_v = SpectralVectorField(np.zeros((2, n, n), dtype=complex))
        xx, _ = grid(n)
        g = SpectralScalarField.from_values(np.sin(xx))
        phi0 = SpectralScalarField(np.zeros((n, n), dtype=complex))
        out = transport_solve(phi0, zero_v, 0.0, 1.0, dt=0.05,
                              method="semilag", source=lambda t: g)
        assert np.max(np.abs(out.values() - np.sin(xx))) < 1e-10

    def test_scalar_point_sampling(self):
        n = 96
        xx, _ = grid(n)
        f = SpectralScalarField.from_values(np.sin(xx))
        pts = np.array([[0.3, 1.7], [2.0, 5.0]])
        vals = scalar_values_at(f, pts)
        assert np.allclose(vals, np.sin(pts[0]), atol=1e-6)
