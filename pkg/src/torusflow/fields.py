"""Spectral fields on the 2-torus [0, 2pi)^2.

Fields are stored by their Fourier coefficients in numpy fft2 layout,
f(x) = sum_l fhat(l) exp(i l.x), so phys = ifft2(coeffs) * N**2.  Scalar and
vector fields keep their spatial mean out of the coefficient array: the (0,0)
coefficient is pinned to zero and the mean rides in an explicit attribute.
All wavenumbers are integers; the Nyquist row/column (|l| = N/2) is excluded.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

TWO_PI = 2.0 * np.pi


class FieldShapeError(ValueError):
    pass


# wavenumber meshes and masks recur in every constructor, so they are built
# once per resolution and handed out read-only
_TABLES: dict[int, tuple[np.ndarray, ...]] = {}


def _tables(n: int) -> tuple[np.ndarray, ...]:
    got = _TABLES.get(n)
    if got is None:
        k = np.fft.fftfreq(n, d=1.0 / n).astype(np.int64)
        l1, l2 = np.meshgrid(k, k, indexing="ij")
        act = np.ones((n, n), dtype=bool)
        act[0, 0] = False
        if n % 2 == 0:
            act[l1 == -n // 2] = False
            act[l2 == -n // 2] = False
        cut = n / 3.0
        deal = (np.abs(l1) < cut) & (np.abs(l2) < cut)
        for a in (l1, l2, act, deal):
            a.setflags(write=False)
        got = (l1, l2, act, deal)
        _TABLES[n] = got
    return got


def wavenumbers(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Integer wavenumber meshes (l1, l2) for an n x n coefficient array."""
    l1, l2, _, _ = _tables(n)
    return l1, l2


def grid(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Physical grid x_j = 2 pi j / n, meshed with 'ij' indexing."""
    x = TWO_PI * np.arange(n) / n
    return np.meshgrid(x, x, indexing="ij")


def _active_mask(n: int) -> np.ndarray:
    # everything except the mean mode and the unpaired Nyquist lines
    return _tables(n)[2]


def dealias_mask(n: int) -> np.ndarray:
    """2/3-rule mask: keep |l1|, |l2| < n/3."""
    return _tables(n)[3]


def _hermitize(coeffs: np.ndarray) -> np.ndarray:
    n = coeffs.shape[0]
    flipped = np.conj(np.roll(coeffs[::-1, ::-1], (1, 1), axis=(0, 1)))
    out = 0.5 * (coeffs + flipped)
    out[~_active_mask(n)] = 0.0
    return out


def coeffs_from_values(values: np.ndarray) -> tuple[np.ndarray, float]:
    """Split real grid samples into (zero-mean coefficients, mean)."""
    n = values.shape[-1]
    c = np.fft.fft2(values) / (n * n)
    mean = float(np.real(c[..., 0, 0])) if c.ndim == 2 else np.real(c[..., 0, 0])
    c[..., 0, 0] = 0.0
    return c, mean


@dataclass
class SpectralScalarField:
    """Real scalar on T^2; coefficients zero-mean, mean tracked separately."""

    coeffs: np.ndarray
    mean: float = 0.0

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=np.complex128)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise FieldShapeError(f"expected square coefficient array, got {c.shape}")
        self.coeffs = _hermitize(c)

    @property
    def n(self) -> int:
        return self.coeffs.shape[0]

    @classmethod
    def from_values(cls, values: np.ndarray) -> "SpectralScalarField":
        c, mean = coeffs_from_values(np.asarray(values, dtype=float))
        return cls(c, mean)

    @classmethod
    def zero(cls, n: int) -> "SpectralScalarField":
        return cls(np.zeros((n, n), dtype=np.complex128))

    def values(self) -> np.ndarray:
        return np.real(np.fft.ifft2(self.coeffs)) * self.n**2 + self.mean

    def copy(self) -> "SpectralScalarField":
        return SpectralScalarField(self.coeffs.copy(), self.mean)

    def norm(self, k: int = 0) -> float:
        return sobolev_norm(self, k)

    def resample(self, n_new: int) -> "SpectralScalarField":
        return SpectralScalarField(resample_coeffs(self.coeffs, n_new), self.mean)

    def __add__(self, other: "SpectralScalarField") -> "SpectralScalarField":
        return SpectralScalarField(self.coeffs + other.coeffs, self.mean + other.mean)

    def __sub__(self, other: "SpectralScalarField") -> "SpectralScalarField":
        return SpectralScalarField(self.coeffs - other.coeffs, self.mean - other.mean)

    def __mul__(self, a: float) -> "SpectralScalarField":
        return SpectralScalarField(self.coeffs * a, self.mean * a)

    __rmul__ = __mul__


@dataclass
class SpectralVectorField:
    """Divergence-free-capable velocity field with explicit mean vector."""

    coeffs: np.ndarray  # shape (2, n, n)
    mean: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=np.complex128)
        if c.ndim != 3 or c.shape[0] != 2 or c.shape[1] != c.shape[2]:
            raise FieldShapeError(f"expected (2, n, n) coefficients, got {c.shape}")
        self.coeffs = np.stack([_hermitize(c[0]), _hermitize(c[1])])
        self.mean = np.asarray(self.mean, dtype=float).reshape(2).copy()

    @property
    def n(self) -> int:
        return self.coeffs.shape[1]

    @classmethod
    def from_values(cls, u1: np.ndarray, u2: np.ndarray) -> "SpectralVectorField":
        c1, m1 = coeffs_from_values(np.asarray(u1, dtype=float))
        c2, m2 = coeffs_from_values(np.asarray(u2, dtype=float))
        return cls(np.stack([c1, c2]), np.array([m1, m2]))

    @classmethod
    def zero(cls, n: int) -> "SpectralVectorField":
        return cls(np.zeros((2, n, n), dtype=np.complex128))

    def values(self) -> np.ndarray:
        out = np.real(np.fft.ifft2(self.coeffs, axes=(-2, -1))) * self.n**2
        return out + self.mean[:, None, None]

    def copy(self) -> "SpectralVectorField":
        return SpectralVectorField(self.coeffs.copy(), self.mean.copy())

    def norm(self, k: int = 0) -> float:
        return sobolev_norm(self, k)

    def divergence_norm(self) -> float:
        """Relative size of div v in the coefficients (certificate helper)."""
        l1, l2 = wavenumbers(self.n)
        div = 1j * (l1 * self.coeffs[0] + l2 * self.coeffs[1])
        num = np.sqrt(np.sum(np.abs(div) ** 2))
        den = np.sqrt(np.sum(np.abs(self.coeffs) ** 2))
        return float(num / den) if den > 0 else 0.0

    def is_divergence_free(self, tol: float = 1e-12) -> bool:
        return self.divergence_norm() <= tol

    def resample(self, n_new: int) -> "SpectralVectorField":
        c = np.stack([resample_coeffs(self.coeffs[0], n_new),
                      resample_coeffs(self.coeffs[1], n_new)])
        return SpectralVectorField(c, self.mean.copy())

    def __add__(self, other: "SpectralVectorField") -> "SpectralVectorField":
        return SpectralVectorField(self.coeffs + other.coeffs, self.mean + other.mean)

    def __sub__(self, other: "SpectralVectorField") -> "SpectralVectorField":
        return SpectralVectorField(self.coeffs - other.coeffs, self.mean - other.mean)

    def __mul__(self, a: float) -> "SpectralVectorField":
        return SpectralVectorField(self.coeffs * a, self.mean * a)

    __rmul__ = __mul__


Field = SpectralScalarField | SpectralVectorField


def resample_coeffs(coeffs: np.ndarray, n_new: int) -> np.ndarray:
    """Spectral truncation / zero-padding between resolutions."""
    n = coeffs.shape[0]
    if n_new == n:
        return coeffs.copy()
    out = np.zeros((n_new, n_new), dtype=np.complex128)
    half = min(n, n_new) // 2
    sl = list(range(0, half)) + list(range(-half + 1, 0))
    idx_old = np.array(sl) % n
    idx_new = np.array(sl) % n_new
    out[np.ix_(idx_new, idx_new)] = coeffs[np.ix_(idx_old, idx_old)]
    return out


def sobolev_norm(f: Field, k: int) -> float:
    """Homogeneous H^k norm with the mean added in quadrature at every k.

    ||f||_k = 2 pi sqrt( sum_l |l|^(2k) |fhat(l)|^2 + |mean|^2 ); the 2 pi is
    the Parseval factor of the (2 pi)^2 domain so k=0 is the physical L2 norm.
    """
    l1, l2 = wavenumbers(f.n)
    mult = (l1.astype(float) ** 2 + l2.astype(float) ** 2) ** k
    if isinstance(f, SpectralScalarField):
        total = np.sum(mult * np.abs(f.coeffs) ** 2) + f.mean**2
    else:
        total = np.sum(mult * np.abs(f.coeffs) ** 2) + np.sum(f.mean**2)
    return float(TWO_PI * np.sqrt(total))


def leray_project(v: SpectralVectorField) -> SpectralVectorField:
    """Project onto divergence-free fields: vhat -= (l.vhat) l / |l|^2."""
    l1, l2 = wavenumbers(v.n)
    l1 = l1.astype(float)
    l2 = l2.astype(float)
    lsq = l1**2 + l2**2
    lsq[0, 0] = 1.0
    dot = (l1 * v.coeffs[0] + l2 * v.coeffs[1]) / lsq
    c = np.stack([v.coeffs[0] - dot * l1, v.coeffs[1] - dot * l2])
    return SpectralVectorField(c, v.mean.copy())


def curl(v: SpectralVectorField) -> SpectralScalarField:
    """Vorticity d1 v2 - d2 v1 (zero mean on the torus)."""
    l1, l2 = wavenumbers(v.n)
    w = 1j * (l1 * v.coeffs[1] - l2 * v.coeffs[0])
    return SpectralScalarField(w)


def stream_solve(w: SpectralScalarField,
                 mean: Sequence[float] = (0.0, 0.0)) -> SpectralVectorField:
    """Velocity with curl v = w and prescribed spatial mean.

    Solves the stream-function Poisson problem spectrally and rotates the
    gradient; curl(stream_solve(w)) reproduces w exactly.
    """
    l1, l2 = wavenumbers(w.n)
    lsq = (l1**2 + l2**2).astype(float)
    lsq[0, 0] = 1.0
    psi = -w.coeffs / lsq
    c = np.stack([-1j * l2 * psi, 1j * l1 * psi])
    return SpectralVectorField(c, np.asarray(mean, dtype=float))


def gradient(f: SpectralScalarField) -> SpectralVectorField:
    l1, l2 = wavenumbers(f.n)
    return SpectralVectorField(np.stack([1j * l1 * f.coeffs, 1j * l2 * f.coeffs]))


def nonlinear_term(v: SpectralVectorField,
                   dealias: bool = True) -> SpectralVectorField:
    """Leray-projected advection Pi[(v.grad) v], pseudo-spectral with 2/3 rule.

    The mean velocity participates in the advection; the output has zero mean
    (momentum flux integrates to zero for divergence-free v).
    """
    n = v.n
    l1, l2 = wavenumbers(n)
    vals = v.values()
    out = np.empty((2, n, n), dtype=np.complex128)
    for i in range(2):
        di1 = np.real(np.fft.ifft2(1j * l1 * v.coeffs[i])) * n**2
        di2 = np.real(np.fft.ifft2(1j * l2 * v.coeffs[i])) * n**2
        adv = vals[0] * di1 + vals[1] * di2
        out[i] = np.fft.fft2(adv) / n**2
    if dealias:
        out *= dealias_mask(n)
    out[:, 0, 0] = 0.0
    return leray_project(SpectralVectorField(out))


def remove_streamwise_average(f: Field) -> Field:
    """Zero every mode with l1 = 0 (and the mean): the x1-average is removed.

    For scalars this is the projection onto functions whose average along the
    first coordinate vanishes for a.e. x2.
    """
    l1, _ = wavenumbers(f.n)
    mask = l1 != 0
    if isinstance(f, SpectralScalarField):
        return SpectralScalarField(f.coeffs * mask, 0.0)
    return SpectralVectorField(f.coeffs * mask, np.zeros(2))


@dataclass
class TrajectoryRecord:
    """Time-indexed snapshots of one field on a shared uniform-ish grid.

    times must be strictly increasing.  Snapshots all share a resolution and
    kind.  Optional callables give exact values between samples: `mean_fn`
    overrides the stored means (used when the mean signal has structure the
    snapshot grid cannot resolve), `eval_fn` overrides whole fields.
    """

    times: np.ndarray
    snapshots: list
    mean_fn: Callable[[float], np.ndarray] | None = None
    eval_fn: Callable[[float], Field] | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if self.times.ndim != 1 or len(self.times) != len(self.snapshots):
            raise FieldShapeError("times and snapshots must align")
        if len(self.times) >= 2 and np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")

    @property
    def n(self) -> int:
        return self.snapshots[0].n

    @property
    def kind(self) -> str:
        return "scalar" if isinstance(self.snapshots[0], SpectralScalarField) else "vector"

    def sample(self, t: float) -> Field:
        """Linear interpolation in coefficient space (exact via eval_fn if set)."""
        if self.eval_fn is not None:
            return self.eval_fn(t)
        ts = self.times
        if t <= ts[0]:
            out = self.snapshots[0].copy()
        elif t >= ts[-1]:
            out = self.snapshots[-1].copy()
        else:
            j = int(np.searchsorted(ts, t) - 1)
            s = (t - ts[j]) / (ts[j + 1] - ts[j])
            a, b = self.snapshots[j], self.snapshots[j + 1]
            c = (1.0 - s) * a.coeffs + s * b.coeffs
            if isinstance(a, SpectralScalarField):
                out = SpectralScalarField(c, (1 - s) * a.mean + s * b.mean)
            else:
                out = SpectralVectorField(c, (1 - s) * a.mean + s * b.mean)
        if self.mean_fn is not None:
            m = self.mean_fn(t)
            if isinstance(out, SpectralScalarField):
                out.mean = float(m)
            else:
                out.mean = np.asarray(m, dtype=float).reshape(2)
        return out

    def norms(self, k: int = 0) -> np.ndarray:
        return np.array([sobolev_norm(self.sample(t), k) for t in self.times])


def relaxation_norm(traj: TrajectoryRecord, k: int = 0,
                    return_grid: bool = False):
    """sup over stored times of || int_0^t v(s) ds ||_k, trapezoidal in time.

    The supremum is taken over the snapshot grid, which is reported alongside
    when return_grid is set.  Means integrate with the coefficients.
    """
    if len(traj.times) < 2:
        raise ValueError("relaxation norm needs at least 2 time samples")
    best = 0.0
    acc = None
    accm = None
    prev_t = traj.times[0]
    prev = traj.sample(prev_t)
    scalar = isinstance(prev, SpectralScalarField)
    acc = np.zeros_like(prev.coeffs)
    accm = 0.0 if scalar else np.zeros(2)
    norms = [0.0]
    for t in traj.times[1:]:
        cur = traj.sample(t)
        dt = t - prev_t
        acc = acc + 0.5 * dt * (prev.coeffs + cur.coeffs)
        accm = accm + 0.5 * dt * (prev.mean + cur.mean)
        f = SpectralScalarField(acc, accm) if scalar else SpectralVectorField(acc.copy(), accm)
        nv = sobolev_norm(f, k)
        norms.append(nv)
        best = max(best, nv)
        prev, prev_t = cur, t
    if return_grid:
        return best, traj.times.copy(), np.array(norms)
    return best


def random_scalar(n: int, kmax: int, rng: np.random.Generator,
                  amplitude: float = 1.0) -> SpectralScalarField:
    """Random smooth zero-mean scalar supported on |l|_inf <= kmax."""
    c = np.zeros((n, n), dtype=np.complex128)
    l1, l2 = wavenumbers(n)
    sel = (np.abs(l1) <= kmax) & (np.abs(l2) <= kmax)
    c[sel] = rng.normal(size=sel.sum()) + 1j * rng.normal(size=sel.sum())
    c *= amplitude / (1.0 + l1**2 + l2**2)
    c[0, 0] = 0.0
    return SpectralScalarField(c)


def random_divfree(n: int, kmax: int, rng: np.random.Generator,
                   amplitude: float = 1.0) -> SpectralVectorField:
    """Random smooth zero-mean divergence-free field (via a random stream)."""
    w = random_scalar(n, kmax, rng, amplitude)
    return stream_solve(w)
