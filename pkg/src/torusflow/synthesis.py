"""Tracking-control synthesis through fast oscillations.

Pipeline: a smooth target path W(t) in the first extension of a small
generating space E; the exact full-space control Wdot + N(W); Galerkin
restriction onto E + span{B}; piecewise-constant interval averages with
coefficients snapped to dyadic rationals; exact representation of each
interval value as u - sum_i N(xi_i) with u, xi_i in E; and a cyclic slot
schedule realizing each N(xi) by a +/- amplitude pair whose time average
reproduces the representation identity exactly.  Transitions between slot
plateaus are polynomial bumps with closed-form derivatives; the synthesized
control is u plus the time derivative of the oscillation profile.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from fractions import Fraction
from functools import reduce
from math import gcd
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .fields import SpectralVectorField, TrajectoryRecord, sobolev_norm
from .modes import (
    ModeSpace,
    TrigMode,
    TrigModeCombination,
    _Echelon,
    _mode_key,
    advection_bilinear,
    nonlinear_term_exact,
    represent_in_extension,
)
from .solvers import _Workspace, euler_solve, shifted_record

F0 = Fraction(0)


# ---------------------------------------------------------------- shapes

def smoothstep(u) -> np.ndarray | float:
    """Quintic step: 0 below 0, 1 above 1, C^2 at the ends."""
    u = np.clip(u, 0.0, 1.0)
    return u * u * u * (10.0 + u * (-15.0 + 6.0 * u))


def smoothstep_rate(u) -> np.ndarray | float:
    inside = np.logical_and(np.greater(u, 0.0), np.less(u, 1.0))
    uu = np.clip(u, 0.0, 1.0)
    return np.where(inside, 30.0 * uu * uu * (1.0 - uu) * (1.0 - uu), 0.0)


def bump(s) -> np.ndarray | float:
    """(35/32)(1 - s^2)^3 on [-1, 1], zero outside; integral 1."""
    s = np.asarray(s, dtype=float)
    inside = np.abs(s) < 1.0
    v = np.where(inside, (35.0 / 32.0) * (1.0 - s * s) ** 3, 0.0)
    return v if v.ndim else float(v)


def bump_step(s) -> np.ndarray | float:
    """Antiderivative of `bump`: 0 at -1, 1 at +1."""
    s = np.asarray(s, dtype=float)
    sc = np.clip(s, -1.0, 1.0)
    v = 0.5 + (35.0 / 32.0) * (sc - sc**3 + 0.6 * sc**5 - sc**7 / 7.0)
    return v if v.ndim else float(v)


# ---------------------------------------------------------------- targets

@dataclass
class RampTarget:
    """W(t) = amplitude * step(t / t1) * shape, held steady after t1."""

    shape: TrigModeCombination
    amplitude: float
    t1: float
    T: float

    def __post_init__(self):
        if not (0 < self.t1 <= self.T):
            raise ValueError("need 0 < t1 <= T")
        self._synth_cache: dict[int, SpectralVectorField] = {}

    def scale(self, t: float) -> float:
        return self.amplitude * float(smoothstep(t / self.t1))

    def rate(self, t: float) -> float:
        return self.amplitude * float(smoothstep_rate(t / self.t1)) / self.t1

    def field(self, t: float, n: int) -> SpectralVectorField:
        if n not in self._synth_cache:
            self._synth_cache[n] = self.shape.synthesize(n)
        base = self._synth_cache[n]
        s = self.scale(t)
        return SpectralVectorField(base.coeffs * s, base.mean * s)


@dataclass
class ModulatedTerm:
    """One scalar-modulated combination: t -> fn(t) * combo."""

    fn: Callable[[float], float]
    combo: TrigModeCombination


def fullspace_control(target: RampTarget) -> list[ModulatedTerm]:
    """Control making W an exact solution: Wdot + N(W) (homogeneous system)."""
    terms = [ModulatedTerm(target.rate, target.shape)]
    nz = nonlinear_term_exact(target.shape)
    if not nz.is_zero():
        terms.append(ModulatedTerm(lambda t: target.scale(t) ** 2, nz))
    return terms


# ------------------------------------------------------ reachable span

class ReachableSpan:
    """E + span{B(theta_j, theta_k)}: membership and orthogonal-by-mode split."""

    def __init__(self, space: ModeSpace):
        self.space = space
        self._ech = _Echelon()
        label = 0
        for b in space.basis:
            self._ech.insert(b, label)
            label += 1
        nb = space.dim
        for j in range(nb):
            for k in range(j, nb):
                bv = advection_bilinear(space.basis[j], space.basis[k])
                if not bv.is_zero():
                    self._ech.insert(bv, label)
                    label += 1

    def split(self, combo: TrigModeCombination
              ) -> tuple[TrigModeCombination, TrigModeCombination]:
        """(inside, outside) with combo = inside + outside exactly and
        inside in the span; outside holds only non-pivot modes."""
        row = dict(combo.terms)
        out: dict[TrigMode, Fraction] = {}
        while row:
            lead = min(row, key=_mode_key)
            if lead not in self._ech.rows:
                out[lead] = row.pop(lead)
                continue
            erow, _ = self._ech.rows[lead]
            c = row[lead]
            for m, v in erow.items():
                nv = row.get(m, F0) - c * v
                if nv == 0:
                    row.pop(m, None)
                else:
                    row[m] = nv
        outside = TrigModeCombination(out)
        return combo - outside, outside


# ---------------------------------------------------------------- config

@dataclass
class CascadeConfig:
    intervals: int = 8
    cycles: int = 16
    snap_bits: int = 6
    rest_fraction: Fraction = Fraction(1, 8)
    smoothing_fraction: float = 0.9
    resolution: int = 128
    norm_k: int = 0       # tracking norm for validation
    weight_k: int = 3     # slot equalization weight exponent
    validation_dt: float | None = None
    validation_shifted: bool = True
    target_error: float | None = None
    max_retries: int = 2

    def __post_init__(self):
        if not (0 < self.rest_fraction < 1):
            raise ValueError("rest_fraction must lie in (0, 1)")
        if not (0 < self.smoothing_fraction <= 1.0):
            raise ValueError("smoothing_fraction must lie in (0, 1]")


# ---------------------------------------------------- schedule internals

def _snap(x: float, bits: int) -> Fraction:
    return Fraction(int(round(x * (1 << bits))), 1 << bits)


def primitive_form(combo: TrigModeCombination
                   ) -> tuple[TrigModeCombination, Fraction]:
    """combo = scale * primitive with scale > 0, primitive content 1 and a
    positive leading coefficient; N(combo) = scale^2 N(primitive)."""
    if combo.is_zero():
        raise ValueError("zero combination has no primitive form")
    items = sorted(combo.terms.items(), key=lambda t: _mode_key(t[0]))
    nums = reduce(gcd, (abs(q.numerator) for _, q in items))
    dens = reduce(lambda a, b: a * b // gcd(a, b),
                  (q.denominator for _, q in items))
    content = Fraction(nums, dens)
    lead = items[0][1]
    if lead < 0:
        content = -content
    prim = combo * (1 / content)
    return prim, abs(content)


def _combo_vec(combo: TrigModeCombination, index: dict[TrigMode, int],
               m: int) -> np.ndarray:
    v = np.zeros(m)
    for mode, q in combo.terms.items():
        v[index[mode]] = float(q)
    return v


def _float_norm(vec: np.ndarray, modes: Sequence[TrigMode], k: int) -> float:
    w = np.array([float(m.ell_sq) ** (k + 1) for m in modes])
    return float(np.sqrt(2.0 * np.pi**2 * np.sum(w * vec * vec)))


class JumpSchedule:
    """Sum of smoothed steps: value(t) = sum_k jump_k * S(2(t-c_k)/w_k).

    Windows must not overlap; evaluation is a binary search plus at most one
    partial transition.  derivative(t) is exact (closed-form bump)."""

    def __init__(self, centers: np.ndarray, widths: np.ndarray,
                 jumps: np.ndarray):
        order = np.argsort(centers, kind="stable")
        self.centers = np.asarray(centers, float)[order]
        self.widths = np.asarray(widths, float)[order]
        self.jumps = np.asarray(jumps, float)[order]
        self.cum = np.cumsum(self.jumps, axis=0)
        self._ends = self.centers + 0.5 * self.widths
        self._starts = self.centers - 0.5 * self.widths
        if np.any(self._starts[1:] < self._ends[:-1] - 1e-15):
            raise ValueError("transition windows overlap")
        self.dim = self.jumps.shape[1] if self.jumps.ndim == 2 else 0

    @classmethod
    def empty(cls, m: int) -> "JumpSchedule":
        return cls(np.empty(0), np.empty(0), np.empty((0, m)))

    def value(self, t: float) -> np.ndarray:
        k = int(np.searchsorted(self._ends, t, side="right"))
        out = self.cum[k - 1].copy() if k else np.zeros(self.dim)
        if k < len(self.centers) and t > self._starts[k]:
            s = 2.0 * (t - self.centers[k]) / self.widths[k]
            out += self.jumps[k] * float(bump_step(s))
        return out

    def derivative(self, t: float) -> np.ndarray:
        k = int(np.searchsorted(self._ends, t, side="right"))
        if k < len(self.centers) and t > self._starts[k]:
            s = 2.0 * (t - self.centers[k]) / self.widths[k]
            return self.jumps[k] * (2.0 / self.widths[k] * float(bump(s)))
        return np.zeros(self.dim)


# ---------------------------------------------------------------- signal

class ControlSignal:
    """Synthesized control: smoothed interval plateaus plus the exact time
    derivative of the oscillation profile.  Callable as forcing."""

    def __init__(self, modes: list[TrigMode], u_sched: JumpSchedule,
                 zeta_sched: JumpSchedule, horizon: float, n: int,
                 manifest: dict):
        self.modes = modes
        self.u_sched = u_sched
        self.zeta_sched = zeta_sched
        self.horizon = horizon
        self.n = n
        self._manifest = manifest
        self._scatter = []
        for mode in modes:
            l1, l2 = mode.ell
            perp = np.array([-l2, l1], dtype=complex)
            if mode.parity == "cos":
                vp, vn = 0.5 * perp, 0.5 * perp
            else:
                vp, vn = -0.5j * perp, 0.5j * perp
            self._scatter.append(((l1 % n, l2 % n, vp),
                                  ((-l1) % n, (-l2) % n, vn)))
        self._zero = SpectralVectorField(
            np.zeros((2, n, n), dtype=np.complex128))

    def coeff_vector(self, t: float) -> np.ndarray:
        return self.u_sched.value(t) + self.zeta_sched.derivative(t)

    def oscillation_vector(self, t: float) -> np.ndarray:
        return self.zeta_sched.value(t)

    def _field_from(self, vec: np.ndarray) -> SpectralVectorField:
        if not vec.any():
            return self._zero
        c = np.zeros((2, self.n, self.n), dtype=np.complex128)
        for a, entry in zip(vec, self._scatter):
            if a == 0.0:
                continue
            (i1, j1, vp), (i2, j2, vn) = entry
            c[:, i1, j1] += a * vp
            c[:, i2, j2] += a * vn
        return SpectralVectorField(c)

    def __call__(self, t: float) -> SpectralVectorField:
        return self._field_from(self.coeff_vector(t))

    def oscillation_field(self, t: float) -> SpectralVectorField:
        return self._field_from(self.oscillation_vector(t))

    def plateau_field(self, t: float) -> SpectralVectorField:
        """The slow (interval-averaged) part of the control alone."""
        return self._field_from(self.u_sched.value(t))

    def min_width(self) -> float:
        w = float(self.u_sched.widths.min())
        if len(self.zeta_sched.widths):
            w = min(w, float(self.zeta_sched.widths.min()))
        return w

    def mode_labels(self) -> list[str]:
        return [f"{'c' if m.parity == 'cos' else 's'}({m.ell[0]},{m.ell[1]})"
                for m in self.modes]

    def export_csv(self, path: str | Path, samples: int = 2000) -> None:
        ts = np.linspace(0.0, self.horizon, samples)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t"] + self.mode_labels())
            for t in ts:
                writer.writerow([f"{t:.12g}"]
                                + [f"{x:.15g}" for x in self.coeff_vector(t)])

    def manifest(self, path: str | Path | None = None) -> dict:
        if path is not None:
            Path(path).write_text(json.dumps(self._manifest, indent=1))
        return self._manifest


# ---------------------------------------------------------------- report

@dataclass
class CascadeReport:
    horizon: float
    intervals: int
    cycles: int
    snap_bits: int
    galerkin_residual: float
    pwc_residual: float
    xi_counts: list[int]
    group_counts: list[int]
    amplitude_max: float
    slot_min: float
    width_min: float
    identity_verified: bool
    attempts: list[dict] = field(default_factory=list)
    validation: dict | None = None


# ------------------------------------------------------------- assembly

_GAUSS = np.polynomial.legendre.leggauss(24)


def _interval_average(fn: Callable[[float], float], a: float, b: float) -> float:
    x, w = _GAUSS
    ts = 0.5 * (b - a) * x + 0.5 * (a + b)
    return float(sum(wi * fn(ti) for ti, wi in zip(ts, w)) * 0.5)


def _sup_bound(combo: TrigModeCombination) -> float:
    """Pointwise bound: |sum q_l l_perp trig| <= sum |q_l| |l|."""
    return sum(abs(float(q)) * float(np.hypot(*m.ell))
               for m, q in combo.terms.items())


def _step_sq_moment() -> Fraction:
    """Exact <S^2> over one transition window for the `bump_step` profile.

    Writing S(s) = 1/2 + P(s) with P odd, <S^2> = 1/4 + int_0^1 P^2."""
    a = Fraction(35, 32)
    cs = {1: Fraction(1), 3: Fraction(-1), 5: Fraction(3, 5),
          7: Fraction(-1, 7)}
    p2 = sum(a * a * ci * cj / Fraction(i + j + 1)
             for i, ci in cs.items() for j, cj in cs.items())
    return Fraction(1, 4) + p2


_C2 = _step_sq_moment()


def _verify_pair_identity(w: TrigModeCombination, eta: TrigModeCombination,
                          amp: Fraction) -> bool:
    """N(w + amp eta) + N(w - amp eta) == 2 N(w) + 2 amp^2 N(eta), exactly."""
    lhs = nonlinear_term_exact(w + eta * amp) + nonlinear_term_exact(w - eta * amp)
    rhs = nonlinear_term_exact(w) * 2 + nonlinear_term_exact(eta) * (2 * amp * amp)
    return lhs == rhs


def synthesize_tracking_control(target: RampTarget, space: ModeSpace,
                                config: CascadeConfig | None = None, *,
                                validate: bool = False,
                                initial: SpectralVectorField | None = None
                                ) -> tuple[ControlSignal, CascadeReport]:
    """Build the oscillatory control steering the flow along the ramp target.

    With validate=True the control is replayed through the nonlinear solver
    and the tracking error against W is measured; if config.target_error is
    set and missed, the cycle count doubles and the synthesis repeats (up to
    config.max_retries times).
    """
    cfg = config or CascadeConfig()
    attempts: list[dict] = []
    cycles = cfg.cycles
    for attempt in range(cfg.max_retries + 1):
        signal, report = _build_signal(target, space, cfg, cycles)
        report.attempts = attempts
        if not validate:
            return signal, report
        val = _validate_signal(signal, target, cfg, initial)
        report.validation = val
        attempts.append({"cycles": cycles, **val})
        if cfg.target_error is None or val["sup_error"] <= cfg.target_error:
            return signal, report
        cycles *= 2
    return signal, report


def _build_signal(target: RampTarget, space: ModeSpace, cfg: CascadeConfig,
                  cycles: int) -> tuple[ControlSignal, CascadeReport]:
    terms = fullspace_control(target)
    span = ReachableSpan(space)

    inside_terms: list[ModulatedTerm] = []
    galerkin = 0.0
    for term in terms:
        inside, outside = span.split(term.combo)
        if not inside.is_zero():
            inside_terms.append(ModulatedTerm(term.fn, inside))
        if not outside.is_zero():
            out_norm = outside.norm(cfg.norm_k + 2)
            x, w = _GAUSS
            ts = 0.5 * target.T * x + 0.5 * target.T
            galerkin += out_norm * float(np.sum(w * np.abs(
                [term.fn(t) for t in ts])) * 0.5 * target.T)

    # does the control stay live after the ramp?
    live_late = any(abs(term.fn(t)) > 1e-14
                    for term in inside_terms
                    for t in np.linspace(target.t1, target.T, 7)[1:])
    horizon = target.T if live_late else target.t1

    # union mode list of everything the signal can emit: E's support
    emodes = sorted(space.support(), key=_mode_key)
    # plus the modes of the projected full-space control (for pwc residual)
    all_modes = sorted(set(emodes) | {m for t in inside_terms
                                      for m in t.combo.terms}, key=_mode_key)
    index = {m: i for i, m in enumerate(emodes)}
    index_all = {m: i for i, m in enumerate(all_modes)}
    M = len(emodes)

    edges = np.linspace(0.0, horizon, cfg.intervals + 1)
    delta = edges[1] - edges[0]
    cycle_len = delta / cycles

    u_vecs = np.zeros((cfg.intervals, M))
    pwc_residual = 0.0
    xi_counts: list[int] = []
    group_counts: list[int] = []
    amp_max = 0.0
    slot_min = np.inf
    identity_ok = True

    z_centers: list[float] = []
    z_widths: list[float] = []
    z_jumps: list[np.ndarray] = []

    for j in range(cfg.intervals):
        a, b = float(edges[j]), float(edges[j + 1])
        # snapped interval average of the projected control; the scalar
        # modulation is snapped so the exact rational combination (which
        # lives in the reachable span by construction) is preserved
        ubar = TrigModeCombination()
        for term in inside_terms:
            avg = _interval_average(term.fn, a, b)
            ubar = ubar + term.combo * _snap(avg, cfg.snap_bits)
        # pwc residual: L1 distance between u1(t) and the snapped plateau
        x, wq = _GAUSS
        ts = 0.5 * (b - a) * x + 0.5 * (a + b)
        bar_vec = _combo_vec(ubar, index_all, len(all_modes))
        for ti, wi in zip(ts, wq):
            vec = np.zeros(len(all_modes))
            for term in inside_terms:
                vec += term.fn(ti) * _combo_vec(term.combo, index_all,
                                                len(all_modes))
            pwc_residual += wi * 0.5 * (b - a) * _float_norm(
                vec - bar_vec, all_modes, cfg.norm_k + 2)

        u_j, xis = represent_in_extension(ubar, space)
        xi_counts.append(len(xis))
        u_vecs[j] = _combo_vec(u_j, index, M)

        # group xi terms by primitive direction; N(s*eta) = s^2 N(eta)
        groups: dict[tuple, tuple[TrigModeCombination, Fraction]] = {}
        for xi in xis:
            prim, scale = primitive_form(xi)
            key = tuple(sorted(((m, q) for m, q in prim.terms.items()),
                               key=lambda t: _mode_key(t[0])))
            if key in groups:
                groups[key] = (prim, groups[key][1] + scale * scale)
            else:
                groups[key] = (prim, scale * scale)
        glist = list(groups.values())
        group_counts.append(len(glist))
        if not glist:
            continue

        weights = [mu * prim.sobolev_sq_rational(cfg.weight_k)
                   for prim, mu in glist]
        wsum = sum(weights, F0)
        fracs = [(1 - cfg.rest_fraction) * r / wsum for r in weights]
        amps = [float(np.sqrt(float(mu / f)))
                for (prim, mu), f in zip(glist, fracs)]
        # exact bookkeeping: grouping preserved the nonlinear mass
        grouped_mass = reduce(
            lambda acc, t: acc + nonlinear_term_exact(t[0]) * t[1],
            glist, TrigModeCombination())
        raw_mass = reduce(
            lambda acc, xi: acc + nonlinear_term_exact(xi),
            xis, TrigModeCombination())
        identity_ok = identity_ok and (grouped_mass == raw_mass)
        identity_ok = identity_ok and _verify_pair_identity(
            u_j, glist[0][0], Fraction(3, 2))

        prim_vecs = [_combo_vec(prim, index, M) for prim, _ in glist]
        G = len(glist)
        rest_len = float(cfg.rest_fraction) * cycle_len
        fmin = min(float(f) for f in fracs)
        trans_cost = float(4 - 6 * _C2)
        # exact compensation makes the identity width-independent, so the
        # window can take most of the slack: plateau positivity and the
        # rest budget are the only caps
        width = cfg.smoothing_fraction * min(
            fmin * cycle_len / float(6 * _C2 - 1),
            rest_len / (G * trans_cost + 0.5))
        # transitions carry part of the oscillation budget exactly:
        # per group  2 L_g + (6 <S^2> - 1) w = f_g delta  keeps the cycle
        # integral of N(zeta) equal to delta * sum mu_g N(prim_g)
        comp = width * float(6 * _C2 - 1)
        plateaus = [(float(f) * cycle_len - comp) / 2.0 for f in fracs]
        slot_min = min(slot_min, min(plateaus), rest_len)
        for (prim, _), amp in zip(glist, amps):
            amp_max = max(amp_max, amp * _sup_bound(prim))

        for c in range(cycles):
            t_cursor = a + c * cycle_len
            # one-sided first window per interval so the oscillation is
            # exactly zero at every interval edge
            first = (c == 0)
            for vec, amp, length in zip(prim_vecs, amps, plateaus):
                up = t_cursor + width / 2.0 if first else t_cursor
                first = False
                mid = up + width + length
                down = mid + width + length
                step = amp * vec
                z_centers.extend((up, mid, down))
                z_widths.extend((width, width, width))
                z_jumps.extend((step, -2.0 * step, step))
                # zero pit stop of one window before the next group, so no
                # transition ever mixes two oscillation directions
                t_cursor = down + width

    # plateau schedule for the u part: one-sided at the outer edges
    widths_u = cfg.smoothing_fraction * min(delta, cycle_len
                                            * float(cfg.rest_fraction))
    u_centers = [0.0 + widths_u / 2.0]
    u_widths = [widths_u]
    u_jumps = [u_vecs[0]]
    for j in range(1, cfg.intervals):
        u_centers.append(float(edges[j]))
        u_widths.append(widths_u)
        u_jumps.append(u_vecs[j] - u_vecs[j - 1])
    u_centers.append(horizon - widths_u / 2.0)
    u_widths.append(widths_u)
    u_jumps.append(-u_vecs[-1])

    u_sched = JumpSchedule(np.array(u_centers), np.array(u_widths),
                           np.vstack(u_jumps))
    if z_centers:
        zeta_sched = JumpSchedule(np.array(z_centers), np.array(z_widths),
                                  np.vstack(z_jumps))
        width_min = float(np.min(zeta_sched.widths))
    else:
        zeta_sched = JumpSchedule.empty(M)
        width_min = widths_u
    if not np.isfinite(slot_min):
        slot_min = delta

    manifest = {
        "horizon": horizon,
        "intervals": cfg.intervals,
        "cycles": cycles,
        "snap_bits": cfg.snap_bits,
        "rest_fraction": [cfg.rest_fraction.numerator,
                          cfg.rest_fraction.denominator],
        "smoothing_fraction": cfg.smoothing_fraction,
        "modes": [f"{'c' if m.parity == 'cos' else 's'}({m.ell[0]},{m.ell[1]})"
                  for m in emodes],
        "amplitude_max": amp_max,
        "xi_counts": xi_counts,
        "group_counts": group_counts,
        "target": {"amplitude": target.amplitude, "t1": target.t1,
                   "T": target.T,
                   "shape": repr(target.shape)},
    }
    signal = ControlSignal(emodes, u_sched, zeta_sched, horizon,
                           cfg.resolution, manifest)
    report = CascadeReport(
        horizon=horizon, intervals=cfg.intervals, cycles=cycles,
        snap_bits=cfg.snap_bits, galerkin_residual=galerkin,
        pwc_residual=pwc_residual, xi_counts=xi_counts,
        group_counts=group_counts, amplitude_max=amp_max,
        slot_min=float(slot_min), width_min=width_min,
        identity_verified=identity_ok)
    return signal, report


def replay_shifted(signal: ControlSignal, v0: SpectralVectorField,
                   t_final: float, dt: float, *, t0: float = 0.0,
                   record_every: int | None = None,
                   dealias: bool = True) -> TrajectoryRecord:
    """Integrate the flow driven by the signal in shifted variables.

    With y = v - zeta the system reads dy/dt = -N(y + zeta(t)) + u(t): the
    sharp d(zeta)/dt spikes drop out, so the step size is set by the CFL
    condition and the plateau structure instead of the transition windows.
    Equivalent to euler_solve under the full control followed by subtracting
    the oscillation, but far cheaper.  Returns the record of y.
    """
    n = v0.n
    if n != signal.n:
        raise ValueError("initial state and signal resolution differ")
    ws = _Workspace(n, dealias)
    steps = max(1, int(round((t_final - t0) / dt)))
    h = (t_final - t0) / steps
    if record_every is None:
        record_every = max(1, steps // 128)

    q = ws.ik1 * v0.coeffs[1] - ws.ik2 * v0.coeffs[0]
    q[~ws.mask] = 0.0
    mean = v0.mean.copy()

    def rhs(qy: np.ndarray, tau: float) -> np.ndarray:
        z = signal.oscillation_field(tau)
        u = signal.plateau_field(tau)
        v1c, v2c = ws.velocity_of(qy)
        v1c = v1c + z.coeffs[0]
        v2c = v2c + z.coeffs[1]
        qt = qy + ws.ik1 * z.coeffs[1] - ws.ik2 * z.coeffs[0]
        v1 = ws.phys(v1c) + mean[0]
        v2 = ws.phys(v2c) + mean[1]
        w1 = ws.phys(ws.ik1 * qt)
        w2 = ws.phys(ws.ik2 * qt)
        out = -ws.spec(v1 * w1 + v2 * w2)
        out[~ws.mask] = 0.0
        out[0, 0] = 0.0
        fc = ws.ik1 * u.coeffs[1] - ws.ik2 * u.coeffs[0]
        fc[~ws.mask] = 0.0
        return out + fc

    def snap(qc: np.ndarray) -> SpectralVectorField:
        v1c, v2c = ws.velocity_of(qc)
        return SpectralVectorField(np.stack([v1c, v2c]), mean.copy())

    times = [t0]
    snaps = [snap(q)]
    t = t0
    for k in range(steps):
        k1 = rhs(q, t)
        k2 = rhs(q + 0.5 * h * k1, t + 0.5 * h)
        k3 = rhs(q + 0.5 * h * k2, t + 0.5 * h)
        k4 = rhs(q + h * k3, t + h)
        q = q + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        t = t0 + (k + 1) * h
        if not np.isfinite(q[0, 1]):
            raise FloatingPointError(f"shifted replay lost finiteness at t={t}")
        if (k + 1) % record_every == 0 or k + 1 == steps:
            times.append(t)
            snaps.append(snap(q))
    return TrajectoryRecord(np.array(times), snaps)


def _validate_signal(signal: ControlSignal, target: RampTarget,
                     cfg: CascadeConfig,
                     initial: SpectralVectorField | None) -> dict:
    n = cfg.resolution
    v0 = initial if initial is not None else SpectralVectorField(
        np.zeros((2, n, n), dtype=np.complex128))
    speed = abs(target.amplitude) * _sup_bound(target.shape) \
        + signal._manifest["amplitude_max"] + 1e-12
    dt_cfl = 2.0 / (max(1, n // 3) * speed) * 0.4
    wmin = signal.min_width()
    if cfg.validation_shifted:
        dt = min(dt_cfl, wmin / 6.0)
        if cfg.validation_dt is not None:
            dt = cfg.validation_dt
        slow = replay_shifted(signal, v0, signal.horizon, dt,
                              record_every=max(1, int(round(
                                  signal.horizon / dt)) // 64))
    else:
        dt = min(dt_cfl, wmin / 16.0)
        if cfg.validation_dt is not None:
            dt = cfg.validation_dt
        rec = euler_solve(v0, signal.horizon, dt, forcing=signal,
                          record_every=max(1, int(round(
                              signal.horizon / dt)) // 64))
        slow = shifted_record(rec, signal.oscillation_field)
    errs = []
    for t, snap in zip(slow.times, slow.snapshots):
        wt = target.field(float(t), n)
        errs.append(sobolev_norm(
            SpectralVectorField(snap.coeffs - wt.coeffs, snap.mean - wt.mean),
            cfg.norm_k))
    errs = np.array(errs)
    wt_end = target.field(float(slow.times[-1]), n)
    ref = max(sobolev_norm(wt_end, cfg.norm_k), 1e-30)
    return {"sup_error": float(np.max(errs)),
            "final_error": float(errs[-1]),
            "final_relative": float(errs[-1] / ref),
            "dt": float(dt),
            "steps": int(round(signal.horizon / dt))}
