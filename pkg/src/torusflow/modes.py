"""Exact rational calculus on the divergence-free trigonometric basis.

Basis fields are c_l = l_perp cos(l.x) and s_l = l_perp sin(l.x) with
l_perp = (-l2, l1); the identities c_{-l} = -c_l and s_{-l} = s_l make the
half-lattice {l1 > 0} u {l1 = 0, l2 > 0} a canonical index set.  Everything
here runs in fractions.Fraction with zero tolerance; floats only appear when a
combination is synthesized onto a grid.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction
from math import gcd, isqrt
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .fields import SpectralVectorField

F0 = Fraction(0)
F1 = Fraction(1)
HALF = Fraction(1, 2)


class NotInExtension(ValueError):
    """Target is outside E + span of the advection bilinear values."""

    def __init__(self, msg: str, residual: float):
        super().__init__(msg)
        self.residual = residual


class UnsupportedBasis(ValueError):
    """Representation needs a positive self-advection term the construction
    cannot realize; only arises for combination bases with N(theta) != 0."""


def _canonical(ell: tuple[int, int]) -> tuple[tuple[int, int], int, int]:
    """Map ell to the canonical half-lattice.

    Returns (canonical ell, cos sign, sin sign): c_ell = cos_sign * c_canon,
    s_ell = sin_sign * s_canon.
    """
    l1, l2 = ell
    if l1 == 0 and l2 == 0:
        raise ValueError("zero wavevector has no mode")
    if l1 > 0 or (l1 == 0 and l2 > 0):
        return (l1, l2), 1, 1
    return (-l1, -l2), -1, 1


@dataclass(frozen=True)
class TrigMode:
    """One canonical basis field: ell in the half-lattice, parity cos|sin."""

    ell: tuple[int, int]
    parity: str

    def __post_init__(self):
        if self.parity not in ("cos", "sin"):
            raise ValueError(f"parity must be cos or sin, got {self.parity}")
        canon, _, _ = _canonical(self.ell)
        if canon != tuple(self.ell):
            raise ValueError(f"{self.ell} is not canonical; use TrigMode.canonical")
        object.__setattr__(self, "ell", tuple(self.ell))

    @classmethod
    def canonical(cls, ell: Sequence[int], parity: str) -> tuple["TrigMode", int]:
        """Canonicalize an arbitrary wavevector; returns (mode, sign)."""
        canon, cs, ss = _canonical((int(ell[0]), int(ell[1])))
        sign = cs if parity == "cos" else ss
        return cls(canon, parity), sign

    @property
    def ell_sq(self) -> int:
        return self.ell[0] ** 2 + self.ell[1] ** 2

    def _key(self):
        return (self.ell_sq, self.ell, self.parity)

    def __repr__(self):
        return f"{'c' if self.parity == 'cos' else 's'}{self.ell}"


def _mode_key(m: TrigMode):
    return m._key()


class TrigModeCombination:
    """Finite rational combination of canonical trig modes."""

    __slots__ = ("terms",)

    def __init__(self, terms: dict[TrigMode, Fraction] | None = None):
        self.terms: dict[TrigMode, Fraction] = {}
        if terms:
            for m, q in terms.items():
                q = Fraction(q)
                if q != 0:
                    self.terms[m] = q

    @classmethod
    def from_mode(cls, ell: Sequence[int], parity: str,
                  coeff: Fraction | int = 1) -> "TrigModeCombination":
        mode, sign = TrigMode.canonical(ell, parity)
        return cls({mode: Fraction(coeff) * sign})

    def is_zero(self) -> bool:
        return not self.terms

    def copy(self) -> "TrigModeCombination":
        return TrigModeCombination(dict(self.terms))

    def __add__(self, other: "TrigModeCombination") -> "TrigModeCombination":
        out = dict(self.terms)
        for m, q in other.terms.items():
            out[m] = out.get(m, F0) + q
        return TrigModeCombination(out)

    def __sub__(self, other: "TrigModeCombination") -> "TrigModeCombination":
        out = dict(self.terms)
        for m, q in other.terms.items():
            out[m] = out.get(m, F0) - q
        return TrigModeCombination(out)

    def __mul__(self, a) -> "TrigModeCombination":
        a = Fraction(a)
        return TrigModeCombination({m: q * a for m, q in self.terms.items()})

    __rmul__ = __mul__

    def __neg__(self) -> "TrigModeCombination":
        return self * -1

    def __eq__(self, other) -> bool:
        return isinstance(other, TrigModeCombination) and self.terms == other.terms

    def __repr__(self):
        if not self.terms:
            return "0"
        parts = [f"{q}*{m}" for m, q in sorted(self.terms.items(), key=lambda t: _mode_key(t[0]))]
        return " + ".join(parts)

    def sobolev_sq_rational(self, k: int = 0) -> Fraction:
        """Exact Sobolev norm squared divided by 2 pi^2 (modes are orthogonal:
        the L2 norm of c_l is |l| sqrt(2) pi)."""
        return sum((q * q * Fraction(m.ell_sq) ** (k + 1) for q, m in
                    ((q, m) for m, q in self.terms.items())), F0)

    def norm(self, k: int = 0) -> float:
        return float(np.sqrt(2.0 * np.pi**2 * float(self.sobolev_sq_rational(k))))

    def synthesize(self, n: int) -> SpectralVectorField:
        """Exact Fourier coefficients of the combination at resolution n."""
        c = np.zeros((2, n, n), dtype=np.complex128)
        for mode, q in self.terms.items():
            l1, l2 = mode.ell
            if max(abs(l1), abs(l2)) >= (n + 1) // 2:
                raise ValueError(f"mode {mode} does not fit on an n={n} grid")
            perp = np.array([-l2, l1], dtype=float)
            qf = float(q)
            if mode.parity == "cos":
                amp_pos, amp_neg = 0.5 * qf, 0.5 * qf
            else:
                amp_pos, amp_neg = -0.5j * qf, 0.5j * qf
            c[:, l1 % n, l2 % n] += perp * amp_pos
            c[:, (-l1) % n, (-l2) % n] += perp * amp_neg
        return SpectralVectorField(c)


def _mul_trig(p1: str, p2: str, n_sum: tuple[int, int],
              n_dif: tuple[int, int]) -> list[tuple[tuple[int, int], str, Fraction]]:
    """Product-to-sum for e_{p1}(l.x) * e_{p2}(m.x); n_sum = l+m, n_dif = l-m."""
    if p1 == "cos" and p2 == "cos":
        return [(n_sum, "cos", HALF), (n_dif, "cos", HALF)]
    if p1 == "sin" and p2 == "sin":
        return [(n_dif, "cos", HALF), (n_sum, "cos", -HALF)]
    if p1 == "sin" and p2 == "cos":
        return [(n_sum, "sin", HALF), (n_dif, "sin", HALF)]
    # cos * sin
    return [(n_sum, "sin", HALF), (n_dif, "sin", -HALF)]


def advection_exact(z1: TrigModeCombination,
                    z2: TrigModeCombination) -> TrigModeCombination:
    """Leray-projected advection Pi[(z1.grad) z2], exact.

    Expands each pair of trig terms with product-to-sum identities and
    projects every resulting plane wave back onto the c/s basis.
    """
    acc: dict[TrigMode, Fraction] = {}
    for m1, q1 in z1.terms.items():
        ell = m1.ell
        ell_perp = (-ell[1], ell[0])
        for m2, q2 in z2.terms.items():
            emm = m2.ell
            emm_perp = (-emm[1], emm[0])
            d = ell_perp[0] * emm[0] + ell_perp[1] * emm[1]
            if d == 0:
                continue
            # (z1.grad) z2 ~ q1 q2 d e_{p1}(l.x) e_{p2}'(m.x) m_perp
            if m2.parity == "cos":
                dparity, dsign = "sin", -1
            else:
                dparity, dsign = "cos", 1
            pref = q1 * q2 * d * dsign
            n_sum = (ell[0] + emm[0], ell[1] + emm[1])
            n_dif = (ell[0] - emm[0], ell[1] - emm[1])
            for nvec, parity, w in _mul_trig(m1.parity, dparity, n_sum, n_dif):
                if nvec == (0, 0):
                    continue  # constants are projected out with the mean
                n_perp = (-nvec[1], nvec[0])
                # project m_perp e(n.x) onto n_perp e(n.x) / |n|^2
                proj = Fraction(emm_perp[0] * n_perp[0] + emm_perp[1] * n_perp[1],
                                nvec[0] ** 2 + nvec[1] ** 2)
                if proj == 0:
                    continue
                mode, sign = TrigMode.canonical(nvec, parity)
                val = pref * w * proj * sign
                acc[mode] = acc.get(mode, F0) + val
    return TrigModeCombination(acc)


def nonlinear_term_exact(z: TrigModeCombination) -> TrigModeCombination:
    """Exact counterpart of the grid nonlinear term."""
    return advection_exact(z, z)


def advection_bilinear(z1: TrigModeCombination,
                       z2: TrigModeCombination) -> TrigModeCombination:
    """Symmetric bilinear form B(z1, z2) with B(z, z) = N(z)."""
    out = advection_exact(z1, z2) + advection_exact(z2, z1)
    return out * HALF


class _Echelon:
    """Gauss-Jordan echelon over mode columns with expression tracking."""

    def __init__(self):
        self.rows: dict[TrigMode, tuple[dict[TrigMode, Fraction], dict[int, Fraction]]] = {}

    def reduce(self, combo: TrigModeCombination):
        row = dict(combo.terms)
        expr: dict[int, Fraction] = {}
        while row:
            lead = min(row, key=_mode_key)
            if lead not in self.rows:
                return row, expr, lead
            erow, eexpr = self.rows[lead]
            c = row[lead]
            for m, v in erow.items():
                nv = row.get(m, F0) - c * v
                if nv == 0:
                    row.pop(m, None)
                else:
                    row[m] = nv
            for i, v in eexpr.items():
                nv = expr.get(i, F0) + c * v
                if nv == 0:
                    expr.pop(i, None)
                else:
                    expr[i] = nv
        return row, expr, None

    def insert(self, combo: TrigModeCombination, label: int) -> bool:
        """Insert one column vector; returns False if dependent."""
        row, expr, lead = self.reduce(combo)
        if lead is None:
            return False
        c = row[lead]
        norm = {m: v / c for m, v in row.items()}
        nexpr = {i: -v / c for i, v in expr.items()}
        nexpr[label] = nexpr.get(label, F0) + F1 / c
        # eliminate the new pivot from every existing row
        for p, (erow, eexpr) in self.rows.items():
            if lead in erow:
                f = erow[lead]
                for m, v in norm.items():
                    nv = erow.get(m, F0) - f * v
                    if nv == 0:
                        erow.pop(m, None)
                    else:
                        erow[m] = nv
                for i, v in nexpr.items():
                    nv = eexpr.get(i, F0) - f * v
                    if nv == 0:
                        eexpr.pop(i, None)
                    else:
                        eexpr[i] = nv
        self.rows[lead] = (norm, nexpr)
        return True

    @property
    def dim(self) -> int:
        return len(self.rows)


class ModeSpace:
    """Finite-dimensional space of trig-mode combinations over Q.

    The basis must be linearly independent (checked exactly on construction).
    """

    def __init__(self, basis: Iterable[TrigModeCombination]):
        self.basis: list[TrigModeCombination] = [b.copy() for b in basis]
        self._ech = _Echelon()
        for i, b in enumerate(self.basis):
            if b.is_zero() or not self._ech.insert(b, i):
                raise ValueError(f"basis element {i} is dependent or zero")

    @classmethod
    def from_wavevectors(cls, vectors: Iterable[Sequence[int]]) -> "ModeSpace":
        """Span of {c_l, s_l} over the given wavevectors."""
        basis = []
        seen = set()
        for ell in vectors:
            canon, _, _ = _canonical((int(ell[0]), int(ell[1])))
            if canon in seen:
                continue
            seen.add(canon)
            for parity in ("cos", "sin"):
                basis.append(TrigModeCombination.from_mode(canon, parity))
        return cls(basis)

    @property
    def dim(self) -> int:
        return len(self.basis)

    def support(self) -> set[TrigMode]:
        out: set[TrigMode] = set()
        for b in self.basis:
            out |= set(b.terms)
        return out

    def contains(self, combo: TrigModeCombination) -> bool:
        row, _, lead = self._ech.reduce(combo)
        return lead is None

    def coordinates(self, combo: TrigModeCombination) -> list[Fraction] | None:
        """Exact coordinates in the stored basis, or None if outside."""
        row, expr, lead = self._ech.reduce(combo)
        if lead is not None:
            return None
        return [expr.get(i, F0) for i in range(len(self.basis))]

    def is_single_mode_basis(self) -> bool:
        return all(len(b.terms) == 1 for b in self.basis)

    def single_modes(self) -> list[TrigMode]:
        if not self.is_single_mode_basis():
            raise ValueError("basis is not made of single modes")
        return [next(iter(b.terms)) for b in self.basis]

    def to_json(self, path: str | Path | None = None) -> str:
        doc = [[{"ell": list(m.ell), "parity": m.parity,
                 "coeff": {"num": q.numerator, "den": q.denominator}}
                for m, q in sorted(b.terms.items(), key=lambda t: _mode_key(t[0]))]
               for b in self.basis]
        text = json.dumps(doc, indent=1)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_json(cls, text_or_path: str | Path) -> "ModeSpace":
        try:
            doc = json.loads(str(text_or_path))
        except json.JSONDecodeError:
            doc = json.loads(Path(text_or_path).read_text())
        basis = []
        for elem in doc:
            combo = TrigModeCombination()
            for t in elem:
                combo = combo + TrigModeCombination.from_mode(
                    t["ell"], t["parity"], Fraction(t["coeff"]["num"], t["coeff"]["den"]))
            basis.append(combo)
        return cls(basis)


def extend_space(space: ModeSpace) -> tuple[ModeSpace, bool]:
    """One saturation step: E -> E + span{B(theta_j, theta_k)}.

    Returns (new space, grew).  If the extended span happens to be spanned by
    single modes the returned basis uses them.
    """
    ech = _Echelon()
    basis: list[TrigModeCombination] = []
    for b in space.basis:
        if ech.insert(b, len(basis)):
            basis.append(b.copy())
    grew = False
    nb = len(space.basis)
    for j in range(nb):
        for k in range(j, nb):
            bv = advection_bilinear(space.basis[j], space.basis[k])
            if bv.is_zero():
                continue
            if ech.insert(bv, len(basis)):
                basis.append(bv)
                grew = True
    if not grew:
        return ModeSpace(space.basis), False
    # prefer a pure-mode basis when the span is a coordinate subspace
    ext = ModeSpace(basis)
    mode_rows = [TrigModeCombination({m: F1}) for m in
                 sorted({m for b in basis for m in b.terms}, key=_mode_key)]
    pure = [r for r in mode_rows if ext.contains(r)]
    if len(pure) == len(basis):
        return ModeSpace(pure), True
    return ext, True


@dataclass
class SaturationCertificate:
    saturating: bool
    generates_lattice: bool
    witness_pair: tuple[tuple[int, int], tuple[int, int]] | None
    reason: str


def is_saturating(vectors: Sequence[Sequence[int]]) -> SaturationCertificate:
    """Saturation test for E(K): K must generate Z^2 as a group and contain
    two non-parallel wavevectors of different lengths."""
    K = [(int(v[0]), int(v[1])) for v in vectors]
    K = [v for v in K if v != (0, 0)]
    if not K:
        return SaturationCertificate(False, False, None, "empty generator set")
    g_coord = 0
    for a, b in K:
        g_coord = gcd(g_coord, gcd(abs(a), abs(b)))
    g_det = 0
    for i in range(len(K)):
        for j in range(i + 1, len(K)):
            det = K[i][0] * K[j][1] - K[i][1] * K[j][0]
            g_det = gcd(g_det, abs(det))
    generates = (g_coord == 1) and (g_det == 1)
    witness = None
    for i in range(len(K)):
        for j in range(i + 1, len(K)):
            det = K[i][0] * K[j][1] - K[i][1] * K[j][0]
            li = K[i][0] ** 2 + K[i][1] ** 2
            lj = K[j][0] ** 2 + K[j][1] ** 2
            if det != 0 and li != lj:
                witness = (K[i], K[j])
                break
        if witness:
            break
    if not generates:
        reason = "does not generate the integer lattice (gcd criterion)"
    elif witness is None:
        reason = "no non-parallel pair of different lengths"
    else:
        reason = "generator set with a non-parallel unequal-length pair"
    return SaturationCertificate(generates and witness is not None, generates,
                                 witness, reason)


@dataclass
class SaturationReport:
    covered: bool
    steps: int
    dims: list[int]
    level: int
    missing: list[str]
    stalled: bool


def _block_modes(level: int) -> list[TrigMode]:
    out = []
    for l1 in range(0, level + 1):
        for l2 in range(-level, level + 1):
            if l1 == 0 and l2 <= 0:
                continue
            for parity in ("cos", "sin"):
                out.append(TrigMode((l1, l2), parity))
    return out


def saturation_chain(space: ModeSpace, level: int,
                     max_steps: int = 12) -> tuple[list[ModeSpace], SaturationReport]:
    """Iterate extend_space until all modes with |l|_inf <= level are covered.

    Never raises on failure: a stalled or exhausted chain is reported in the
    SaturationReport and the partial chain is returned.
    """
    chain = [space]
    targets = _block_modes(level)
    dims = [space.dim]
    for step in range(1, max_steps + 1):
        cur = chain[-1]
        missing = [m for m in targets
                   if not cur.contains(TrigModeCombination({m: F1}))]
        if not missing:
            return chain, SaturationReport(True, step - 1, dims, level, [], False)
        new, grew = extend_space(cur)
        chain.append(new)
        dims.append(new.dim)
        if not grew:
            miss = [repr(m) for m in missing]
            return chain, SaturationReport(False, step, dims, level, miss, True)
    cur = chain[-1]
    missing = [repr(m) for m in targets
               if not cur.contains(TrigModeCombination({m: F1}))]
    return chain, SaturationReport(not missing, max_steps, dims, level,
                                   missing, False)


_DENOMINATOR_CAP = 1_000_000


def _four_square(m: int) -> tuple[int, int, int, int]:
    """m = a^2 + b^2 + c^2 + d^2 (Lagrange); small search, m modest."""
    if m < 0:
        raise ValueError("negative input")
    for a in range(isqrt(m), -1, -1):
        r1 = m - a * a
        for b in range(isqrt(r1), -1, -1):
            r2 = r1 - b * b
            c = isqrt(r2)
            while c * c * 2 >= r2:
                d2 = r2 - c * c
                d = isqrt(d2)
                if d * d == d2:
                    return a, b, c, d
                c -= 1
                if c < 0:
                    break
    raise AssertionError("four-square search failed")  # unreachable


def _expand_negative_multiple(beta: Fraction,
                              eta: TrigModeCombination) -> list[TrigModeCombination]:
    """xi list with sum N(xi) = beta N(eta), beta > 0, all rational, exact.

    Peels integer squares b^2 <= beta greedily (xi = b eta, so amplitudes grow
    like sqrt(beta)), then writes the fractional residue P/Q as a sum of at
    most four rational squares via P*Q = a^2 + ... + d^2 over Q^2.
    """
    assert beta > 0
    if beta.denominator > _DENOMINATOR_CAP:
        raise UnsupportedBasis(
            f"coefficient denominator {beta.denominator} too large; snap "
            "control values to small dyadic rationals before representing")
    xis: list[TrigModeCombination] = []
    while beta >= 1:
        b = isqrt(int(beta))
        xis.append(eta * b)
        beta -= b * b
    if beta > 0:
        p, q = beta.numerator, beta.denominator
        for x in _four_square(p * q):
            if x:
                xis.append(eta * Fraction(x, q))
    return xis


def represent_in_extension(u1: TrigModeCombination, space: ModeSpace
                           ) -> tuple[TrigModeCombination, list[TrigModeCombination]]:
    """Write u1 = u - sum_i N(xi_i) with u and every xi_i inside `space`.

    Solves u1 over the columns [basis, B(theta_j, theta_k)] exactly, then
    converts each bilinear term with the polarization
    a B(zeta, xi) = -(|a|/2) N(zeta -/+ xi) + (|a|/2)(N(zeta) + N(xi)),
    so oscillation amplitudes grow like sqrt(|a|).  Surviving positive
    self-advection terms (only possible when some basis element has
    N(theta) != 0) are unsupported.  The reconstruction u - sum N(xi_i) == u1
    is asserted exactly before returning.
    """
    nb = space.dim
    ech = _Echelon()
    cols: list[TrigModeCombination] = []
    pair_of: dict[int, tuple[int, int]] = {}
    for i, b in enumerate(space.basis):
        ech.insert(b, i)
        cols.append(b)
    idx = nb
    for j in range(nb):
        for k in range(j, nb):
            bv = advection_bilinear(space.basis[j], space.basis[k])
            if bv.is_zero():
                continue
            if ech.insert(bv, idx):
                cols.append(bv)
                pair_of[idx] = (j, k)
                idx += 1
    row, expr, lead = ech.reduce(u1)
    if lead is not None:
        rem = TrigModeCombination(row)
        raise NotInExtension(
            "target has a component outside E + span{B(theta_j, theta_k)}",
            rem.norm(0))

    u = TrigModeCombination()
    signed_self: dict[int, Fraction] = {}  # accumulated c_j on N(theta_j)
    xis: list[TrigModeCombination] = []
    for i, coef in sorted(expr.items()):
        if coef == 0:
            continue
        if i < nb:
            u = u + space.basis[i] * coef
            continue
        j, k = pair_of[i]
        zeta, xi = space.basis[j], space.basis[k]
        if j == k:
            # a B(t,t) = a N(t)
            signed_self[j] = signed_self.get(j, F0) + coef
            continue
        # a B(zeta,xi) = -(|a|/2) N(zeta -/+ xi) + (|a|/2)(N(zeta) + N(xi))
        beta = abs(coef) * HALF
        eta = (zeta - xi) if coef > 0 else (zeta + xi)
        xis.extend(_expand_negative_multiple(beta, eta))
        signed_self[j] = signed_self.get(j, F0) + beta
        signed_self[k] = signed_self.get(k, F0) + beta
    for j, c in sorted(signed_self.items()):
        if c == 0:
            continue
        theta = space.basis[j]
        if nonlinear_term_exact(theta).is_zero():
            continue
        if c < 0:
            xis.extend(_expand_negative_multiple(-c, theta))
        else:
            raise UnsupportedBasis(
                f"positive self-advection term {c} N(theta_{j}) has no "
                "minus-only realization; basis element advects itself")
    # exact reconstruction check, zero tolerance
    recon = u.copy()
    for xi in xis:
        recon = recon - nonlinear_term_exact(xi)
    if recon != u1:
        raise AssertionError("exact reconstruction failed; this is a bug")
    return u, xis
