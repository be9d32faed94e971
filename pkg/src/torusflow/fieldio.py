"""Snapshot serialization: a small binary format plus a lossless JSON dump.

Binary layout (little-endian throughout):

    magic   4 bytes  b"TFLD"
    version u32      currently 1
    n       u32      resolution
    kind    u32      0 = scalar, 1 = vector
    mean    f64 x1 (scalar) or x2 (vector)
    coeffs  f64 pairs (re, im), row-major in fft layout; vector fields store
            component 1 fully, then component 2.

Row-major fft layout means rows l1 = 0, 1, ..., n/2-1, -n/2, ..., -1 and the
same ordering within each row for l2.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .fields import SpectralScalarField, SpectralVectorField, Field

MAGIC = b"TFLD"
VERSION = 1


class SnapshotFormatError(ValueError):
    pass


def write_field(path: str | Path, f: Field) -> None:
    path = Path(path)
    scalar = isinstance(f, SpectralScalarField)
    kind = 0 if scalar else 1
    mean = np.atleast_1d(np.asarray(f.mean, dtype="<f8"))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", VERSION, f.n, kind))
        fh.write(mean.tobytes())
        coeffs = f.coeffs if not scalar else f.coeffs[None]
        for comp in coeffs:
            flat = np.empty(comp.size * 2, dtype="<f8")
            flat[0::2] = np.real(comp).ravel()
            flat[1::2] = np.imag(comp).ravel()
            fh.write(flat.tobytes())


def read_field(path: str | Path) -> Field:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise SnapshotFormatError(f"{path}: bad magic {raw[:4]!r}")
    version, n, kind = struct.unpack_from("<III", raw, 4)
    if version != VERSION:
        raise SnapshotFormatError(f"{path}: unsupported version {version}")
    if kind not in (0, 1):
        raise SnapshotFormatError(f"{path}: unknown kind {kind}")
    off = 16
    nmean = 1 if kind == 0 else 2
    mean = np.frombuffer(raw, dtype="<f8", count=nmean, offset=off)
    off += 8 * nmean
    ncomp = 1 if kind == 0 else 2
    comps = []
    for _ in range(ncomp):
        flat = np.frombuffer(raw, dtype="<f8", count=2 * n * n, offset=off)
        off += 16 * n * n
        comps.append((flat[0::2] + 1j * flat[1::2]).reshape(n, n))
    if off != len(raw):
        raise SnapshotFormatError(f"{path}: trailing bytes")
    if kind == 0:
        return SpectralScalarField(comps[0], float(mean[0]))
    return SpectralVectorField(np.stack(comps), mean.copy())


def dump_field_json(path: str | Path, f: Field) -> None:
    """Human-inspectable dump: every nonzero mode with full-precision floats."""
    scalar = isinstance(f, SpectralScalarField)
    comps = f.coeffs[None] if scalar else f.coeffs
    k = np.fft.fftfreq(f.n, d=1.0 / f.n).astype(int)
    modes = []
    for ci, comp in enumerate(comps):
        idx = np.argwhere(comp != 0)
        for i, j in idx:
            modes.append({
                "component": int(ci),
                "l1": int(k[i]),
                "l2": int(k[j]),
                "re": float(np.real(comp[i, j])),
                "im": float(np.imag(comp[i, j])),
            })
    doc = {
        "kind": "scalar" if scalar else "vector",
        "n": f.n,
        "mean": [float(f.mean)] if scalar else [float(m) for m in f.mean],
        "modes": modes,
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def load_field_json(path: str | Path) -> Field:
    doc = json.loads(Path(path).read_text())
    n = int(doc["n"])
    scalar = doc["kind"] == "scalar"
    comps = np.zeros((1 if scalar else 2, n, n), dtype=np.complex128)
    for m in doc["modes"]:
        comps[m["component"], m["l1"] % n, m["l2"] % n] = m["re"] + 1j * m["im"]
    if scalar:
        return SpectralScalarField(comps[0], doc["mean"][0])
    return SpectralVectorField(comps, np.asarray(doc["mean"]))


def field_info(path: str | Path) -> dict:
    """Header summary plus a few norms, for the CLI."""
    from .fields import sobolev_norm

    f = read_field(path)
    scalar = isinstance(f, SpectralScalarField)
    info = {
        "path": str(path),
        "kind": "scalar" if scalar else "vector",
        "n": f.n,
        "mean": [float(f.mean)] if scalar else [float(m) for m in f.mean],
        "nonzero_modes": int(np.count_nonzero(f.coeffs)),
        "norms": {f"H{k}": sobolev_norm(f, k) for k in (0, 1, 2, 3)},
    }
    if not scalar:
        info["divergence_residual"] = f.divergence_norm()
    return info
