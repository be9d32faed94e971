import numpy as np
import pytest

from torusflow.fieldio import (
    SnapshotFormatError,
    dump_field_json,
    field_info,
    load_field_json,
    read_field,
    write_field,
)
from torusflow.fields import SpectralScalarField, random_divfree, random_scalar


def test_binary_roundtrip_scalar(tmp_path):
    rng = np.random.default_rng(0)
    f = random_scalar(32, 10, rng)
    f.mean = 1.25
    p = tmp_path / "f.tfld"
    write_field(p, f)
    g = read_field(p)
    assert isinstance(g, SpectralScalarField)
    assert g.mean == f.mean
    assert np.array_equal(g.coeffs, f.coeffs)


def test_binary_roundtrip_vector(tmp_path):
    rng = np.random.default_rng(1)
    v = random_divfree(32, 10, rng)
    v.mean[:] = (0.5, -0.25)
    p = tmp_path / "v.tfld"
    write_field(p, v)
    w = read_field(p)
    assert np.array_equal(w.coeffs, v.coeffs)
    assert np.array_equal(w.mean, v.mean)


def test_bad_magic_rejected(tmp_path):
    p = tmp_path / "junk.tfld"
    p.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(SnapshotFormatError):
        read_field(p)


def test_truncated_file_rejected(tmp_path):
    rng = np.random.default_rng(2)
    f = random_scalar(16, 5, rng)
    p = tmp_path / "f.tfld"
    write_field(p, f)
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(Exception):
        read_field(p)


def test_json_dump_lossless(tmp_path):
    rng = np.random.default_rng(3)
    v = random_divfree(16, 5, rng)
    p = tmp_path / "v.json"
    dump_field_json(p, v)
    w = load_field_json(p)
    assert np.array_equal(w.coeffs, v.coeffs)


def test_field_info(tmp_path):
    rng = np.random.default_rng(4)
    v = random_divfree(32, 6, rng)
    p = tmp_path / "v.tfld"
    write_field(p, v)
    info = field_info(p)
    assert info["kind"] == "vector"
    assert info["n"] == 32
    assert info["divergence_residual"] < 1e-12
    assert info["norms"]["H0"] > 0
