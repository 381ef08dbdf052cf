import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from d2sa.io import load_manifest, load_tensor, read_pgm, save_manifest, save_tensor, write_pgm


def test_header_format(tmp_path):
    path = save_tensor(tmp_path / "a.d2t", np.arange(6.0).reshape(2, 3))
    head = path.read_bytes().split(b"\n", 1)[0]
    assert head == b"d2sa-tensor v1 float64 2 2 3"
    assert len(path.read_bytes()) == len(head) + 1 + 6 * 8


def test_complex_layout(tmp_path):
    z = np.array([[1 + 2j, 3 - 4j]])
    path = save_tensor(tmp_path / "z.d2t", z)
    payload = np.frombuffer(path.read_bytes().split(b"\n", 1)[1], dtype="<f8")
    np.testing.assert_array_equal(payload, [1, 3, 2, -4])


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 5)), elements=st.floats(allow_nan=False, width=64)))
def test_real_roundtrip_bit_exact(tmp_path_factory, a):
    path = save_tensor(tmp_path_factory.mktemp("t") / "x.d2t", a)
    assert load_tensor(path).tobytes() == a.tobytes()


def test_complex_roundtrip(tmp_path):
    z = np.random.default_rng(0).normal(size=(3, 4, 5)) * (1 + 1j) + 1j
    back = load_tensor(save_tensor(tmp_path / "c.d2t", z))
    assert back.dtype == np.complex128 and back.tobytes() == z.tobytes()


def test_corrupt_header(tmp_path):
    p = tmp_path / "bad.d2t"
    p.write_bytes(b"not-a-tensor\n")
    with pytest.raises(ValueError):
        load_tensor(p)


def test_manifest_roundtrip(tmp_path):
    m = {"a": [1, 2], "b": {"c": 0.5}}
    assert load_manifest(save_manifest(tmp_path / "m.json", m)) == m


def test_pgm_roundtrip(tmp_path):
    img = np.random.default_rng(1).integers(0, 256, size=(7, 9)).astype(np.uint8)
    path = write_pgm(tmp_path / "i.pgm", img)
    assert path.read_bytes().startswith(b"P5\n9 7\n255\n")
    np.testing.assert_array_equal(read_pgm(path), img)


def test_pgm_needs_uint8(tmp_path):
    with pytest.raises(ValueError):
        write_pgm(tmp_path / "f.pgm", np.zeros((3, 3)))
