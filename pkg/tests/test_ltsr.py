import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sphassim import ltsr
from sphassim.autodiff import ParamVector


def test_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    t = rng.normal(size=(3, 4, 5))
    path = tmp_path / "t.ltsr"
    ltsr.save_ltsr(t, path)
    back = ltsr.load_ltsr(path)
    assert np.array_equal(back.tensor, t)
    assert back.tensor.dtype == np.float64
    assert back.segments == {} and back.meta == {}


@given(st.lists(st.integers(min_value=1, max_value=5), min_size=1, max_size=4),
       st.integers(min_value=0, max_value=2 ** 31))
@settings(max_examples=25, deadline=None)
def test_roundtrip_random_shapes(tmp_path_factory, shape, seed):
    rng = np.random.default_rng(seed)
    t = rng.normal(size=tuple(shape))
    path = tmp_path_factory.mktemp("ltsr") / "x.ltsr"
    ltsr.save_ltsr(t, path)
    assert np.array_equal(ltsr.load_ltsr(path).tensor, t)


def test_magic_mismatch(tmp_path):
    path = tmp_path / "bad.ltsr"
    ltsr.save_ltsr(np.zeros(3), path)
    blob = bytearray(path.read_bytes())
    blob[:4] = b"NOPE"
    path.write_bytes(bytes(blob))
    with pytest.raises(ltsr.LtsrMagicError):
        ltsr.load_ltsr(path)


def test_truncation(tmp_path):
    path = tmp_path / "short.ltsr"
    ltsr.save_ltsr(np.zeros(4), path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-9])          # drop part of the payload
    with pytest.raises(ltsr.LtsrTruncationError):
        ltsr.load_ltsr(path)


def test_dtype_mismatch(tmp_path):
    path = tmp_path / "dtype.ltsr"
    ltsr.save_ltsr(np.zeros(2), path)
    blob = bytearray(path.read_bytes())
    # dtype byte sits after magic, version, ndim, dims
    blob[4 + 4 + 4 + 4] = 7
    path.write_bytes(bytes(blob))
    with pytest.raises(ltsr.LtsrDtypeError):
        ltsr.load_ltsr(path)


def test_footer_roundtrip(tmp_path):
    path = tmp_path / "seg.ltsr"
    t = np.arange(10.0)
    segments = {"a": (0, (2, 3)), "b": (6, (4,))}
    meta = {"kind": "demo", "note": "x"}
    ltsr.save_ltsr(t, path, segments=segments, meta=meta)
    back = ltsr.load_ltsr(path)
    assert np.array_equal(back.tensor, t)
    assert back.segments == segments
    assert back.meta == meta


def test_params_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    pv = ParamVector.from_segments({"W": rng.normal(size=(3, 2)),
                                    "b": rng.normal(size=(3,))})
    path = tmp_path / "p.ltsr"
    ltsr.save_params(pv, path, meta={"kind": "demo"})
    back, meta = ltsr.load_params(path)
    assert np.array_equal(back.values, pv.values)
    assert back.layout == pv.layout
    assert meta == {"kind": "demo"}


def test_deterministic_bytes(tmp_path):
    t = np.arange(6.0).reshape(2, 3)
    p1, p2 = tmp_path / "a.ltsr", tmp_path / "b.ltsr"
    ltsr.save_ltsr(t, p1, segments={"z": (0, (6,))}, meta={"k": 1})
    ltsr.save_ltsr(t, p2, segments={"z": (0, (6,))}, meta={"k": 1})
    assert p1.read_bytes() == p2.read_bytes()
