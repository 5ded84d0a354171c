import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from lgf_distill import lgft
from lgf_distill.lgft import LGFTError


def test_header_layout():
    buf = lgft.dumps(np.arange(6, dtype=np.float64).reshape(2, 3))
    assert buf[:4] == b"LGFT"
    assert struct.unpack_from("<IBB", buf, 4) == (1, 1, 2)
    assert struct.unpack_from("<2Q", buf, 10) == (2, 3)
    assert len(buf) == 10 + 16 + 6 * 8


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(st.sampled_from([np.float32, np.float64, np.uint8]),
                  hnp.array_shapes(min_dims=1, max_dims=4, min_side=1, max_side=4)))
def test_roundtrip(arr):
    out = lgft.loads(lgft.dumps(arr))
    assert out.dtype == arr.dtype and out.shape == arr.shape
    assert out.tobytes() == arr.tobytes()


def test_bool_written_as_u8(tmp_path):
    mask = np.array([[True, False], [False, True]])
    lgft.save(tmp_path / "m.lgft", mask)
    back = lgft.load(tmp_path / "m.lgft")
    assert back.dtype == np.uint8 and np.array_equal(back.astype(bool), mask)


def test_save_leaves_no_temp_files(tmp_path):
    lgft.save(tmp_path / "x.lgft", np.ones(3))
    assert [p.name for p in tmp_path.iterdir()] == ["x.lgft"]


@pytest.mark.parametrize("mutate,msg", [
    (lambda b: b"XXXX" + b[4:], "magic"),
    (lambda b: b[:4] + struct.pack("<I", 2) + b[8:], "version"),
    (lambda b: b[:8] + bytes([9]) + b[9:], "dtype"),
    (lambda b: b[:-1], "payload"),
    (lambda b: b[:12], "truncated"),
])
def test_malformed_rejected(mutate, msg):
    buf = lgft.dumps(np.zeros((2, 2)))
    with pytest.raises(LGFTError, match=msg):
        lgft.loads(mutate(buf))


def test_unsupported_dtype():
    with pytest.raises(LGFTError):
        lgft.dumps(np.zeros(3, dtype=np.int64))
