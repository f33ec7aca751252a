import io
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from txnet import weights as W
from txnet.network import build_model, micro_config, with_changes
from txnet.params import WeightMismatchError

names = st.text(min_size=1, max_size=12)
arrays = hnp.arrays(
    dtype=st.sampled_from([np.float32, np.float64]),
    shape=hnp.array_shapes(min_dims=0, max_dims=4, min_side=0, max_side=4),
    elements=st.floats(allow_nan=True, allow_infinity=True, width=32),
)


@given(st.dictionaries(names, arrays, max_size=5))
def test_round_trip_bit_exact(tensors):
    blob = W.encode(tensors)
    back = W.decode(blob)
    assert list(back) == list(tensors)
    for k, v in tensors.items():
        assert back[k].dtype == v.dtype
        assert back[k].shape == v.shape
        assert back[k].tobytes() == np.ascontiguousarray(v).tobytes()
    assert W.encode(back) == blob


def test_layout_by_hand():
    blob = W.encode({"ab": np.array([1.5, -2.0], dtype=np.float32)})
    expected = (b"TXNW1" + struct.pack("<I", 1) + struct.pack("<I", 2) + b"ab"
                + bytes([0, 1]) + struct.pack("<I", 2) + struct.pack("<2f", 1.5, -2.0))
    assert blob == expected


def test_model_weights_resave_byte_exact(tmp_path):
    m = build_model(micro_config(), seed=3)
    path = tmp_path / "w.txw"
    W.save(path, m.params.arrays())
    again = tmp_path / "again.txw"
    W.save(again, W.load(path))
    assert path.read_bytes() == again.read_bytes()


def test_file_objects():
    buf = io.BytesIO()
    W.save(buf, {"x": np.zeros((2, 3))})
    buf.seek(0)
    assert W.load(buf)["x"].shape == (2, 3)


def test_bad_magic():
    with pytest.raises(W.WeightFormatError, match="magic"):
        W.decode(b"NOPE!" + bytes(4))


@pytest.mark.parametrize("cut", [3, 7, 12, 20, -1])
def test_truncation(cut):
    blob = W.encode({"w": np.arange(6, dtype=np.float64).reshape(2, 3)})
    with pytest.raises(W.WeightFormatError, match="truncated"):
        W.decode(blob[:cut])


def test_trailing_bytes():
    with pytest.raises(W.WeightFormatError, match="trailing"):
        W.decode(W.encode({"w": np.zeros(2)}) + b"\0")


def test_duplicate_names():
    one = W.encode({"w": np.zeros(1)})
    entry = one[len(W.MAGIC) + 4:]
    with pytest.raises(W.WeightFormatError, match="duplicate"):
        W.decode(W.MAGIC + struct.pack("<I", 2) + entry + entry)


def test_unknown_dtype_tag_and_unsupported_dtype():
    blob = bytearray(W.encode({"w": np.zeros(1, dtype=np.float32)}))
    blob[len(W.MAGIC) + 4 + 4 + 1] = 7
    with pytest.raises(W.WeightFormatError, match="dtype tag"):
        W.decode(bytes(blob))
    with pytest.raises(W.WeightFormatError, match="unsupported dtype"):
        W.encode({"i": np.zeros(2, dtype=np.int32)})


def test_load_into_model_round_trip():
    cfg = micro_config()
    m = build_model(cfg, seed=11)
    loaded = build_model(cfg, weights=W.decode(W.encode(m.params.arrays())))
    for name, t in m.params.items():
        assert np.array_equal(t.data, loaded.params[name].data)


def test_mismatched_shape_names_tensor():
    small = build_model(micro_config(), seed=0).params.arrays()
    wide = with_changes(micro_config(), in_channels=1)
    with pytest.raises(WeightMismatchError) as e:
        build_model(wide, weights=small)
    assert e.value.name == "stem.conv.weight"


def test_missing_and_extra_tensors():
    arrays = build_model(micro_config(), seed=0).params.arrays()
    missing = dict(arrays)
    del missing["head.fc.bias"]
    with pytest.raises(WeightMismatchError, match="head.fc.bias"):
        build_model(micro_config(), weights=missing)
    extra = dict(arrays, bogus=np.zeros(1))
    with pytest.raises(WeightMismatchError, match="bogus"):
        build_model(micro_config(), weights=extra)
