import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from violindiff.tensor_io import (TensorFormatError, load_checkpoint,
                                  read_tensor, save_checkpoint,
                                  tensor_from_bytes, tensor_to_bytes,
                                  write_tensor)


@given(st.lists(st.integers(min_value=1, max_value=5), min_size=1, max_size=4),
       st.integers(0, 2 ** 31 - 1))
@settings(max_examples=40, deadline=None)
def test_tensor_round_trip(dims, seed):
    arr = np.random.default_rng(seed).standard_normal(dims).astype(np.float32)
    out, used = tensor_from_bytes(tensor_to_bytes(arr))
    assert used == len(tensor_to_bytes(arr))
    assert out.dtype == np.float32
    np.testing.assert_array_equal(out, arr)


def test_layout_is_fixed_little_endian():
    arr = np.array([[1.0, 2.0]], dtype=np.float32)
    blob = tensor_to_bytes(arr)
    assert blob[:4] == b"VDT1"
    assert blob[4] == 1          # dtype tag: float32
    assert blob[5] == 2          # ndim
    assert blob[6:10] == (1).to_bytes(4, "little")
    assert blob[10:14] == (2).to_bytes(4, "little")
    assert blob[14:18] == np.float32(1.0).tobytes()  # row-major payload


def test_rejects_unknown_magic_and_dtype():
    arr = np.zeros(3, dtype=np.float32)
    blob = bytearray(tensor_to_bytes(arr))
    with pytest.raises(TensorFormatError):
        tensor_from_bytes(b"XXXX" + bytes(blob[4:]))
    bad = bytearray(blob)
    bad[4] = 9
    with pytest.raises(TensorFormatError):
        tensor_from_bytes(bytes(bad))
    with pytest.raises(TensorFormatError):
        tensor_from_bytes(bytes(blob[:-2]))  # truncated payload


def test_file_round_trip(tmp_path):
    arr = np.random.default_rng(0).standard_normal((4, 54, 7)).astype(np.float32)
    path = tmp_path / "t.vdt"
    write_tensor(path, arr)
    np.testing.assert_array_equal(read_tensor(path), arr)


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    meta = {"stage": "bend", "nested": {"a": [1, 2]}, "pi": 3.5}
    tensors = {"w": rng.standard_normal((3, 4)), "b": rng.standard_normal(4)}
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, meta, tensors)
    meta2, tensors2 = load_checkpoint(path)
    assert meta2 == meta
    assert set(tensors2) == {"w", "b"}
    for k in tensors:
        np.testing.assert_allclose(tensors2[k], tensors[k], atol=1e-7)  # f32 storage


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(TensorFormatError):
        load_checkpoint(path)
