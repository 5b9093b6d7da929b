import numpy as np
import pytest

from helpers.errors import InvalidShapeError, BoundsError
from helpers.tensor_io import save_tensor, load_tensor, sidecar_path
from kernels.tensor import TensorF32, TensorI32, TensorI8, create, tap_group, concat_taps


class TestCreate:

    def test_zero_fill(self):
        t = create((1, 1, 4), 0.)
        assert t.shape == (1, 1, 4)
        assert np.array_equal(t.data, np.zeros((1, 1, 4), dtype=np.float32))

    def test_constant_fill(self):
        t = create((2, 3, 5), 1.5)
        assert len(t) == 30
        assert (t.data == 1.5).all()

    def test_zero_sized_dimension(self):
        with pytest.raises(InvalidShapeError):
            create((1, 1, 0), 0.)

    def test_not_three_dims(self):
        with pytest.raises(InvalidShapeError):
            TensorF32(np.zeros((2, 2)))

    def test_read_only(self):
        t = create((1, 2, 3), 1.)
        with pytest.raises(ValueError):
            t.data[0, 0, 0] = 2.


class TestTapGroup:

    @pytest.fixture
    def kernel(self):
        return TensorF32(np.arange(2 * 3 * 8, dtype=np.float32).reshape(2, 3, 8))

    def test_first_group(self, kernel):
        group = tap_group(kernel, 0, 3)
        assert group.shape == (2, 3, 3)
        assert np.array_equal(group.data, kernel.data[..., 0:3])

    def test_remainder(self, kernel):
        rem = tap_group(kernel, 6, 2)
        assert np.array_equal(rem.data, kernel.data[..., 6:8])

    def test_identity_slice(self):
        k3 = TensorF32(np.random.default_rng(0).normal(size=(4, 2, 3)))
        assert tap_group(k3, 0, 3) == k3

    @pytest.mark.parametrize(("offset", "length"), [(6, 3), (-1, 2), (0, 0), (8, 1)])
    def test_out_of_range(self, kernel, offset, length):
        with pytest.raises(BoundsError):
            tap_group(kernel, offset, length)

    def test_keeps_integer_width(self):
        w = TensorI32(np.full((1, 1, 5), 300, dtype=np.int32))
        assert isinstance(tap_group(w, 3, 2), TensorI32)
        assert (tap_group(w, 3, 2).data == 300).all()

    def test_pure(self, kernel):
        assert tap_group(kernel, 3, 3) == tap_group(kernel, 3, 3)

    @pytest.mark.parametrize("k", [3, 4, 8, 13])
    def test_covering_slices_rebuild_the_kernel(self, k):
        w = TensorF32(np.random.default_rng(k).normal(size=(3, 2, k)))
        groups = [tap_group(w, o, 3) for o in range(0, 3 * (k // 3), 3)]
        if k % 3:
            groups.append(tap_group(w, 3 * (k // 3), k % 3))
        assert concat_taps(groups) == w


class TestTensorFile:

    def test_float_file(self, tmp_path):
        t = TensorF32(np.random.default_rng(0).normal(size=(2, 3, 7)))
        path = tmp_path / "acts.f32"
        save_tensor(path, t)
        assert path.stat().st_size == 2 * 3 * 7 * 4
        assert sidecar_path(path).exists()
        assert load_tensor(path) == t

    def test_int8_file(self, tmp_path):
        t = TensorI8(np.arange(-8, 8, dtype=np.int8).reshape(1, 2, 8))
        save_tensor(tmp_path / "q.i8", t)
        loaded = load_tensor(tmp_path / "q.i8")
        assert isinstance(loaded, TensorI8)
        assert loaded == t

    def test_little_endian_payload(self, tmp_path):
        save_tensor(tmp_path / "one.i32", TensorI32(np.array([[[1]]], dtype=np.int32)))
        assert (tmp_path / "one.i32").read_bytes() == b"\x01\x00\x00\x00"

    def test_size_mismatch(self, tmp_path):
        path = tmp_path / "bad.f32"
        save_tensor(path, create((1, 1, 4), 1.))
        sidecar_path(path).write_text('{"shape": [1, 1, 5], "dtype": "f32"}')
        with pytest.raises(InvalidShapeError):
            load_tensor(path)

    def test_unknown_dtype(self, tmp_path):
        path = tmp_path / "bad.f16"
        save_tensor(path, create((1, 1, 4), 1.))
        sidecar_path(path).write_text('{"shape": [1, 1, 4], "dtype": "f16"}')
        with pytest.raises(InvalidShapeError):
            load_tensor(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_tensor(tmp_path / "nope.f32")
