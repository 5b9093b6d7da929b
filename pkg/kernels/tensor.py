from numbers import Real
from typing import ClassVar, TypeVar

from beartype import beartype
import numpy as np

from helpers.errors import InvalidShapeError, BoundsError


T = TypeVar("T", bound="DenseTensor")


class DenseTensor(object):
    """Read-only (batch, channels, width) tensor, width contiguous.
    Weight tensors reuse the layout as (c_out, c_in, k).
    """

    DTYPE: ClassVar[type] = np.float32
    DTYPE_TAG: ClassVar[str] = "f32"

    @beartype
    def __init__(self, data: np.ndarray):
        if data.ndim != 3:
            raise InvalidShapeError(f"expected a 3-d array, got shape {data.shape}")
        if min(data.shape) < 1:
            raise InvalidShapeError(f"every dimension must be >= 1, got {data.shape}")
        arr = np.ascontiguousarray(data, dtype=self.DTYPE).copy()
        arr.setflags(write=False)  # mutation only during construction
        self._data = arr

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple[int, int, int]:
        b, c, w = self._data.shape
        return (b, c, w)

    def __len__(self) -> int:
        return self._data.size

    def __repr__(self) -> str:
        return f"{type(self).__name__}(shape={self.shape})"

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, DenseTensor) or type(other) is not type(self):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self._data, other.data))

    __hash__ = None  # type: ignore[assignment]

    @beartype
    @classmethod
    def create(cls: type[T], shape: tuple[int, int, int], fill: Real = 0.) -> T:
        if min(shape) < 1:
            raise InvalidShapeError(f"every dimension must be >= 1, got {shape}")
        return cls(np.full(shape, fill, dtype=cls.DTYPE))


class TensorF32(DenseTensor):
    DTYPE = np.float32
    DTYPE_TAG = "f32"


class TensorI32(DenseTensor):
    DTYPE = np.int32
    DTYPE_TAG = "i32"


class TensorI8(DenseTensor):
    DTYPE = np.int8
    DTYPE_TAG = "i8"


DTYPE_TAGS: dict[str, type[DenseTensor]] = {
    cls.DTYPE_TAG: cls for cls in (TensorF32, TensorI32, TensorI8)}


@beartype
def create(shape: tuple[int, int, int], fill: Real = 0.) -> TensorF32:
    return TensorF32.create(shape, fill)


@beartype
def tap_group(weights: T, offset: int, length: int) -> T:
    """Copy the taps [offset, offset + length) of a (c_out, c_in, k) kernel"""
    k = weights.shape[-1]
    if offset < 0 or length < 1 or offset + length > k:
        raise BoundsError(f"taps [{offset}, {offset + length}) out of kernel range [0, {k})")
    return type(weights)(weights.data[..., offset:offset + length])


@beartype
def concat_taps(slices: list[T]) -> T:
    """Inverse of `tap_group` over a covering, ordered list of slices"""
    assert len(slices) > 0, "nothing to concatenate"
    kind = type(slices[0])
    assert all(type(s) is kind for s in slices), "mixed dtypes"
    return kind(np.concatenate([s.data for s in slices], axis=-1))
