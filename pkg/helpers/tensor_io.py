import json
from pathlib import Path
from typing import Union

from beartype import beartype
import numpy as np

from helpers import logger
from helpers.errors import InvalidShapeError
from kernels.tensor import DenseTensor, DTYPE_TAGS


# raw payloads are always little-endian
RAW_DTYPES: dict[str, str] = {"f32": "<f4", "i32": "<i4", "i8": "i1"}


@beartype
def sidecar_path(path: Union[str, Path]) -> Path:
    path = Path(path)
    return path.with_name(f"{path.name}.json")


@beartype
def save_tensor(path: Union[str, Path], tensor: DenseTensor):
    """Write the raw values to `path` and the shape/dtype sidecar next to it"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tag = tensor.DTYPE_TAG
    tensor.data.astype(RAW_DTYPES[tag]).tofile(path)
    with sidecar_path(path).open("w") as f:
        json.dump({"shape": list(tensor.shape), "dtype": tag}, f)
    logger.debug(f"tensor {tensor} saved @: {path}")


@beartype
def load_tensor(path: Union[str, Path]) -> DenseTensor:
    path = Path(path)
    with sidecar_path(path).open("r") as f:
        meta = json.load(f)
    tag = meta.get("dtype")
    if tag not in RAW_DTYPES:
        raise InvalidShapeError(f"unknown dtype tag in sidecar: {tag}")
    shape = tuple(int(d) for d in meta["shape"])
    if len(shape) != 3:  # noqa: PLR2004
        raise InvalidShapeError(f"expected 3 dims in sidecar, got {shape}")
    raw = np.fromfile(path, dtype=RAW_DTYPES[tag])
    if raw.size != int(np.prod(shape)):
        raise InvalidShapeError(f"{path}: {raw.size} values on disk, sidecar says {shape}")
    return DTYPE_TAGS[tag](raw.reshape(shape))
