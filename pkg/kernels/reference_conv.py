from dataclasses import dataclass, field
from concurrent.futures import ThreadPoolExecutor
from collections.abc import Callable
from typing import Optional

from beartype import beartype
from einops import rearrange
import numpy as np

from helpers.errors import InvalidShapeError, ShapeMismatchError, OverflowRiskError
from helpers.errors import UnsupportedPlanError
from kernels.tensor import TensorF32, TensorI32, tap_group
from kernels.quantizer import QuantizedTensor
from kernels.winograd import BASIS, PlanPath, plan_conv1d, tile_windows


ACC_LIMIT: int = 2 ** 31  # signed 32-bit accumulators


@beartype
def output_width(width: int, k: int, stride: int, padding: tuple[int, int]) -> int:
    padded = width + padding[0] + padding[1]
    if padded < k:
        return 0
    return (padded - k) // stride + 1


@dataclass(frozen=True)
class Conv1DLayer:
    weights: TensorF32  # (c_out, c_in, k)
    bias: Optional[np.ndarray] = None
    stride: int = 1
    padding: tuple[int, int] = (0, 0)

    def __post_init__(self):
        c_out = self.weights.shape[0]
        bias = np.zeros(c_out) if self.bias is None else np.asarray(self.bias)
        if bias.shape != (c_out,):
            raise ShapeMismatchError(f"bias shape {bias.shape} does not match c_out={c_out}")
        bias = bias.astype(np.float32)
        bias.setflags(write=False)
        object.__setattr__(self, "bias", bias)
        if self.stride < 1 or min(self.padding) < 0:
            raise InvalidShapeError(f"bad stride/padding: {self.stride}, {self.padding}")

    @property
    def k(self) -> int:
        return self.weights.shape[-1]

    @property
    def c_in(self) -> int:
        return self.weights.shape[1]

    @property
    def c_out(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class QuantConv1DLayer:
    weights: QuantizedTensor  # (c_out, c_in, k) integers
    bias: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.float32))
    stride: int = 1
    padding: tuple[int, int] = (0, 0)

    def __post_init__(self):
        c_out = self.weights.shape[0]
        bias = np.asarray(self.bias, dtype=np.float32)
        if bias.size == 0:
            bias = np.zeros(c_out, dtype=np.float32)
        if bias.shape != (c_out,):
            raise ShapeMismatchError(f"bias shape {bias.shape} does not match c_out={c_out}")
        object.__setattr__(self, "bias", bias)

    @property
    def k(self) -> int:
        return self.weights.shape[-1]

    @property
    def c_in(self) -> int:
        return self.weights.shape[1]


@beartype
def check_geometry(in_shape: tuple[int, int, int],
                   w_shape: tuple[int, int, int],
                   stride: int,
                   padding: tuple[int, int]) -> int:
    """Validate an (input, kernel) pair and return the output width"""
    if in_shape[1] != w_shape[1]:
        raise ShapeMismatchError(f"input has {in_shape[1]} channels, kernel expects {w_shape[1]}")
    w_out = output_width(in_shape[-1], w_shape[-1], stride, padding)
    if w_out < 1:
        raise ShapeMismatchError(f"width {in_shape[-1]} with padding {padding} "
                                 f"is shorter than the kernel {w_shape[-1]}")
    return w_out


@beartype
def pad_width(x: np.ndarray, padding: tuple[int, int]) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0), padding))


@beartype
def im2col(x: np.ndarray, k: int, stride: int, w_out: int) -> np.ndarray:
    """(b, c, w) padded input -> (b, w_out, c*k) patch matrix"""
    windows = np.lib.stride_tricks.sliding_window_view(x, k, axis=-1)[:, :, ::stride, :]
    return rearrange(windows[:, :, :w_out, :], "b c w k -> b w (c k)")


@beartype
def gemm_i32(x: np.ndarray, w: np.ndarray, stride: int, w_out: int) -> np.ndarray:
    """Integer cross-correlation by im2col + GEMM, accumulated in 32 bits.
    x: (b, c_in, width) already padded, w: (c_out, c_in, k) -> (b, c_out, w_out) int32
    """
    cols = im2col(x.astype(np.int32), w.shape[-1], stride, w_out)
    mat = rearrange(w.astype(np.int32), "o c k -> (c k) o")
    return rearrange(cols @ mat, "b w o -> b o w")


@beartype
def split_over_cout(fn: Callable[[np.ndarray], np.ndarray],
                    w: np.ndarray,
                    threads: int) -> np.ndarray:
    """Run fn on c_out chunks of the kernel, concatenating along the channel axis"""
    if threads <= 1 or w.shape[0] == 1:
        return fn(w)
    chunks = np.array_split(w, min(threads, w.shape[0]), axis=0)
    with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
        parts = list(pool.map(fn, chunks))
    return np.concatenate(parts, axis=1)


@beartype
def conv1d_f32_direct(x: TensorF32, layer: Conv1DLayer) -> TensorF32:
    """out[b, co, i] = bias[co] + sum_{ci, j} in[b, ci, i*stride + j - left] * w[co, ci, j]"""
    w_out = check_geometry(x.shape, layer.weights.shape, layer.stride, layer.padding)
    xp = pad_width(x.data.astype(np.float64), layer.padding)
    cols = im2col(xp, layer.k, layer.stride, w_out)
    mat = rearrange(layer.weights.data.astype(np.float64), "o c k -> (c k) o")
    out = rearrange(cols @ mat, "b w o -> b o w") + rearrange(layer.bias, "o -> 1 o 1")
    return TensorF32(out)


@beartype
def conv1d_f32_winograd(x: TensorF32, layer: Conv1DLayer) -> TensorF32:
    """FP32 Winograd baseline: same plan and tiling as the INT8 operator, real arithmetic"""
    plan = plan_conv1d(layer.k, layer.stride)
    if plan.path is not PlanPath.WINOGRAD:
        raise UnsupportedPlanError(f"no Winograd plan for k={layer.k}, stride={layer.stride}")
    w_out = check_geometry(x.shape, layer.weights.shape, layer.stride, layer.padding)
    xp = pad_width(x.data.astype(np.float64), layer.padding)
    w = layer.weights.data.astype(np.float64)
    num_tiles = w_out // 2

    bt, g, at = BASIS.BT.astype(np.float64), BASIS.G, BASIS.AT.astype(np.float64)
    acc = np.zeros((x.shape[0], layer.c_out, num_tiles, 4), dtype=np.float64)
    for o in plan.wino_groups:
        u = np.einsum("jt,oct->ocj", g, w[..., o:o + 3])
        v = np.einsum("ij,bctj->bcti", bt, tile_windows(xp, o, num_tiles))
        acc += np.einsum("ocj,bctj->botj", u, v)
    out = np.einsum("ij,botj->boti", at, acc)
    out = out.reshape(acc.shape[0], acc.shape[1], 2 * num_tiles)

    if w_out % 2:
        # last output point of an odd width: direct dot product over the grouped taps
        taps = 3 * plan.num_groups
        tail = np.einsum("bck,ock->bo", xp[..., w_out - 1:w_out - 1 + taps], w[..., :taps])
        out = np.concatenate([out, tail[..., None]], axis=-1)

    off, length = plan.remainder
    if length:
        rem = tap_group(layer.weights, off, length).data.astype(np.float64)
        cols = im2col(xp[..., off:], length, 1, w_out)
        out = out + rearrange(cols @ rearrange(rem, "o c k -> (c k) o"), "b w o -> b o w")
    return TensorF32(out + rearrange(layer.bias, "o -> 1 o 1"))


@beartype
def conv1d_int8_gemm(x_q: QuantizedTensor,
                     layer_q: QuantConv1DLayer,
                     *,
                     threads: int = 1) -> tuple[TensorI32, TensorF32]:
    """Normal INT8 GEMM Conv1D: int32 accumulation, then raw * s_d * s_g + bias"""
    w_q = layer_q.weights
    w_out = check_geometry(x_q.shape, w_q.shape, layer_q.stride, layer_q.padding)
    headroom = layer_q.c_in * layer_q.k * x_q.scheme.T_s * w_q.scheme.T_s
    if headroom >= ACC_LIMIT:
        raise OverflowRiskError(f"c_in*k*T_act*T_wt = {headroom} does not fit 32-bit accumulators")
    xp = pad_width(x_q.values, layer_q.padding)

    def _gemm(w_chunk: np.ndarray) -> np.ndarray:
        return gemm_i32(xp, w_chunk, layer_q.stride, w_out)

    raw = split_over_cout(_gemm, w_q.values, threads)
    deq = raw.astype(np.float64) * (x_q.scale * w_q.scale) + rearrange(layer_q.bias, "o -> 1 o 1")
    return TensorI32(raw), TensorF32(deq)
