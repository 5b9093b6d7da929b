from enum import Enum
from fractions import Fraction
from dataclasses import dataclass
from typing import Optional

from beartype import beartype
import numpy as np

from helpers.errors import InvalidShapeError
from kernels.quantizer import QuantScheme, safe_schemes, full_range_scheme


TILE_OUT: int = 2  # outputs per F(2,3) tile
TILE_IN: int = 4  # inputs per F(2,3) tile
GROUP_TAPS: int = 3  # taps per Winograd group


@dataclass(frozen=True)
class WinogradBasis:
    """F(2,3) transform triple. The weight transform is stored pre-multiplied by 2 so that
    every matrix is integer; `output_rescale` undoes it.
    """
    BT: np.ndarray  # noqa: N815
    G2: np.ndarray  # noqa: N815
    AT: np.ndarray  # noqa: N815
    output_rescale: Fraction

    def __post_init__(self):
        assert self.BT.shape == (TILE_IN, TILE_IN)
        assert self.G2.shape == (TILE_IN, GROUP_TAPS)
        assert self.AT.shape == (TILE_OUT, TILE_IN)
        for m in (self.BT, self.G2, self.AT):
            m.setflags(write=False)

    @property
    def G(self) -> np.ndarray:  # noqa: N802
        return self.G2.astype(np.float64) * float(self.output_rescale)

    @property
    def input_gain(self) -> int:
        """Max row abs-sum of BT: the growth of |d| through the input transform"""
        return int(np.abs(self.BT).sum(axis=1).max())

    @property
    def weight_gain(self) -> int:
        """Max row abs-sum of G2: the growth of |g| through the weight transform"""
        return int(np.abs(self.G2).sum(axis=1).max())


@beartype
def standard_basis() -> WinogradBasis:
    return WinogradBasis(
        BT=np.array([[1, 0, -1, 0],
                     [0, 1, 1, 0],
                     [0, -1, 1, 0],
                     [0, 1, 0, -1]], dtype=np.int16),
        G2=np.array([[2, 0, 0],
                     [1, 1, 1],
                     [1, -1, 1],
                     [0, 0, 2]], dtype=np.int16),
        AT=np.array([[1, 1, 1, 0],
                     [0, 1, -1, -1]], dtype=np.int32),
        output_rescale=Fraction(1, 2),
    )


BASIS: WinogradBasis = standard_basis()


class PlanPath(Enum):
    WINOGRAD = "winograd"
    PLAIN_INT8 = "plain_int8"


@dataclass(frozen=True)
class Conv1DPlan:
    k: int
    stride: int
    wino_groups: tuple[int, ...]  # tap offsets of the F(2,3) groups
    remainder: tuple[int, int]  # (offset, len) of the taps left to the GEMM
    act_scheme: QuantScheme
    wt_scheme: QuantScheme
    path: PlanPath

    def __post_init__(self):
        assert GROUP_TAPS * len(self.wino_groups) + self.remainder[1] == self.k, "taps lost"
        assert (self.path is PlanPath.WINOGRAD) == (len(self.wino_groups) > 0)

    @property
    def num_groups(self) -> int:
        return len(self.wino_groups)


@beartype
def plan_conv1d(k: int,
                stride: int = 1,
                act_scheme: Optional[QuantScheme] = None,
                wt_scheme: Optional[QuantScheme] = None) -> Conv1DPlan:
    """Split a k-tap kernel into floor(k/3) F(2,3) groups plus a (k mod 3)-tap GEMM remainder.
    Kernels with k < 3 or stride > 1 go to the plain INT8 GEMM with full-range schemes.
    """
    if k < 1 or stride < 1:
        raise InvalidShapeError(f"kernel size and stride must be >= 1, got k={k}, s={stride}")
    if k >= GROUP_TAPS and stride == 1:
        default_act, default_wt = safe_schemes(8)
        groups = tuple(range(0, GROUP_TAPS * (k // GROUP_TAPS), GROUP_TAPS))
        return Conv1DPlan(
            k=k,
            stride=stride,
            wino_groups=groups,
            remainder=(GROUP_TAPS * len(groups), k % GROUP_TAPS),
            act_scheme=act_scheme if act_scheme is not None else default_act,
            wt_scheme=wt_scheme if wt_scheme is not None else default_wt,
            path=PlanPath.WINOGRAD,
        )
    full = full_range_scheme(8)
    return Conv1DPlan(
        k=k,
        stride=stride,
        wino_groups=(),
        remainder=(0, k),
        act_scheme=full,
        wt_scheme=full,
        path=PlanPath.PLAIN_INT8,
    )


@beartype
def tile_windows(x: np.ndarray, offset: int, num_tiles: int) -> np.ndarray:
    """(..., width) -> (..., num_tiles, 4) views of the input windows read by one group:
    tile t covers [offset + 2t, offset + 2t + 3]. Groups share the row, only the offset moves.
    """
    if num_tiles == 0:
        return np.zeros(x.shape[:-1] + (0, TILE_IN), dtype=x.dtype)
    windows = np.lib.stride_tricks.sliding_window_view(x, TILE_IN, axis=-1)
    return windows[..., offset::TILE_OUT, :][..., :num_tiles, :]
