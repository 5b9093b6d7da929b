import itertools
from fractions import Fraction
from dataclasses import dataclass

from beartype import beartype
from einops import rearrange
import numpy as np

from helpers.errors import RangeError, DomainError, UnsupportedPlanError
from helpers.errors import UnsafeSchemeError, OverflowRiskError, ShapeMismatchError
from kernels.tensor import TensorF32, TensorI32, tap_group
from kernels.quantizer import QuantScheme, QuantizedTensor, safe_schemes
from kernels.winograd import BASIS, GROUP_TAPS, Conv1DPlan, PlanPath, tile_windows
from kernels.reference_conv import ACC_LIMIT, QuantConv1DLayer
from kernels.reference_conv import check_geometry, pad_width, gemm_i32, split_over_cout


ACT_SCHEME, WT_SCHEME = safe_schemes(8)


@dataclass(frozen=True)
class OverflowReport:
    max_transformed_act: int
    max_transformed_wt: int
    storage_limit: int
    fits_act: bool
    fits_wt: bool

    @property
    def fits(self) -> tuple[bool, bool]:
        return (self.fits_act, self.fits_wt)

    @property
    def ok(self) -> bool:
        return self.fits_act and self.fits_wt

    def to_dict(self) -> dict[str, object]:
        return {
            "max_transformed_act": self.max_transformed_act,
            "max_transformed_wt": self.max_transformed_wt,
            "storage_limit": self.storage_limit,
            "fits": {"act": self.fits_act, "wt": self.fits_wt},
            "ok": self.ok,
        }


@beartype
def check_overflow(act_scheme: QuantScheme, wt_scheme: QuantScheme) -> OverflowReport:
    """Worst-case magnitudes after the input (2 D_Q) and weight (3 G_Q) transforms"""
    max_act = BASIS.input_gain * act_scheme.T_s
    max_wt = BASIS.weight_gain * wt_scheme.T_s
    limit = min(act_scheme.storage_limit, wt_scheme.storage_limit)
    return OverflowReport(
        max_transformed_act=max_act,
        max_transformed_wt=max_wt,
        storage_limit=limit,
        fits_act=max_act <= act_scheme.storage_limit,
        fits_wt=max_wt <= wt_scheme.storage_limit,
    )


@beartype
def extremal_transform_bounds(act_scheme: QuantScheme,
                              wt_scheme: QuantScheme) -> tuple[int, int]:
    """Exhaustive max |BT d| and |G2 g| over every sign pattern of inputs at +/-T_s"""
    ta, tw = act_scheme.T_s, wt_scheme.T_s
    tiles = np.array(list(itertools.product((-ta, ta), repeat=4)), dtype=np.int32)
    kernels = np.array(list(itertools.product((-tw, tw), repeat=3)), dtype=np.int32)
    max_act = int(np.abs(tiles @ BASIS.BT.T.astype(np.int32)).max())
    max_wt = int(np.abs(kernels @ BASIS.G2.T.astype(np.int32)).max())
    return max_act, max_wt


@beartype
def _check_range(values: np.ndarray, bound: int, what: str):
    if values.size and int(np.abs(values.astype(np.int32)).max()) > bound:
        raise RangeError(f"{what} exceeds the scheme bound {bound}")


@beartype
def transform_input_tile(d: np.ndarray, scheme: QuantScheme = ACT_SCHEME) -> np.ndarray:
    """BT . d for one 4-long input tile; |output| <= 2 T_s"""
    d = np.asarray(d)
    assert d.shape[-1] == 4, "F(2,3) input tiles hold 4 values"  # noqa: PLR2004
    _check_range(d, scheme.T_s, "input tile")
    return d.astype(np.int16) @ BASIS.BT.T


@beartype
def transform_weight(g: np.ndarray, scheme: QuantScheme = WT_SCHEME) -> np.ndarray:
    """G2 . g for one 3-tap kernel; |output| <= 3 T_s"""
    g = np.asarray(g)
    assert g.shape[-1] == GROUP_TAPS, "F(2,3) kernels hold 3 taps"
    _check_range(g, scheme.T_s, "weight taps")
    return g.astype(np.int16) @ BASIS.G2.T


@beartype
def _narrow(x: np.ndarray, scheme: QuantScheme, what: str) -> np.ndarray:
    """Store a transformed operand on the storage width, refusing values that would wrap"""
    if x.size and int(np.abs(x).max()) > scheme.storage_limit:
        raise UnsafeSchemeError(f"transformed {what} does not fit {scheme.storage_bits} bits")
    return x.astype(scheme.storage_dtype)


@beartype
def winograd_headroom(plan: Conv1DPlan, c_in: int) -> int:
    """Largest magnitude any int32 accumulator of the operator can reach"""
    ta, tw = plan.act_scheme.T_s, plan.wt_scheme.T_s
    report = check_overflow(plan.act_scheme, plan.wt_scheme)
    per_group = 3 * report.max_transformed_act * report.max_transformed_wt  # AT sums 3 terms
    rem = 2 * plan.remainder[1] * ta * tw
    return c_in * (plan.num_groups * per_group + rem)


@beartype
def conv1d_int8_winograd(x_q: QuantizedTensor,
                         layer_q: QuantConv1DLayer,
                         plan: Conv1DPlan,
                         *,
                         threads: int = 1) -> tuple[TensorI32, TensorF32]:
    """INT8 Winograd Conv1D with the group/remainder split.
    Returns raw2x (twice the exact integer cross-correlation) and its dequantization.
    """
    if plan.path is not PlanPath.WINOGRAD:
        raise UnsupportedPlanError(f"plan for k={plan.k}, stride={plan.stride} is not Winograd")
    report = check_overflow(plan.act_scheme, plan.wt_scheme)
    if not report.ok:
        raise UnsafeSchemeError(
            f"transforms reach ({report.max_transformed_act}, {report.max_transformed_wt}), "
            f"storage holds {report.storage_limit}: refusing to run")
    w_q = layer_q.weights
    if layer_q.k != plan.k or layer_q.stride != plan.stride:
        raise ShapeMismatchError(f"layer (k={layer_q.k}, s={layer_q.stride}) does not match plan")
    w_out = check_geometry(x_q.shape, w_q.shape, layer_q.stride, layer_q.padding)
    _check_range(x_q.values, plan.act_scheme.T_s, "activation")
    _check_range(w_q.values, plan.wt_scheme.T_s, "weight")
    headroom = winograd_headroom(plan, layer_q.c_in)
    if headroom >= ACC_LIMIT:
        raise OverflowRiskError(f"accumulators may reach {headroom}, beyond 32 bits")

    xp = pad_width(x_q.values, layer_q.padding)
    batch, num_tiles = xp.shape[0], w_out // 2
    # input transforms only depend on the group offset: shared by every c_out chunk.
    # Stored as (j, b*t, groups*c_in) so each transformed component is one int32 GEMM
    v_groups = [
        _narrow(tile_windows(xp, o, num_tiles).astype(np.int16) @ BASIS.BT.T,
                plan.act_scheme, "input")
        for o in plan.wino_groups
    ]
    v_stack = np.ascontiguousarray(
        rearrange(np.stack(v_groups).astype(np.int32), "g b c t j -> j (b t) (g c)"))

    def _raw2x(w: np.ndarray) -> np.ndarray:
        u_groups = [
            _narrow(w[..., o:o + GROUP_TAPS].astype(np.int16) @ BASIS.G2.T,
                    plan.wt_scheme, "weight")
            for o in plan.wino_groups
        ]
        u_stack = np.ascontiguousarray(
            rearrange(np.stack(u_groups).astype(np.int32), "g o c j -> j o (g c)"))
        # storage x storage products summed over (group, c_in): four batched GEMMs
        acc = np.matmul(v_stack, rearrange(u_stack, "j o n -> j n o"))
        out = np.einsum("ij,jno->ino", BASIS.AT.astype(np.int32), acc)
        out = rearrange(out, "i (b t) o -> b o (t i)", b=batch)

        if w_out % 2:
            taps = GROUP_TAPS * plan.num_groups
            tail = gemm_i32(xp[..., w_out - 1:w_out - 1 + taps], w[..., :taps], 1, 1)
            out = np.concatenate([out, 2 * tail], axis=-1)

        off, length = plan.remainder
        if length:
            rem = tap_group(TensorI32(w), off, length).data
            out = out + 2 * gemm_i32(xp[..., off:], rem, 1, w_out)
        return out.astype(np.int32)

    raw2x = split_over_cout(_raw2x, w_q.values, threads)
    factor = x_q.scale * w_q.scale * float(BASIS.output_rescale)
    deq = raw2x.astype(np.float64) * factor + rearrange(layer_q.bias, "o -> 1 o 1")
    return TensorI32(raw2x), TensorF32(deq)


@beartype
def theoretical_speedup(k: int) -> Fraction:
    """2k / (4 floor(k/3) + 2 (k mod 3))"""
    if k < GROUP_TAPS:
        raise DomainError(f"the Winograd speedup is defined for k >= 3, got k={k}")
    return Fraction(2 * k, 4 * (k // GROUP_TAPS) + 2 * (k % GROUP_TAPS))


@dataclass(frozen=True)
class MultCounts:
    gemm_mults: int
    wino_mults: int
    partial_tile: bool  # an odd output width was rounded down to whole tiles

    @property
    def ratio(self) -> Fraction:
        return Fraction(self.gemm_mults, self.wino_mults)


@beartype
def count_multiplications(plan: Conv1DPlan, out_width: int, c_in: int, c_out: int) -> MultCounts:
    """Hadamard/GEMM multiplies only; transforms are additions and shifts"""
    whole = out_width - out_width % 2
    per_tile = 4 * plan.num_groups + 2 * plan.remainder[1]
    return MultCounts(
        gemm_mults=c_out * c_in * whole * plan.k,
        wino_mults=c_out * c_in * (whole // 2) * per_tile,
        partial_tile=bool(out_width % 2),
    )
