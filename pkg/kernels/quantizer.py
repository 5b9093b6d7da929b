import math
from numbers import Real
from dataclasses import dataclass, field

from beartype import beartype
import numpy as np

from helpers import logger
from helpers.errors import InvalidSchemeError, NumericError, CalibrationError
from helpers.math_util import round_half_away, smooth_distribution, kl_divergence
from kernels.tensor import TensorF32


EPS_SCALE: float = 1e-8
DEFAULT_NUM_BINS: int = 2048
MIN_STORAGE_BITS: int = 4  # sub-4-bit schemes are not supported
MAX_STORAGE_BITS: int = 16


@dataclass(frozen=True)
class QuantScheme:
    storage_bits: int
    base_T: int  # noqa: N815
    alpha: float
    T_s: int  # noqa: N815

    @property
    def storage_limit(self) -> int:
        return 2 ** (self.storage_bits - 1) - 1

    @property
    def storage_dtype(self) -> type:
        return np.int8 if self.storage_bits <= 8 else np.int16  # noqa: PLR2004

    def to_dict(self) -> dict[str, float]:
        return {"bits": self.storage_bits, "T": self.base_T, "alpha": self.alpha, "T_s": self.T_s}


@beartype
def make_scheme(storage_bits: int, base_T: int, alpha: Real) -> QuantScheme:  # noqa: N803
    if not MIN_STORAGE_BITS <= storage_bits <= MAX_STORAGE_BITS:
        raise InvalidSchemeError(f"storage bits must lie in [4, 16], got {storage_bits}")
    limit = 2 ** (storage_bits - 1) - 1
    if not 1 <= base_T <= limit:
        raise InvalidSchemeError(f"base range T={base_T} not representable on {storage_bits} bits")
    if not alpha >= 1.:
        raise InvalidSchemeError(f"scaling factor alpha must be >= 1, got {alpha}")
    t_s = math.floor(base_T / alpha)
    if t_s < 1:
        raise InvalidSchemeError(f"scaled range collapsed: floor({base_T}/{alpha}) = 0")
    return QuantScheme(storage_bits=storage_bits, base_T=base_T, alpha=float(alpha), T_s=t_s)


@beartype
def safe_schemes(storage_bits: int = 8) -> tuple[QuantScheme, QuantScheme]:
    """Overflow-free (activation, weight) schemes for F(2,3) on `storage_bits` storage.
    Both live on the (t-1)-bit base range; weights get range-scaled down to a third.
    """
    limit = 2 ** (storage_bits - 1) - 1
    base = 2 ** (storage_bits - 2) - 1
    act_bound, wt_bound = limit // 2, limit // 3
    act = make_scheme(storage_bits, base, base / act_bound)
    wt = make_scheme(storage_bits, base, base / wt_bound)
    assert (act.T_s, wt.T_s) == (act_bound, wt_bound), "range scaling lost a level"
    return act, wt


@beartype
def full_range_scheme(storage_bits: int = 8) -> QuantScheme:
    return make_scheme(storage_bits, 2 ** (storage_bits - 1) - 1, 1.)


@beartype
def naive_storage_bits(bound: int) -> int:
    """Widest plain symmetric bit-width whose range fits inside [-bound, bound]"""
    if bound < 1:
        raise InvalidSchemeError(f"bound must be >= 1, got {bound}")
    bits = 1
    while 2 ** bits - 1 <= bound:
        bits += 1
    return bits


@beartype
def naive_scheme(bound: int, storage_bits: int = 8) -> QuantScheme:
    """Plain symmetric scheme on the widest bit-width that stays inside [-bound, bound]"""
    return make_scheme(storage_bits, 2 ** (naive_storage_bits(bound) - 1) - 1, 1.)


@dataclass(frozen=True)
class QuantizedTensor:
    values: np.ndarray
    scale: float
    scheme: QuantScheme

    def __post_init__(self):
        if not (math.isfinite(self.scale) and self.scale > 0):
            raise NumericError(f"scale must be finite and > 0, got {self.scale}")
        assert self.values.ndim == 3, "(batch, channels, width) layout expected"  # noqa: PLR2004
        if self.values.size and int(np.abs(self.values.astype(np.int32)).max()) > self.scheme.T_s:
            raise InvalidSchemeError(f"quantized values exceed T_s={self.scheme.T_s}")
        self.values.setflags(write=False)

    @property
    def shape(self) -> tuple[int, int, int]:
        b, c, w = self.values.shape
        return (b, c, w)


@beartype
def _check_scale(scale: float):
    if not (math.isfinite(scale) and scale > 0):
        raise NumericError(f"scale must be finite and > 0, got {scale}")


@beartype
def quantize_values(v: np.ndarray, scale: float, scheme: QuantScheme) -> QuantizedTensor:
    """round(clip(v / s, -T_s, T_s)), computed in float64"""
    _check_scale(scale)
    v = np.asarray(v, dtype=np.float64)
    if not np.isfinite(v).all():
        raise NumericError("cannot quantize non-finite values")
    q = round_half_away(np.clip(v / scale, -scheme.T_s, scheme.T_s))
    return QuantizedTensor(values=q.astype(scheme.storage_dtype), scale=float(scale),
                           scheme=scheme)


@beartype
def quantize(v: TensorF32, scale: float, scheme: QuantScheme) -> QuantizedTensor:
    return quantize_values(v.data, scale, scheme)


@beartype
def dequantize(q: QuantizedTensor) -> TensorF32:
    return TensorF32(q.values.astype(np.float64) * q.scale)


@beartype
def fake_quantize(v: TensorF32, scale: float, scheme: QuantScheme) -> TensorF32:
    return dequantize(quantize(v, scale, scheme))


@beartype
def minmax_scale(v: TensorF32, scheme: QuantScheme, eps: float = EPS_SCALE) -> float:
    max_abs = float(np.abs(v.data.astype(np.float64)).max())
    if max_abs == 0.:
        return eps
    return max_abs / scheme.T_s


@dataclass(frozen=True)
class Histogram:
    bin_edges: np.ndarray
    counts: np.ndarray
    max_abs: float

    @property
    def num_bins(self) -> int:
        return self.counts.size


@beartype
def build_histogram(v: TensorF32, num_bins: int = DEFAULT_NUM_BINS) -> Histogram:
    return build_histogram_values(v.data, num_bins)


@beartype
def build_histogram_values(v: np.ndarray, num_bins: int = DEFAULT_NUM_BINS) -> Histogram:
    """Counts of |v| over uniform bins spanning [0, max|v|]"""
    if v.size == 0:
        raise CalibrationError("cannot build a histogram of an empty tensor")
    if num_bins < 1:
        raise CalibrationError(f"num_bins must be >= 1, got {num_bins}")
    mags = np.abs(np.asarray(v, dtype=np.float64)).ravel()
    if not np.isfinite(mags).all():
        raise NumericError("cannot histogram non-finite values")
    max_abs = float(mags.max())
    # an all-zero tensor still needs a non-empty range: everything lands in bin 0
    hi = max_abs if max_abs > 0. else 1.
    counts, edges = np.histogram(mags, bins=num_bins, range=(0., hi))
    return Histogram(bin_edges=edges, counts=counts.astype(np.int64), max_abs=max_abs)


@dataclass(frozen=True)
class KLSearch:
    index: int  # number of kept bins
    threshold: float
    scale: float
    divergence: float
    degenerate: bool
    divergences: dict[int, float] = field(default_factory=dict, repr=False)


@beartype
def num_quantized_bins(scheme: QuantScheme) -> int:
    return 2 * scheme.T_s + 1


@beartype
def candidate_divergence(counts: np.ndarray, i: int, n_quant: int) -> float:
    """KL between the clipped reference P and its n_quant-level expansion Q, first i bins kept"""
    sliced = counts[:i].astype(np.float64)
    p = sliced.copy()
    p[i - 1] += counts[i:].sum()  # fold the clipped tail into the last kept bin
    is_nonzeros = (p != 0)

    # n_quant buckets of i // n_quant bins, the last one takes the leftover bins
    starts = np.arange(n_quant) * (i // n_quant)
    sizes = np.diff(np.append(starts, i))
    sums = np.add.reduceat(sliced, starts)
    norms = np.add.reduceat(is_nonzeros.astype(np.int64), starts)
    per_bin = np.divide(sums, norms, out=np.zeros_like(sums), where=norms != 0)
    q = np.repeat(per_bin, sizes)
    q[~is_nonzeros] = 0.

    try:
        p = smooth_distribution(p)
        q = smooth_distribution(q)
    except ValueError:
        return math.inf
    return kl_divergence(p, q)


@beartype
def kl_search(hist: Histogram, scheme: QuantScheme) -> KLSearch:
    n_quant = num_quantized_bins(scheme)
    if hist.num_bins < n_quant:
        raise CalibrationError(f"need at least {n_quant} bins for T_s={scheme.T_s}, "
                               f"got {hist.num_bins}")
    if np.count_nonzero(hist.counts) < 2:  # noqa: PLR2004
        # all mass in one bin: nothing to search over
        logger.warn("degenerate histogram, falling back to min-max calibration")
        scale = hist.max_abs / scheme.T_s if hist.max_abs > 0. else EPS_SCALE
        return KLSearch(index=hist.num_bins, threshold=hist.max_abs, scale=scale,
                        divergence=math.nan, degenerate=True)

    divergences = {}
    best_i, best_kl = -1, math.inf
    for i in range(n_quant, hist.num_bins + 1):
        kl = candidate_divergence(hist.counts, i, n_quant)
        divergences[i] = kl
        if kl < best_kl:  # strict: the first minimum wins ties
            best_i, best_kl = i, kl
    assert best_i > 0, "no finite divergence on a non-degenerate histogram"
    threshold = float(hist.bin_edges[best_i])
    return KLSearch(index=best_i, threshold=threshold, scale=threshold / scheme.T_s,
                    divergence=best_kl, degenerate=False, divergences=divergences)


@beartype
def kl_calibrate(hist: Histogram, scheme: QuantScheme) -> float:
    return kl_search(hist, scheme).scale
