import time
from dataclasses import dataclass, asdict
from collections.abc import Callable

from beartype import beartype
import numpy as np

from helpers import logger
from helpers.errors import DomainError, UnsupportedPlanError
from kernels.quantizer import QuantizedTensor
from kernels.winograd import Conv1DPlan, PlanPath
from kernels.reference_conv import QuantConv1DLayer, conv1d_int8_gemm, output_width
from kernels.wino_int8 import conv1d_int8_winograd, count_multiplications, theoretical_speedup


MIN_REPETITIONS: int = 3
DEFAULT_WARMUP: int = 2
DEFAULT_REPETITIONS: int = 10

# (k, stride, c_in, c_out) rows of the profiled operator shapes
PROFILE_SHAPES: tuple[tuple[int, int, int, int], ...] = (
    (3, 1, 256, 256),
    (9, 1, 256, 256),
    (13, 1, 128, 128),
    (15, 1, 128, 128),
)
PROFILE_WIDTH: int = 150


@dataclass(frozen=True)
class BenchShape:
    c_in: int
    c_out: int
    width: int
    batch: int = 1

    def __post_init__(self):
        assert min(self.c_in, self.c_out, self.width, self.batch) >= 1, "shape must be positive"


@dataclass(frozen=True)
class BenchResult:
    k: int
    stride: int
    c_in: int
    c_out: int
    width: int
    gemm_ns: float
    wino_ns: float
    speedup_measured: float
    speedup_theoretical: float
    gemm_mults: int
    wino_mults: int

    def to_dict(self) -> dict[str, float]:
        return asdict(self)


@beartype
def median_ns(fn: Callable[[], object], repetitions: int, warmup: int) -> float:
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(repetitions):
        tic = time.perf_counter_ns()
        fn()
        samples.append(time.perf_counter_ns() - tic)
    return float(np.median(samples))


@beartype
def random_operands(plan: Conv1DPlan,
                    shape: BenchShape,
                    rng: np.random.Generator) -> tuple[QuantizedTensor, QuantConv1DLayer]:
    """Uniform integers over the plan's scheme ranges, unit scales"""
    ta, tw = plan.act_scheme.T_s, plan.wt_scheme.T_s
    x = rng.integers(-ta, ta + 1, size=(shape.batch, shape.c_in, shape.width))
    w = rng.integers(-tw, tw + 1, size=(shape.c_out, shape.c_in, plan.k))
    x_q = QuantizedTensor(values=x.astype(plan.act_scheme.storage_dtype), scale=1.,
                          scheme=plan.act_scheme)
    w_q = QuantizedTensor(values=w.astype(plan.wt_scheme.storage_dtype), scale=1.,
                          scheme=plan.wt_scheme)
    return x_q, QuantConv1DLayer(weights=w_q, stride=plan.stride)


@beartype
def bench_kernel(plan: Conv1DPlan,
                 shape: BenchShape,
                 repetitions: int = DEFAULT_REPETITIONS,
                 *,
                 warmup: int = DEFAULT_WARMUP,
                 seed: int = 0,
                 threads: int = 1) -> BenchResult:
    """Median wall-clock of the INT8 GEMM and INT8 Winograd paths on identical operands"""
    if repetitions < MIN_REPETITIONS:
        raise DomainError(f"need at least {MIN_REPETITIONS} timed repetitions, got {repetitions}")
    if plan.path is not PlanPath.WINOGRAD:
        raise UnsupportedPlanError(f"nothing to compare for k={plan.k}, stride={plan.stride}")
    w_out = output_width(shape.width, plan.k, plan.stride, (0, 0))
    if w_out < 1:
        raise DomainError(f"width {shape.width} is shorter than the kernel {plan.k}")

    x_q, layer_q = random_operands(plan, shape, np.random.default_rng(seed))
    gemm_ns = median_ns(lambda: conv1d_int8_gemm(x_q, layer_q, threads=threads),
                        repetitions, warmup)
    wino_ns = median_ns(lambda: conv1d_int8_winograd(x_q, layer_q, plan, threads=threads),
                        repetitions, warmup)
    counts = count_multiplications(plan, w_out, shape.c_in, shape.c_out)
    logger.debug(f"k={plan.k} c=({shape.c_in},{shape.c_out}) w={shape.width}: "
                 f"gemm {gemm_ns:.0f}ns, wino {wino_ns:.0f}ns")
    return BenchResult(
        k=plan.k,
        stride=plan.stride,
        c_in=shape.c_in,
        c_out=shape.c_out,
        width=shape.width,
        gemm_ns=gemm_ns,
        wino_ns=wino_ns,
        speedup_measured=gemm_ns / max(wino_ns, 1.),
        speedup_theoretical=float(theoretical_speedup(plan.k)),
        gemm_mults=counts.gemm_mults,
        wino_mults=counts.wino_mults,
    )
