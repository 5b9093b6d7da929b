from fractions import Fraction

import pytest

from helpers.errors import DomainError, UnsupportedPlanError
from kernels.winograd import plan_conv1d
from kernels.wino_int8 import theoretical_speedup
from kernels.bench import BenchShape, bench_kernel


def test_report_fields():
    result = bench_kernel(plan_conv1d(8, 1), BenchShape(4, 4, 40), 3, warmup=0)
    row = result.to_dict()
    assert set(row) == {"k", "stride", "c_in", "c_out", "width", "gemm_ns", "wino_ns",
                        "speedup_measured", "speedup_theoretical", "gemm_mults", "wino_mults"}
    assert row["gemm_ns"] > 0 and row["wino_ns"] > 0


@pytest.mark.parametrize("k", [3, 8, 15])
def test_counts_follow_the_cost_model(k):
    result = bench_kernel(plan_conv1d(k, 1), BenchShape(2, 3, 41), 3, warmup=0)
    assert Fraction(result.gemm_mults, result.wino_mults) == theoretical_speedup(k)
    assert result.speedup_theoretical == pytest.approx(float(theoretical_speedup(k)))


def test_table_shape_reports_theoretical_speedup():
    result = bench_kernel(plan_conv1d(15, 1), BenchShape(128, 128, 150), 3, warmup=1)
    assert result.speedup_theoretical == 1.5


def test_too_few_repetitions():
    with pytest.raises(DomainError):
        bench_kernel(plan_conv1d(8, 1), BenchShape(4, 4, 40), 1)


def test_plain_plan():
    with pytest.raises(UnsupportedPlanError):
        bench_kernel(plan_conv1d(1, 1), BenchShape(4, 4, 40), 3)


def test_too_narrow():
    with pytest.raises(DomainError):
        bench_kernel(plan_conv1d(15, 1), BenchShape(4, 4, 10), 3)


@pytest.mark.slow
@pytest.mark.parametrize("k", [9, 15])
def test_winograd_is_not_slower_on_large_layers(k):
    result = bench_kernel(plan_conv1d(k, 1), BenchShape(256, 256, 150), 10)
    assert result.wino_ns <= result.gemm_ns
