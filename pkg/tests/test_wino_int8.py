import itertools
from fractions import Fraction

import numpy as np
import pytest

from helpers.errors import RangeError, DomainError, UnsafeSchemeError, UnsupportedPlanError
from helpers.errors import ShapeMismatchError
from kernels.quantizer import QuantizedTensor, make_scheme, safe_schemes
from kernels.winograd import BASIS, PlanPath, plan_conv1d
from kernels.reference_conv import QuantConv1DLayer, conv1d_int8_gemm
from kernels.wino_int8 import (
    ACT_SCHEME,
    WT_SCHEME,
    check_overflow,
    extremal_transform_bounds,
    transform_input_tile,
    transform_weight,
    conv1d_int8_winograd,
    theoretical_speedup,
    count_multiplications,
)


def qrow(values, scheme, scale=1.) -> QuantizedTensor:
    arr = np.array(values).reshape(1, 1, -1).astype(scheme.storage_dtype)
    return QuantizedTensor(values=arr, scale=scale, scheme=scheme)


def random_operands(rng, k, c_in, c_out, width, batch=1):
    x = rng.integers(-ACT_SCHEME.T_s, ACT_SCHEME.T_s + 1, size=(batch, c_in, width))
    w = rng.integers(-WT_SCHEME.T_s, WT_SCHEME.T_s + 1, size=(c_out, c_in, k))
    x_q = QuantizedTensor(values=x.astype(np.int8), scale=1., scheme=ACT_SCHEME)
    w_q = QuantizedTensor(values=w.astype(np.int8), scale=1., scheme=WT_SCHEME)
    return x_q, QuantConv1DLayer(weights=w_q)


class TestBasis:

    def test_gains(self):
        assert BASIS.input_gain == 2
        assert BASIS.weight_gain == 3
        assert BASIS.output_rescale == Fraction(1, 2)

    def test_identity_exact(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            d = [Fraction(int(n), int(m)) for n, m in zip(rng.integers(-50, 50, 4),
                                                          rng.integers(1, 9, 4))]
            g = [Fraction(int(n), int(m)) for n, m in zip(rng.integers(-50, 50, 3),
                                                          rng.integers(1, 9, 3))]
            bd = [sum(int(BASIS.BT[i, j]) * d[j] for j in range(4)) for i in range(4)]
            gg = [sum(int(BASIS.G2[i, j]) * g[j] for j in range(3)) for i in range(4)]
            had = [a * b for a, b in zip(gg, bd)]
            out = [sum(int(BASIS.AT[i, j]) * had[j] for j in range(4)) * BASIS.output_rescale
                   for i in range(2)]
            direct = [sum(d[i + j] * g[j] for j in range(3)) for i in range(2)]
            assert out == direct

    def test_identity_floats(self):
        rng = np.random.default_rng(1)
        d = rng.normal(size=(10_000, 4))
        g = rng.normal(size=(10_000, 3))
        had = (g @ BASIS.G2.T.astype(np.float64)) * (d @ BASIS.BT.T.astype(np.float64))
        out = had @ BASIS.AT.T.astype(np.float64) * float(BASIS.output_rescale)
        direct = np.stack([(d[:, i:i + 3] * g).sum(axis=1) for i in range(2)], axis=1)
        np.testing.assert_allclose(out, direct, atol=1e-10)


class TestPlan:

    def test_k8(self):
        plan = plan_conv1d(8, 1)
        assert plan.path is PlanPath.WINOGRAD
        assert plan.wino_groups == (0, 3)
        assert plan.remainder == (6, 2)

    def test_k3(self):
        plan = plan_conv1d(3, 1)
        assert plan.wino_groups == (0,)
        assert plan.remainder == (3, 0)

    @pytest.mark.parametrize(("k", "stride"), [(1, 1), (2, 1), (8, 2)])
    def test_plain(self, k, stride):
        plan = plan_conv1d(k, stride)
        assert plan.path is PlanPath.PLAIN_INT8
        assert plan.act_scheme.T_s == plan.wt_scheme.T_s == 127

    @pytest.mark.parametrize("k", range(1, 30))
    def test_taps_add_up(self, k):
        plan = plan_conv1d(k, 1)
        assert 3 * plan.num_groups + plan.remainder[1] == k

    def test_default_schemes(self):
        plan = plan_conv1d(9, 1)
        assert (plan.act_scheme.T_s, plan.wt_scheme.T_s) == (63, 42)


class TestOverflow:

    def test_full_range_overflows(self):
        full = make_scheme(8, 127, 1.)
        report = check_overflow(full, full)
        assert (report.max_transformed_act, report.max_transformed_wt) == (254, 381)
        assert report.fits == (False, False)
        assert not report.ok

    def test_safe_ranges_fit(self):
        report = check_overflow(*safe_schemes(8))
        assert (report.max_transformed_act, report.max_transformed_wt) == (126, 126)
        assert report.fits == (True, True)

    def test_report_carries_the_verdict(self):
        full = make_scheme(8, 127, 1.)
        assert check_overflow(*safe_schemes(8)).to_dict()["ok"] is True
        assert check_overflow(full, full).to_dict()["ok"] is False

    def test_minimal_range(self):
        one = make_scheme(8, 1, 1.)
        report = check_overflow(one, one)
        assert (report.max_transformed_act, report.max_transformed_wt) == (2, 3)
        assert report.ok

    def test_extremal_bounds(self):
        assert extremal_transform_bounds(ACT_SCHEME, WT_SCHEME) == (126, 126)

    def test_every_extremal_tile_fits(self):
        for d in itertools.product((-63, 63), repeat=4):
            assert np.abs(transform_input_tile(np.array(d))).max() <= 127
        for g in itertools.product((-42, 42), repeat=3):
            assert np.abs(transform_weight(np.array(g))).max() <= 127

    def test_refuses_unsafe_schemes(self):
        full = make_scheme(8, 127, 1.)
        plan = plan_conv1d(3, 1, full, full)
        with pytest.raises(UnsafeSchemeError):
            conv1d_int8_winograd(qrow([1, 2, 3, 4], full),
                                 QuantConv1DLayer(weights=qrow([1, 1, 1], full)), plan)


class TestTransforms:

    def test_input_tile(self):
        assert transform_input_tile(np.array([1, 2, 3, 4])).tolist() == [-2, 5, 1, -2]
        assert np.abs(transform_input_tile(np.full(4, 63))).max() == 126
        assert not transform_input_tile(np.zeros(4, dtype=np.int8)).any()

    def test_weight(self):
        assert transform_weight(np.array([1, 0, 0])).tolist() == [2, 1, 1, 0]
        assert np.abs(transform_weight(np.full(3, 42))).max() == 126
        assert not transform_weight(np.zeros(3, dtype=np.int8)).any()

    def test_out_of_range(self):
        with pytest.raises(RangeError):
            transform_input_tile(np.array([64, 0, 0, 0]))
        with pytest.raises(RangeError):
            transform_weight(np.array([0, -43, 0]))


class TestOperator:

    def test_box_kernel(self):
        plan = plan_conv1d(3, 1)
        raw2x, deq = conv1d_int8_winograd(qrow([1, 2, 3, 4], ACT_SCHEME),
                                          QuantConv1DLayer(weights=qrow([1, 1, 1], WT_SCHEME)),
                                          plan)
        assert raw2x.data.ravel().tolist() == [12, 18]
        assert deq.data.ravel().tolist() == [6., 9.]

    def test_no_kernel_flip(self):
        plan = plan_conv1d(3, 1)
        _, deq = conv1d_int8_winograd(qrow([1, 2, 3, 4], ACT_SCHEME),
                                      QuantConv1DLayer(weights=qrow([1, 0, 0], WT_SCHEME)), plan)
        assert deq.data.ravel().tolist() == [1., 2.]

    @pytest.mark.parametrize("k", range(3, 17))
    def test_bit_exact_against_gemm(self, k):
        rng = np.random.default_rng(k)
        plan = plan_conv1d(k, 1)
        for _ in range(20):
            c_in, c_out = (int(c) for c in rng.integers(1, 9, size=2))
            width = int(rng.integers(max(4, k), 65))
            x_q, layer = random_operands(rng, k, c_in, c_out, width)
            raw2x, _ = conv1d_int8_winograd(x_q, layer, plan)
            raw, _ = conv1d_int8_gemm(x_q, layer)
            assert np.array_equal(raw2x.data, 2 * raw.data)
            assert not (raw2x.data % 2).any()

    @pytest.mark.parametrize("k", [9, 15])
    def test_batched_tiles_land_in_place(self, k):
        rng = np.random.default_rng(k + 100)
        x_q, layer = random_operands(rng, k, 5, 7, 41, batch=3)
        raw2x, _ = conv1d_int8_winograd(x_q, layer, plan_conv1d(k, 1))
        raw, _ = conv1d_int8_gemm(x_q, layer)
        assert raw2x.shape == raw.shape
        assert np.array_equal(raw2x.data, 2 * raw.data)

    def test_dequantization(self):
        rng = np.random.default_rng(7)
        x_q, layer = random_operands(rng, 8, 3, 4, 30, batch=2)
        x_q = QuantizedTensor(values=x_q.values, scale=0.02, scheme=ACT_SCHEME)
        w_q = QuantizedTensor(values=layer.weights.values, scale=0.05, scheme=WT_SCHEME)
        bias = rng.normal(size=4)
        layer = QuantConv1DLayer(weights=w_q, bias=bias, padding=(3, 4))
        _, deq = conv1d_int8_winograd(x_q, layer, plan_conv1d(8, 1))
        _, ref = conv1d_int8_gemm(x_q, layer)
        np.testing.assert_allclose(deq.data, ref.data, rtol=1e-6, atol=1e-6)

    def test_threads_are_bit_identical(self):
        rng = np.random.default_rng(11)
        x_q, layer = random_operands(rng, 13, 6, 9, 57, batch=2)
        plan = plan_conv1d(13, 1)
        serial, _ = conv1d_int8_winograd(x_q, layer, plan, threads=1)
        for threads in (2, 4, 16):
            assert conv1d_int8_winograd(x_q, layer, plan, threads=threads)[0] == serial

    def test_extremal_inputs(self):
        rng = np.random.default_rng(5)
        x = rng.choice([-63, 63], size=(1, 8, 40))
        w = rng.choice([-42, 42], size=(8, 8, 9))
        x_q = QuantizedTensor(values=x.astype(np.int8), scale=1., scheme=ACT_SCHEME)
        layer = QuantConv1DLayer(weights=QuantizedTensor(values=w.astype(np.int8), scale=1.,
                                                         scheme=WT_SCHEME))
        raw2x, _ = conv1d_int8_winograd(x_q, layer, plan_conv1d(9, 1))
        raw, _ = conv1d_int8_gemm(x_q, layer)
        assert np.array_equal(raw2x.data, 2 * raw.data)

    def test_plain_plan_is_rejected(self):
        x_q, layer = random_operands(np.random.default_rng(0), 3, 1, 1, 8)
        with pytest.raises(UnsupportedPlanError):
            conv1d_int8_winograd(x_q, layer, plan_conv1d(1, 1))

    def test_plan_layer_mismatch(self):
        x_q, layer = random_operands(np.random.default_rng(0), 5, 1, 1, 8)
        with pytest.raises(ShapeMismatchError):
            conv1d_int8_winograd(x_q, layer, plan_conv1d(6, 1))

    def test_values_outside_the_scheme(self):
        # values within the full range but beyond the range-scaled activation bound
        full = make_scheme(8, 127, 1.)
        x_q = qrow([100, 0, 0, 0], full)
        layer = QuantConv1DLayer(weights=qrow([1, 1, 1], WT_SCHEME))
        with pytest.raises(RangeError):
            conv1d_int8_winograd(x_q, layer, plan_conv1d(3, 1))


class TestCostModel:

    @pytest.mark.parametrize(("k", "speedup"), [
        (3, Fraction(3, 2)), (8, Fraction(4, 3)), (15, Fraction(3, 2)), (4, Fraction(4, 3)),
    ])
    def test_speedup(self, k, speedup):
        assert theoretical_speedup(k) == speedup

    def test_domain(self):
        with pytest.raises(DomainError):
            theoretical_speedup(2)

    @pytest.mark.parametrize("k", range(3, 65))
    def test_bound(self, k):
        s = theoretical_speedup(k)
        assert s <= Fraction(3, 2)
        assert (s == Fraction(3, 2)) == (k % 3 == 0)

    def test_counts(self):
        c3 = count_multiplications(plan_conv1d(3, 1), 2, 1, 1)
        assert (c3.gemm_mults, c3.wino_mults, c3.ratio) == (6, 4, Fraction(3, 2))
        c8 = count_multiplications(plan_conv1d(8, 1), 2, 1, 1)
        assert (c8.gemm_mults, c8.wino_mults) == (16, 12)

    @pytest.mark.parametrize("k", range(3, 65))
    def test_ratio_matches_speedup(self, k):
        counts = count_multiplications(plan_conv1d(k, 1), 64, 3, 5)
        assert counts.ratio == theoretical_speedup(k)
        assert not counts.partial_tile

    def test_odd_width_rounds_down(self):
        counts = count_multiplications(plan_conv1d(6, 1), 7, 1, 1)
        assert counts.partial_tile
        assert counts.gemm_mults == 6 * 6
