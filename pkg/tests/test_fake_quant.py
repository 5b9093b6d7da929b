import numpy as np
import pytest
import torch

from kernels.tensor import TensorF32
from kernels.quantizer import EPS_SCALE, make_scheme
from rsq.fake_quant import (
    FakeQuantParam,
    fq_forward,
    fq_backward,
    noise_loss,
    noise_grads,
)
from rsq.gradcheck import run_gradcheck


WT = make_scheme(8, 63, 1.5)
ACT = make_scheme(8, 63, 1.)


def tensor(*values: float) -> TensorF32:
    return TensorF32(np.array(values, dtype=np.float64).reshape(1, 1, -1))


def param(scheme, scale) -> FakeQuantParam:
    return FakeQuantParam(scheme, scale)


class TestForward:

    def test_hand_value(self):
        assert fq_forward(tensor(0.123), param(ACT, 0.01)).data.item() == pytest.approx(0.12)

    def test_grid_identity(self):
        v = tensor(0.5, -1.25, 3.)
        assert fq_forward(v, param(ACT, 0.25)) == v

    def test_saturation(self):
        assert fq_forward(tensor(10.), param(ACT, 0.01)).data.item() == pytest.approx(0.63)

    def test_module_matches_tensor_form(self):
        v = torch.from_numpy(np.random.default_rng(0).normal(size=(2, 3, 9)))
        p = param(ACT, 0.05)
        expected = fq_forward(TensorF32(v.numpy()), p).data
        np.testing.assert_allclose(p(v).detach().numpy(), expected, rtol=1e-6, atol=1e-7)


class TestBackward:

    def test_clipped_above(self):
        grad_v, grad_s = fq_backward(tensor(100.), param(WT, 1.), tensor(1.))
        assert grad_v.data.item() == 0.
        assert grad_s == pytest.approx(42.)

    def test_in_range(self):
        grad_v, grad_s = fq_backward(tensor(1.23), param(WT, 1.), tensor(1.))
        assert grad_v.data.item() == 1.
        assert grad_s == pytest.approx(-0.23, abs=1e-6)

    def test_clipped_below(self):
        _, grad_s = fq_backward(tensor(-100.), param(WT, 1.), tensor(1.))
        assert grad_s == pytest.approx(-42.)

    def test_upstream_weights_the_sum(self):
        _, grad_s = fq_backward(tensor(100., -100.), param(WT, 1.), tensor(2., 0.5))
        assert grad_s == pytest.approx(2. * 42. - 0.5 * 42.)

    def test_autograd_agrees(self):
        rng = np.random.default_rng(3)
        v = torch.from_numpy(rng.normal(scale=2., size=(2, 4, 16))).requires_grad_()
        up = torch.from_numpy(rng.normal(size=(2, 4, 16)))
        p = param(ACT, 0.02)
        (p(v) * up).sum().backward()
        grad_v, grad_s = fq_backward(TensorF32(v.detach().numpy()), p, TensorF32(up.numpy()))
        np.testing.assert_allclose(v.grad.numpy(), grad_v.data, atol=1e-6)
        assert float(p.s.grad) == pytest.approx(grad_s, rel=1e-4, abs=1e-4)


class TestNoiseLoss:

    def test_on_grid(self):
        assert noise_loss(tensor(0.02, -0.05), param(ACT, 0.01)) == pytest.approx(0., abs=1e-12)

    def test_half_step(self):
        assert noise_loss(tensor(0.005), param(ACT, 0.01)) == pytest.approx(2.5e-5, rel=1e-4)

    def test_clip(self):
        assert noise_loss(tensor(1.), param(WT, 0.01)) == pytest.approx(0.3364, rel=1e-5)

    def test_non_negative(self):
        v = TensorF32(np.random.default_rng(0).normal(scale=3., size=(1, 4, 50)))
        assert noise_loss(v, param(ACT, 0.03)) >= 0.


class TestNoiseGrads:

    def test_zero_in_range(self):
        grad_v, _ = noise_grads(tensor(0.123, -0.3, 0.0), param(ACT, 0.01))
        assert not grad_v.data.any()

    def test_pulls_inward(self):
        grad_v, _ = noise_grads(tensor(1.), param(WT, 0.01))
        assert grad_v.data.item() == pytest.approx(1.16, rel=1e-5)
        grad_v, _ = noise_grads(tensor(-1.), param(WT, 0.01))
        assert grad_v.data.item() == pytest.approx(-1.16, rel=1e-5)

    def test_autograd_agrees(self):
        rng = np.random.default_rng(4)
        v = torch.from_numpy(rng.normal(scale=2., size=(1, 3, 20))).requires_grad_()
        p = param(ACT, 0.02)
        (p(v) - v).pow(2).mean().backward()
        grad_v, grad_s = noise_grads(TensorF32(v.detach().numpy()), p)
        np.testing.assert_allclose(v.grad.numpy(), grad_v.data, atol=1e-6)
        assert float(p.s.grad) == pytest.approx(grad_s, rel=1e-3, abs=1e-6)


class TestParam:

    def test_scale_stays_positive(self):
        p = param(ACT, 0.5)
        p.set_scale(-3.)
        assert p.scale == EPS_SCALE
        with torch.no_grad():
            p.s.sub_(10.)
        p.clamp_()
        assert p.scale > 0.


class TestGradcheck:

    @pytest.mark.parametrize("t_s", [63, 42])
    def test_passes(self, t_s):
        report = run_gradcheck(t_s=t_s, num_points=300, num_sign_points=2000, seed=0)
        assert report.ok, report.failures[:3]
        assert report.sign_violations == 0

    def test_deterministic(self):
        a = run_gradcheck(t_s=42, num_points=50, num_sign_points=100, seed=9).to_dict()
        b = run_gradcheck(t_s=42, num_points=50, num_sign_points=100, seed=9).to_dict()
        assert a == b

    def test_tight_tolerance_reports_failures(self):
        report = run_gradcheck(t_s=63, num_points=200, num_sign_points=100, tol=1e-12, seed=1)
        assert not report.ok
        assert report.to_dict()["num_failures"] > 0
